#include "calcseg/decoders.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "calcseg/errors.hpp"
#include "calcseg/png_io.hpp"
#include "calcseg/rng.hpp"

namespace calcseg {

namespace F = torch::nn::functional;

std::string to_string(DecoderKind kind) {
    switch (kind) {
        case DecoderKind::Unetr: return "UNETR";
        case DecoderKind::SfpnUnet: return "SFPN_UNET";
        case DecoderKind::Upscale: return "UPSCALE";
        case DecoderKind::MaeDec: return "MAE_DEC";
    }
    return "?";
}

std::string to_string(UpsampleMode mode) {
    return mode == UpsampleMode::Transposed ? "TRANSPOSED" : "NN_INTERP_CONV";
}

DecoderKind parse_decoder_kind(std::string_view name) {
    for (auto kind : all_decoder_kinds()) {
        if (name == to_string(kind)) return kind;
    }
    throw ConfigError("unknown decoder '" + std::string(name) + "' (expected UNETR, SFPN_UNET, UPSCALE or MAE_DEC)");
}

UpsampleMode parse_upsample_mode(std::string_view name) {
    if (name == "TRANSPOSED") return UpsampleMode::Transposed;
    if (name == "NN_INTERP_CONV") return UpsampleMode::NnInterpConv;
    throw ConfigError("unknown upsample mode '" + std::string(name) + "' (expected TRANSPOSED or NN_INTERP_CONV)");
}

std::vector<DecoderKind> all_decoder_kinds() {
    return {DecoderKind::Unetr, DecoderKind::SfpnUnet, DecoderKind::Upscale, DecoderKind::MaeDec};
}

nlohmann::json to_json(const DecoderSpec& spec) {
    nlohmann::json j{{"kind", to_string(spec.kind)},
                     {"upsample_mode", to_string(spec.upsample)},
                     {"channels", spec.channels},
                     {"taps", spec.taps}};
    if (spec.mae) j["mae"] = to_json(*spec.mae);
    return j;
}

DecoderSpec decoder_spec_from_json(const nlohmann::json& j) {
    DecoderSpec spec;
    spec.kind = parse_decoder_kind(j.at("kind").get<std::string>());
    spec.upsample = parse_upsample_mode(j.value("upsample_mode", std::string("NN_INTERP_CONV")));
    spec.channels = j.value("channels", std::vector<int64_t>{});
    spec.taps = j.value("taps", std::vector<int64_t>{});
    if (j.contains("mae") && !j.at("mae").is_null()) {
        MaeDecoderConfig m;
        m.embed_dim = j["mae"].at("embed_dim").get<int64_t>();
        m.depth = j["mae"].at("depth").get<int64_t>();
        m.num_heads = j["mae"].at("heads").get<int64_t>();
        m.mlp_ratio = j["mae"].value("mlp_ratio", 4.0);
        spec.mae = m;
    }
    return spec;
}

int64_t doubling_stages(int64_t p) {
    if (p < 2 || (p & (p - 1)) != 0) {
        throw ConfigError("patch_size " + std::to_string(p) +
                          " is incompatible with convolutional decoders: it must be a power of two >= 2");
    }
    int64_t s = 0;
    while ((int64_t{1} << s) < p) ++s;
    return s;
}

std::vector<int64_t> default_channel_schedule(int64_t embed_dim, int64_t stages) {
    std::vector<int64_t> out;
    const int64_t c0 = std::min<int64_t>(embed_dim, 256);
    for (int64_t r = 0; r <= stages; ++r) out.push_back(std::max<int64_t>(16, c0 >> r));
    return out;
}

std::vector<int64_t> default_unetr_taps(int64_t depth) {
    std::vector<int64_t> taps;
    for (int64_t k = 1; k <= 3; ++k) {
        const int64_t b = std::max<int64_t>(1, depth * k / 4);
        if (b < depth && (taps.empty() || taps.back() < b)) taps.push_back(b);
    }
    return taps;
}

torch::Tensor instance_norm(const torch::Tensor& x, const torch::Tensor& weight, const torch::Tensor& bias,
                            double eps) {
    const std::vector<int64_t> spatial{2, 3, 4};
    auto mean = x.mean(spatial, /*keepdim=*/true);
    auto var = (x - mean).pow(2).mean(spatial, /*keepdim=*/true);
    auto y = (x - mean) / torch::sqrt(var + eps);
    return y * weight.view({1, -1, 1, 1, 1}) + bias.view({1, -1, 1, 1, 1});
}

torch::Tensor tokens_to_grid(const torch::Tensor& tokens, const GridDims& g) {
    const int64_t B = tokens.size(0), D = tokens.size(2);
    return tokens.reshape({B, g.z, g.y, g.x, D}).permute({0, 4, 1, 2, 3}).contiguous();
}

namespace {

torch::Tensor leaky(const torch::Tensor& x) {
    return F::leaky_relu(x, F::LeakyReLUFuncOptions().negative_slope(0.01));
}

torch::Tensor resize_nearest(const torch::Tensor& x, const torch::Tensor& like) {
    const std::vector<int64_t> size{like.size(2), like.size(3), like.size(4)};
    if (x.sizes().slice(2) == like.sizes().slice(2)) return x;
    return F::interpolate(x, F::InterpolateFuncOptions().size(size).mode(torch::kNearest));
}

/// Max-pool by 2 along every axis that can be halved.
torch::Tensor pool_half(const torch::Tensor& x) {
    std::vector<int64_t> k;
    for (int64_t d = 2; d < 5; ++d) k.push_back(x.size(d) >= 2 ? 2 : 1);
    return torch::max_pool3d(x, k, k, {0, 0, 0}, {1, 1, 1}, /*ceil_mode=*/true);
}

torch::nn::Conv3d conv3d(int64_t in, int64_t out, int64_t kernel) {
    auto opts = torch::nn::Conv3dOptions(in, out, kernel);
    if (kernel > 1) opts.padding(kernel / 2).padding_mode(torch::kReplicate);
    return torch::nn::Conv3d(opts);
}

void init_conv_weights(torch::nn::Module& module, at::Generator& gen) {
    torch::NoGradGuard no_grad;
    auto fill = [&](torch::Tensor& w, torch::Tensor& b, int64_t fan_in) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
        w.uniform_(-bound, bound, gen);
        if (b.defined()) b.uniform_(-bound, bound, gen);
    };
    for (auto& child : module.modules(/*include_self=*/true)) {
        if (auto* c = child->as<torch::nn::Conv3d>()) {
            fill(c->weight, c->bias, c->weight[0].numel());
        } else if (auto* t = child->as<torch::nn::ConvTranspose3d>()) {
            fill(t->weight, t->bias, t->weight.size(1) * t->weight[0][0].numel());
        }
    }
}

class UpscaleDecoderImpl : public SegDecoderImpl {
public:
    UpscaleDecoderImpl(int64_t embed_dim, const std::vector<int64_t>& ch, UpsampleMode mode)
        : stages_(static_cast<int64_t>(ch.size()) - 1) {
        ups_ = register_module("ups", torch::nn::ModuleList());
        int64_t in = embed_dim;
        for (int64_t r = 1; r <= stages_; ++r) {
            ups_->push_back(UpStage(in, ch[r], mode));
            in = ch[r];
        }
        head_ = register_module("head", conv3d(in, 1, 1));
    }

    torch::Tensor forward(const DecoderInputs& in, const FeatureSink& sink) override {
        torch::Tensor x = in.final_grid;
        int64_t r = 0;
        for (const auto& m : *ups_) {
            x = m->as<UpStage>()->forward(x);
            ++r;
            if (sink && r < stages_) sink("up" + std::to_string(r), int64_t{1} << r, x);
        }
        return head_(x);
    }

    void zero_output_layer() override {
        torch::NoGradGuard no_grad;
        head_->weight.zero_();
        head_->bias.zero_();
    }

    std::vector<std::string> stage_names() const override {
        std::vector<std::string> out;
        for (int64_t r = 1; r < stages_; ++r) out.push_back("up" + std::to_string(r));
        return out;
    }

private:
    int64_t stages_;
    torch::nn::ModuleList ups_;
    torch::nn::Conv3d head_{nullptr};
};

class UnetrDecoderImpl : public SegDecoderImpl {
public:
    UnetrDecoderImpl(int64_t embed_dim, const std::vector<int64_t>& ch, const std::vector<int64_t>& taps,
                     UpsampleMode mode)
        : stages_(static_cast<int64_t>(ch.size()) - 1), taps_(taps.begin(), taps.end()) {
        // Deepest taps go to the shallowest upsampled levels; whatever does not
        // fit into levels 1..S-1 is fused at the token grid.
        std::vector<int64_t> desc(taps.rbegin(), taps.rend());
        level_tap_.assign(static_cast<size_t>(stages_ + 1), -1);
        for (size_t i = 0; i < desc.size(); ++i) {
            const int64_t level = static_cast<int64_t>(i) + 1;
            if (level < stages_) {
                level_tap_[static_cast<size_t>(level)] = desc[i];
            } else {
                grid_taps_.push_back(desc[i]);
            }
        }
        const int64_t c0 = ch[0];
        bottom_ = register_module("bottom", ConvNormAct(embed_dim, c0, 3));
        grid_proj_ = register_module("grid_proj", torch::nn::ModuleList());
        for (size_t i = 0; i < grid_taps_.size(); ++i) grid_proj_->push_back(ConvNormAct(embed_dim, c0, 1));
        if (!grid_taps_.empty()) {
            grid_fuse_ = register_module(
                "grid_fuse", ConvNormAct(c0 * static_cast<int64_t>(1 + grid_taps_.size()), c0, 3));
        }
        skips_ = register_module("skips", torch::nn::ModuleList());
        ups_ = register_module("ups", torch::nn::ModuleList());
        fuses_ = register_module("fuses", torch::nn::ModuleList());
        for (int64_t r = 1; r <= stages_; ++r) {
            torch::nn::Sequential chain;
            if (r < stages_ && level_tap_[static_cast<size_t>(r)] > 0) {
                chain->push_back(UpStage(embed_dim, ch[r], mode));
                for (int64_t k = 1; k < r; ++k) chain->push_back(UpStage(ch[r], ch[r], mode));
            }
            skips_->push_back(chain);
            ups_->push_back(UpStage(ch[r - 1], ch[r], mode));
            const bool has_skip = r == stages_ || level_tap_[static_cast<size_t>(r)] > 0;
            fuses_->push_back(ConvNormAct(has_skip ? 2 * ch[r] : ch[r], ch[r], 3));
        }
        stem_ = register_module("stem", torch::nn::Sequential(ConvNormAct(1, ch[stages_], 3),
                                                              ConvNormAct(ch[stages_], ch[stages_], 3)));
        head_ = register_module("head", conv3d(ch[stages_], 1, 1));
    }

    torch::Tensor forward(const DecoderInputs& in, const FeatureSink& sink) override {
        auto tap = [&](int64_t block) -> const torch::Tensor& {
            auto it = in.taps.find(block);
            if (it == in.taps.end()) throw ShapeError("UNETR decoder missing hidden state of block " + std::to_string(block));
            return it->second;
        };
        if (!in.volume.defined()) throw ShapeError("UNETR decoder needs the input volume");
        torch::Tensor x = bottom_(in.final_grid);
        if (!grid_taps_.empty()) {
            std::vector<torch::Tensor> parts{x};
            for (size_t i = 0; i < grid_taps_.size(); ++i) {
                parts.push_back(grid_proj_[i]->as<ConvNormAct>()->forward(tap(grid_taps_[i])));
            }
            x = grid_fuse_(torch::cat(parts, 1));
        }
        for (int64_t r = 1; r <= stages_; ++r) {
            const auto ri = static_cast<size_t>(r - 1);
            x = ups_[ri]->as<UpStage>()->forward(x);
            torch::Tensor skip;
            if (r == stages_) {
                skip = stem_->forward(in.volume);
            } else if (level_tap_[static_cast<size_t>(r)] > 0) {
                skip = skips_[ri]->as<torch::nn::Sequential>()->forward(tap(level_tap_[static_cast<size_t>(r)]));
            }
            x = fuses_[ri]->as<ConvNormAct>()->forward(skip.defined() ? torch::cat({x, skip}, 1) : x);
            if (sink && r < stages_) sink("up" + std::to_string(r), int64_t{1} << r, x);
        }
        return head_(x);
    }

    void zero_output_layer() override {
        torch::NoGradGuard no_grad;
        head_->weight.zero_();
        head_->bias.zero_();
    }

    std::vector<std::string> stage_names() const override {
        std::vector<std::string> out;
        for (int64_t r = 1; r < stages_; ++r) out.push_back("up" + std::to_string(r));
        return out;
    }

    std::set<int64_t> required_taps() const override { return taps_; }
    bool needs_volume() const override { return true; }

private:
    int64_t stages_;
    std::set<int64_t> taps_;
    std::vector<int64_t> level_tap_;
    std::vector<int64_t> grid_taps_;
    ConvNormAct bottom_{nullptr};
    torch::nn::ModuleList grid_proj_;
    ConvNormAct grid_fuse_{nullptr};
    torch::nn::ModuleList skips_;
    torch::nn::ModuleList ups_;
    torch::nn::ModuleList fuses_;
    torch::nn::Sequential stem_{nullptr};
    torch::nn::Conv3d head_{nullptr};
};

class SfpnUnetDecoderImpl : public SegDecoderImpl {
public:
    SfpnUnetDecoderImpl(int64_t embed_dim, const std::vector<int64_t>& ch, UpsampleMode mode)
        : stages_(static_cast<int64_t>(ch.size()) - 1) {
        const int64_t c0 = ch[0];
        const int64_t c1 = ch[1];
        quarter_ = register_module("quarter", ConvNormAct(embed_dim, c0, 1));
        half_ = register_module("half", ConvNormAct(embed_dim, c0, 1));
        unit_ = register_module("unit", ConvNormAct(embed_dim, c0, 1));
        twice_ = register_module("twice", UpStage(embed_dim, c1, mode));
        fuse_half_ = register_module("fuse_half", ConvNormAct(2 * c0, c0, 3));
        fuse_unit_ = register_module("fuse_unit", ConvNormAct(2 * c0, c0, 3));
        up_twice_ = register_module("up_twice", UpStage(c0, c1, mode));
        fuse_twice_ = register_module("fuse_twice", ConvNormAct(2 * c1, c1, 3));
        ups_ = register_module("ups", torch::nn::ModuleList());
        refine_ = register_module("refine", torch::nn::ModuleList());
        for (int64_t r = 2; r <= stages_; ++r) {
            ups_->push_back(UpStage(ch[r - 1], ch[r], mode));
            refine_->push_back(ConvNormAct(ch[r], ch[r], 3));
        }
        head_ = register_module("head", conv3d(ch[stages_], 1, 1));
    }

    torch::Tensor forward(const DecoderInputs& in, const FeatureSink& sink) override {
        const torch::Tensor& f = in.final_grid;
        auto p_half_in = pool_half(f);
        auto p_quarter = quarter_(pool_half(p_half_in));
        auto p_half = half_(p_half_in);
        auto p_unit = unit_(f);
        auto p_twice = twice_(f);

        auto y = fuse_half_(torch::cat({resize_nearest(p_quarter, p_half), p_half}, 1));
        y = fuse_unit_(torch::cat({resize_nearest(y, p_unit), p_unit}, 1));
        y = fuse_twice_(torch::cat({up_twice_(y), p_twice}, 1));
        if (sink && 1 < stages_) sink("up1", 2, y);
        for (int64_t r = 2; r <= stages_; ++r) {
            const auto ri = static_cast<size_t>(r - 2);
            y = refine_[ri]->as<ConvNormAct>()->forward(ups_[ri]->as<UpStage>()->forward(y));
            if (sink && r < stages_) sink("up" + std::to_string(r), int64_t{1} << r, y);
        }
        return head_(y);
    }

    void zero_output_layer() override {
        torch::NoGradGuard no_grad;
        head_->weight.zero_();
        head_->bias.zero_();
    }

    std::vector<std::string> stage_names() const override {
        std::vector<std::string> out;
        for (int64_t r = 1; r < stages_; ++r) out.push_back("up" + std::to_string(r));
        return out;
    }

private:
    int64_t stages_;
    ConvNormAct quarter_{nullptr}, half_{nullptr}, unit_{nullptr};
    UpStage twice_{nullptr};
    ConvNormAct fuse_half_{nullptr}, fuse_unit_{nullptr};
    UpStage up_twice_{nullptr};
    ConvNormAct fuse_twice_{nullptr};
    torch::nn::ModuleList ups_;
    torch::nn::ModuleList refine_;
    torch::nn::Conv3d head_{nullptr};
};

class MaeSegDecoderImpl : public SegDecoderImpl {
public:
    MaeSegDecoderImpl(MaeDecoder dec, int64_t patch_size) : patch_size_(patch_size) {
        mae_ = register_module("mae", std::move(dec));
    }

    torch::Tensor forward(const DecoderInputs& in, const FeatureSink&) override {
        if (in.final_tokens.size(1) != in.grid.numel()) {
            throw ShapeError("MAE decoder needs all " + std::to_string(in.grid.numel()) + " tokens, got " +
                             std::to_string(in.final_tokens.size(1)));
        }
        auto logits = mae_->forward(in.final_tokens, in.grid);
        return unpatchify_batch(logits, in.grid, patch_size_).unsqueeze(1);
    }

    void zero_output_layer() override {
        torch::NoGradGuard no_grad;
        mae_->head()->weight.zero_();
        mae_->head()->bias.zero_();
    }

    std::vector<std::string> stage_names() const override { return {}; }

private:
    int64_t patch_size_;
    MaeDecoder mae_{nullptr};
};

}  // namespace

UpscaleBlockImpl::UpscaleBlockImpl(int64_t in, int64_t out, UpsampleMode mode) : mode_(mode) {
    if (in < 1 || out < 1) throw ConfigError("upscale block channel counts must be positive");
    if (mode == UpsampleMode::Transposed) {
        transposed_ = register_module("transposed",
                                      torch::nn::ConvTranspose3d(torch::nn::ConvTranspose3dOptions(in, out, 2).stride(2)));
    } else {
        conv_ = register_module("conv", conv3d(in, out, 3));
    }
}

torch::Tensor UpscaleBlockImpl::forward(const torch::Tensor& x) {
    if (mode_ == UpsampleMode::Transposed) return transposed_(x);
    auto up = F::interpolate(x, F::InterpolateFuncOptions()
                                    .scale_factor(std::vector<double>{2.0, 2.0, 2.0})
                                    .mode(torch::kNearest));
    return conv_(up);
}

ConvNormActImpl::ConvNormActImpl(int64_t in, int64_t out, int64_t kernel) {
    conv_ = register_module("conv", conv3d(in, out, kernel));
    gamma_ = register_parameter("norm_weight", torch::ones({out}));
    beta_ = register_parameter("norm_bias", torch::zeros({out}));
}

torch::Tensor ConvNormActImpl::forward(const torch::Tensor& x) {
    return leaky(instance_norm(conv_(x), gamma_, beta_));
}

UpStageImpl::UpStageImpl(int64_t in, int64_t out, UpsampleMode mode) {
    up_ = register_module("up", UpscaleBlock(in, out, mode));
    gamma_ = register_parameter("norm_weight", torch::ones({out}));
    beta_ = register_parameter("norm_bias", torch::zeros({out}));
}

torch::Tensor UpStageImpl::forward(const torch::Tensor& x) {
    return leaky(instance_norm(up_(x), gamma_, beta_));
}

std::shared_ptr<SegDecoderImpl> build_decoder(const DecoderSpec& spec, const EncoderConfig& enc, uint64_t seed) {
    validate(enc);
    if (spec.kind == DecoderKind::MaeDec) {
        const MaeDecoderConfig cfg = spec.mae.value_or(default_mae_decoder(enc));
        return std::make_shared<MaeSegDecoderImpl>(build_mae_decoder(cfg, enc, seed), enc.patch_size);
    }
    const int64_t stages = doubling_stages(enc.patch_size);
    std::vector<int64_t> ch = spec.channels.empty() ? default_channel_schedule(enc.embed_dim, stages) : spec.channels;
    if (static_cast<int64_t>(ch.size()) != stages + 1) {
        throw ConfigError("channel schedule needs " + std::to_string(stages + 1) + " entries for patch_size " +
                          std::to_string(enc.patch_size));
    }
    std::shared_ptr<SegDecoderImpl> dec;
    switch (spec.kind) {
        case DecoderKind::Upscale:
            dec = std::make_shared<UpscaleDecoderImpl>(enc.embed_dim, ch, spec.upsample);
            break;
        case DecoderKind::SfpnUnet:
            dec = std::make_shared<SfpnUnetDecoderImpl>(enc.embed_dim, ch, spec.upsample);
            break;
        case DecoderKind::Unetr: {
            const auto taps = spec.taps.empty() ? default_unetr_taps(enc.depth) : spec.taps;
            for (size_t i = 0; i < taps.size(); ++i) {
                if (taps[i] < 1 || taps[i] > enc.depth || (i > 0 && taps[i] <= taps[i - 1])) {
                    throw ConfigError("UNETR taps must be strictly increasing block indices within encoder depth " +
                                      std::to_string(enc.depth));
                }
            }
            dec = std::make_shared<UnetrDecoderImpl>(enc.embed_dim, ch, taps, spec.upsample);
            break;
        }
        case DecoderKind::MaeDec:
            break;
    }
    auto gen = make_generator(seed);
    init_conv_weights(*dec, gen);
    return dec;
}

SegmentationModelImpl::SegmentationModelImpl(Encoder enc, std::shared_ptr<SegDecoderImpl> dec, DecoderSpec spec)
    : spec_(std::move(spec)) {
    encoder = register_module("encoder", std::move(enc));
    decoder = register_module("decoder", std::move(dec));
}

DecoderInputs SegmentationModelImpl::decoder_inputs(const torch::Tensor& volumes) {
    const int64_t p = encoder->config().patch_size;
    if (volumes.dim() != 4) throw ShapeError("segmentation model expects [B, Z, Y, X]");
    DecoderInputs in;
    in.grid = grid_for({volumes.size(3), volumes.size(2), volumes.size(1)}, p);
    auto latent = encoder->forward(patchify_batch(volumes, p), in.grid, std::nullopt, decoder->required_taps());
    in.final_tokens = latent.states;
    in.final_grid = tokens_to_grid(latent.states, in.grid);
    for (auto& [block, h] : latent.hidden) in.taps.emplace(block, tokens_to_grid(h, in.grid));
    if (decoder->needs_volume()) in.volume = volumes.unsqueeze(1);
    return in;
}

torch::Tensor SegmentationModelImpl::forward(const torch::Tensor& volumes, const FeatureSink& sink) {
    return decoder->forward(decoder_inputs(volumes), sink).squeeze(1);
}

SegmentationModel build_segmentation_model(const EncoderConfig& enc, const DecoderSpec& spec, uint64_t seed) {
    return SegmentationModel(build_encoder(enc, seed), build_decoder(spec, enc, mix_seed({seed, 2})), spec);
}

bool is_convolution_free(const torch::nn::Module& module) {
    for (const auto& child : module.modules(/*include_self=*/true)) {
        if (child->as<torch::nn::Conv3d>() || child->as<torch::nn::ConvTranspose3d>() ||
            child->as<torch::nn::Conv2d>() || child->as<torch::nn::Conv1d>()) {
            return false;
        }
    }
    for (const auto& p : module.parameters()) {
        if (p.dim() >= 3) return false;
    }
    return true;
}

std::vector<FeatureDump> dump_decoder_features(SegDecoderImpl& decoder, const DecoderInputs& inputs,
                                               const std::vector<std::string>& stages,
                                               const std::filesystem::path& out_dir) {
    auto valid = decoder.stage_names();
    valid.push_back("probability");
    for (const auto& s : stages) {
        if (std::find(valid.begin(), valid.end(), s) == valid.end()) {
            std::string list;
            for (const auto& v : valid) list += (list.empty() ? "" : ", ") + v;
            throw ConfigError("unknown stage '" + s + "'; valid stages: " + list);
        }
    }
    auto wanted = [&](const std::string& s) {
        return stages.empty() || std::find(stages.begin(), stages.end(), s) != stages.end();
    };

    torch::NoGradGuard no_grad;
    std::vector<std::tuple<std::string, int64_t, torch::Tensor>> maps;
    auto logits = decoder.forward(inputs, [&](const std::string& name, int64_t scale, const torch::Tensor& t) {
        if (wanted(name)) maps.emplace_back(name, scale, t.detach());
    });
    const int64_t full_scale = logits.size(2) / inputs.grid.z;
    if (wanted("probability")) maps.emplace_back("probability", full_scale, torch::sigmoid(logits));

    std::filesystem::create_directories(out_dir);
    std::vector<FeatureDump> out;
    nlohmann::json index = nlohmann::json::array();
    for (auto& [name, scale, t] : maps) {
        auto vol = t[0].to(torch::kFloat64).mean(0);  // channel mean -> [Z, Y, X]
        auto slice = vol[vol.size(0) / 2].contiguous();
        const int64_t h = slice.size(0), w = slice.size(1);
        const double lo = slice.min().item<double>();
        const double hi = slice.max().item<double>();
        const double var = slice.var(/*unbiased=*/false).item<double>();
        std::vector<uint16_t> px(static_cast<size_t>(h * w));
        auto acc = slice.accessor<double, 2>();
        const bool is_prob = name == "probability";
        for (int64_t y = 0; y < h; ++y) {
            for (int64_t x = 0; x < w; ++x) {
                double u = is_prob ? acc[y][x] : (hi > lo ? (acc[y][x] - lo) / (hi - lo) : 0.0);
                px[static_cast<size_t>(y * w + x)] = static_cast<uint16_t>(std::lround(std::clamp(u, 0.0, 1.0) * 65535.0));
            }
        }
        FeatureDump d{name, scale, out_dir / (name + "_x" + std::to_string(scale) + ".png"), w, h, var};
        write_png_gray16(d.file, w, h, px);
        index.push_back({{"stage", d.stage}, {"scale", d.scale}, {"file", d.file.filename().string()},
                         {"width", w}, {"height", h}, {"variance", var}, {"min", lo}, {"max", hi}});
        out.push_back(std::move(d));
    }
    std::ofstream(out_dir / "index.json") << index.dump(2) << "\n";
    return out;
}

std::vector<FeatureDump> dump_feature_maps(SegmentationModel& model, const Volume& volume,
                                           const std::vector<std::string>& stages,
                                           const std::filesystem::path& out_dir) {
    torch::NoGradGuard no_grad;
    model->eval();
    auto [padded, pad] = pad_to_multiple(volume.data, model->encoder->config().patch_size, kHuFloor);
    auto inputs = model->decoder_inputs(standardize_hu(padded).unsqueeze(0));
    return dump_decoder_features(*model->decoder, inputs, stages, out_dir);
}

}  // namespace calcseg
