#include "calcseg/mae.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "calcseg/errors.hpp"
#include "calcseg/rng.hpp"

namespace calcseg {

MaeDecoderConfig default_mae_decoder(const EncoderConfig& enc) {
    MaeDecoderConfig dec;
    dec.num_heads = 4;
    dec.depth = 2;
    const int64_t half = enc.embed_dim / 2;
    dec.embed_dim = std::max<int64_t>(dec.num_heads, (half / dec.num_heads) * dec.num_heads);
    return dec;
}

void validate(const MaeDecoderConfig& dec, const EncoderConfig& enc) {
    if (dec.embed_dim <= 0 || dec.depth <= 0 || dec.num_heads <= 0) {
        throw ConfigError("MAE decoder dimensions must be positive");
    }
    if (dec.embed_dim % dec.num_heads != 0) throw ConfigError("MAE decoder width not divisible by its heads");
    if (dec.embed_dim >= enc.embed_dim || dec.depth >= enc.depth) {
        throw ConfigError("MAE decoder must be lighter than its encoder (width " +
                          std::to_string(dec.embed_dim) + " vs " + std::to_string(enc.embed_dim) +
                          ", depth " + std::to_string(dec.depth) + " vs " + std::to_string(enc.depth) + ")");
    }
    if (axis_encoding_width(dec.embed_dim) == 0) throw ConfigError("MAE decoder width too small");
}

nlohmann::json to_json(const EncoderConfig& cfg) {
    return {{"encoder_name", cfg.name}, {"patch_size", cfg.patch_size}, {"embed_dim", cfg.embed_dim},
            {"depth", cfg.depth},       {"heads", cfg.num_heads},       {"mlp_ratio", cfg.mlp_ratio}};
}

EncoderConfig encoder_config_from_json(const nlohmann::json& fp) {
    EncoderConfig cfg;
    cfg.name = fp.at("encoder_name").get<std::string>();
    cfg.patch_size = fp.at("patch_size").get<int64_t>();
    cfg.embed_dim = fp.at("embed_dim").get<int64_t>();
    cfg.depth = fp.at("depth").get<int64_t>();
    cfg.num_heads = fp.at("heads").get<int64_t>();
    cfg.mlp_ratio = fp.at("mlp_ratio").get<double>();
    return cfg;
}

nlohmann::json to_json(const MaeDecoderConfig& cfg) {
    return {{"embed_dim", cfg.embed_dim}, {"depth", cfg.depth}, {"heads", cfg.num_heads}, {"mlp_ratio", cfg.mlp_ratio}};
}

MaeDecoderImpl::MaeDecoderImpl(const MaeDecoderConfig& cfg, int64_t encoder_dim, int64_t patch_size) : cfg_(cfg) {
    const int64_t hidden = static_cast<int64_t>(cfg.embed_dim * cfg.mlp_ratio);
    embed_ = register_module("embed", torch::nn::Linear(encoder_dim, cfg.embed_dim));
    mask_token_ = register_parameter("mask_token", torch::zeros({cfg.embed_dim}));
    blocks_ = register_module("blocks", torch::nn::ModuleList());
    for (int64_t i = 0; i < cfg.depth; ++i) {
        blocks_->push_back(TransformerBlock(cfg.embed_dim, cfg.num_heads, hidden));
    }
    norm_ = register_module("norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({cfg.embed_dim}).eps(1e-6)));
    head_ = register_module("head", torch::nn::Linear(cfg.embed_dim, patch_size * patch_size * patch_size));
}

torch::Tensor MaeDecoderImpl::run(torch::Tensor x, const GridDims& grid) {
    if (x.size(1) != grid.numel()) {
        throw ShapeError("decoder received " + std::to_string(x.size(1)) + " tokens for grid " + to_string(grid));
    }
    x = x + sincos_positional_encoding_3d(grid, cfg_.embed_dim).encodings.to(x.dtype()).unsqueeze(0);
    for (const auto& block : *blocks_) x = block->as<TransformerBlock>()->forward(x);
    return head_(norm_(x));
}

torch::Tensor MaeDecoderImpl::forward(const torch::Tensor& latent, const GridDims& grid) {
    return run(embed_(latent), grid);
}

torch::Tensor MaeDecoderImpl::forward_masked(const torch::Tensor& latent_visible, const torch::Tensor& visible,
                                             const GridDims& grid) {
    auto vis = embed_(latent_visible);
    const int64_t B = vis.size(0), N = grid.numel(), D = vis.size(2);
    auto full = mask_token_.to(vis.dtype()).view({1, 1, D}).expand({B, N, D}).clone();
    full = full.scatter(1, visible.unsqueeze(-1).expand({B, visible.size(1), D}), vis);
    return run(full, grid);
}

MaeDecoder build_mae_decoder(const MaeDecoderConfig& cfg, const EncoderConfig& enc, uint64_t init_seed) {
    validate(cfg, enc);
    MaeDecoder dec(cfg, enc.embed_dim, enc.patch_size);
    auto gen = make_generator(init_seed);
    init_transformer_weights(*dec, gen);
    torch::NoGradGuard no_grad;
    for (auto& item : dec->named_parameters(/*recurse=*/false)) {
        if (item.key() == "mask_token") item.value().normal_(0.0, 0.02, gen);
    }
    return dec;
}

MaskedAutoencoderImpl::MaskedAutoencoderImpl(Encoder enc, MaeDecoder dec) {
    encoder = register_module("encoder", std::move(enc));
    decoder = register_module("decoder", std::move(dec));
}

torch::Tensor MaskedAutoencoderImpl::forward(const torch::Tensor& patches, const GridDims& grid,
                                             const torch::Tensor& visible) {
    auto latent = encoder->forward(patches, grid, visible);
    return decoder->forward_masked(latent.states, visible, grid);
}

torch::Tensor normalize_patch_targets(const torch::Tensor& raw, double eps) {
    auto mean = raw.mean(-1, /*keepdim=*/true);
    auto var = raw.var(-1, /*unbiased=*/false, /*keepdim=*/true);
    return (raw - mean) / torch::sqrt(var + eps);
}

torch::Tensor mae_loss(const torch::Tensor& pred, const torch::Tensor& target, const torch::Tensor& mask) {
    if (pred.sizes() != target.sizes()) throw ShapeError("prediction and target shapes differ");
    if (mask.dim() != pred.dim() - 1 || mask.sizes() != pred.sizes().slice(0, pred.dim() - 1)) {
        throw ShapeError("mask must cover exactly the token axes of the prediction");
    }
    auto m = mask.to(pred.dtype());
    auto n_masked = m.sum();
    if (n_masked.item<double>() < 0.5) {
        throw ConfigError("MAE loss is undefined when no token is masked");
    }
    auto per_token = (pred - target).pow(2).mean(-1);
    return (per_token * m).sum() / n_masked;
}

double PretrainRunConfig::effective_lr() const {
    return scale_lr_by_batch ? base_lr * static_cast<double>(batch_size) / 256.0 : base_lr;
}

PretrainRunConfig full_scale_pretrain() {
    PretrainRunConfig cfg;
    cfg.epochs = 800;
    return cfg;
}

nlohmann::json to_json(const PretrainRunConfig& cfg) {
    return {{"mask_ratio", cfg.mask_ratio},     {"epochs", cfg.epochs},
            {"batch_size", cfg.batch_size},     {"base_lr", cfg.base_lr},
            {"scale_lr_by_batch", cfg.scale_lr_by_batch}, {"warmup_fraction", cfg.warmup_fraction},
            {"weight_decay", cfg.weight_decay}, {"seed", cfg.seed},
            {"pixel_norm", cfg.pixel_norm},     {"norm_eps", cfg.norm_eps}};
}

nlohmann::json to_json(const LossRecord& r) {
    return {{"epoch", r.epoch}, {"step", r.step}, {"loss", r.loss}, {"lr", r.lr}, {"wall_time", r.wall_time}};
}

double warmup_cosine_lr(double peak, int64_t step, int64_t total_steps, double warmup_fraction) {
    const int64_t warmup = static_cast<int64_t>(std::ceil(warmup_fraction * static_cast<double>(total_steps)));
    if (step < warmup) return peak * static_cast<double>(step + 1) / static_cast<double>(warmup);
    const int64_t span = std::max<int64_t>(1, total_steps - warmup);
    const double progress = std::min(1.0, static_cast<double>(step - warmup) / static_cast<double>(span));
    return 0.5 * peak * (1.0 + std::cos(M_PI * progress));
}

torch::Tensor stack_standardized(const std::vector<Volume>& volumes, int64_t patch_size) {
    if (volumes.empty()) throw ConfigError("dataset is empty");
    std::vector<torch::Tensor> items;
    items.reserve(volumes.size());
    for (const auto& v : volumes) {
        auto [padded, pad] = pad_to_multiple(v.data, patch_size, kHuFloor);
        if (!items.empty() && padded.sizes() != items.front().sizes()) {
            throw ShapeError("volume '" + v.id + "' has dims " + to_string(v.dims()) +
                             " which differ from the rest of the dataset");
        }
        items.push_back(standardize_hu(padded));
    }
    return torch::stack(items);
}

namespace {

std::vector<int64_t> epoch_order(int64_t n, uint64_t seed, int64_t epoch) {
    std::vector<int64_t> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(mix_seed({seed, static_cast<uint64_t>(epoch), 0x0BA7C4ull}));
    std::shuffle(order.begin(), order.end(), rng);
    return order;
}

/// Per-sample masks for one step: visible [B, N_vis] and mask [B, N].
std::pair<torch::Tensor, torch::Tensor> draw_masks(int64_t batch, int64_t n, double ratio, uint64_t seed,
                                                   int64_t epoch, int64_t step) {
    std::vector<torch::Tensor> vis;
    std::vector<torch::Tensor> msk;
    for (int64_t b = 0; b < batch; ++b) {
        const uint64_t s = mix_seed({seed, static_cast<uint64_t>(epoch), static_cast<uint64_t>(step),
                                     static_cast<uint64_t>(b), 0x3A5Cull});
        auto draw = random_mask(n, {ratio, s});
        vis.push_back(torch::tensor(draw.visible, torch::kInt64));
        std::vector<int64_t> m(draw.mask.begin(), draw.mask.end());
        msk.push_back(torch::tensor(m, torch::kInt64));
    }
    return {torch::stack(vis), torch::stack(msk)};
}

nlohmann::json pretrain_fingerprint(const EncoderConfig& enc, const MaeDecoderConfig& dec,
                                    const PretrainRunConfig& run) {
    auto fp = to_json(enc);
    fp["kind"] = "pretrain";
    fp["seed"] = run.seed;
    fp["git_describe"] = git_describe();
    fp["mae_decoder"] = to_json(dec);
    fp["pretrain_run"] = to_json(run);
    return fp;
}

}  // namespace

Checkpoint make_pretrain_checkpoint(MaskedAutoencoder& model, const PretrainRunConfig& run,
                                    const GroupedAdamW* optimizer, int64_t epochs_done) {
    Checkpoint ckpt;
    ckpt.fingerprint = pretrain_fingerprint(model->encoder->config(), model->decoder->config(), run);
    ckpt.weights = collect_weights(*model->encoder, "encoder.");
    for (auto& [k, v] : collect_weights(*model->decoder, "mae_decoder.")) ckpt.weights.emplace(k, v);
    if (optimizer) ckpt.optimizer_state = optimizer->export_state();
    ckpt.meta["epochs_done"] = epochs_done;
    return ckpt;
}

MaskedAutoencoder load_pretrained(const Checkpoint& ckpt) {
    const auto& fp = ckpt.fingerprint;
    if (fp.value("kind", "") != "pretrain") throw FingerprintMismatch("checkpoint is not a pre-training checkpoint");
    const EncoderConfig enc_cfg = encoder_config_from_json(fp);
    MaeDecoderConfig dec_cfg;
    dec_cfg.embed_dim = fp.at("mae_decoder").at("embed_dim").get<int64_t>();
    dec_cfg.depth = fp.at("mae_decoder").at("depth").get<int64_t>();
    dec_cfg.num_heads = fp.at("mae_decoder").at("heads").get<int64_t>();
    dec_cfg.mlp_ratio = fp.at("mae_decoder").at("mlp_ratio").get<double>();
    MaskedAutoencoder model(Encoder(enc_cfg), MaeDecoder(dec_cfg, enc_cfg.embed_dim, enc_cfg.patch_size));
    assign_weights(*model->encoder, ckpt.weights, "encoder.");
    assign_weights(*model->decoder, ckpt.weights, "mae_decoder.");
    return model;
}

PretrainResult pretrain(const std::vector<Volume>& dataset, const EncoderConfig& enc, const MaeDecoderConfig& dec,
                        const PretrainRunConfig& run, const PretrainOptions& options) {
    validate(enc);
    validate(dec, enc);
    if (!(run.mask_ratio > 0.0 && run.mask_ratio < 1.0)) throw ConfigError("mask ratio must lie in (0, 1)");
    if (run.epochs < 1) throw ConfigError("epochs must be >= 1");
    if (run.batch_size < 1) throw ConfigError("batch_size must be >= 1");

    const int64_t p = enc.patch_size;
    const torch::Tensor volumes = stack_standardized(dataset, p);
    const GridDims grid = grid_for({volumes.size(3), volumes.size(2), volumes.size(1)}, p);
    const torch::Tensor patches = patchify_batch(volumes, p);
    const torch::Tensor targets = run.pixel_norm ? normalize_patch_targets(patches, run.norm_eps) : patches;
    const int64_t M = patches.size(0);
    const int64_t N = grid.numel();

    MaskedAutoencoder model(build_encoder(enc, run.seed), build_mae_decoder(dec, enc, mix_seed({run.seed, 1})));
    int64_t start_epoch = 0;
    if (options.resume) {
        require_compatible(pretrain_fingerprint(enc, dec, run), options.resume->fingerprint,
                           {"/encoder_name", "/patch_size", "/embed_dim", "/depth", "/heads", "/mae_decoder",
                            "/seed"});
        assign_weights(*model->encoder, options.resume->weights, "encoder.");
        assign_weights(*model->decoder, options.resume->weights, "mae_decoder.");
        start_epoch = options.resume->meta.value("epochs_done", int64_t{0});
    }

    GroupedAdamW opt({{named_params(*model->encoder, "encoder."), 1.0},
                      {named_params(*model->decoder, "mae_decoder."), 1.0}},
                     run.weight_decay, {0.9, 0.95});
    if (options.resume) opt.import_state(options.resume->optimizer_state);

    const int64_t steps_per_epoch = (M + run.batch_size - 1) / run.batch_size;
    const int64_t total_steps = steps_per_epoch * run.epochs;
    const double peak = run.effective_lr();
    const auto t0 = std::chrono::steady_clock::now();

    PretrainResult result;
    int64_t epochs_done = start_epoch;
    model->train();
    for (int64_t epoch = start_epoch; epoch < run.epochs; ++epoch) {
        const auto order = epoch_order(M, run.seed, epoch);
        double sum = 0.0;
        for (int64_t s = 0; s < steps_per_epoch; ++s) {
            const int64_t lo = s * run.batch_size;
            const int64_t hi = std::min(M, lo + run.batch_size);
            auto idx = torch::tensor(std::vector<int64_t>(order.begin() + lo, order.begin() + hi), torch::kInt64);
            auto [visible, mask] = draw_masks(hi - lo, N, run.mask_ratio, run.seed, epoch, s);
            const int64_t global_step = epoch * steps_per_epoch + s;
            const double lr = warmup_cosine_lr(peak, global_step, total_steps, run.warmup_fraction);
            opt.set_lr(lr);

            auto pred = model->forward(patches.index_select(0, idx), grid, visible);
            auto loss = mae_loss(pred, targets.index_select(0, idx), mask);
            const double value = loss.item<double>();
            if (!std::isfinite(value)) {
                std::ostringstream os;
                os << "non-finite pre-training loss at epoch " << epoch << ", batch " << s << " (cases";
                for (int64_t i = lo; i < hi; ++i) os << ' ' << dataset[static_cast<size_t>(order[i])].id;
                os << ")";
                throw TrainingError(os.str());
            }
            opt.zero_grad();
            loss.backward();
            opt.step();
            sum += value;
            if (options.on_step) {
                const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
                options.on_step({epoch, global_step, value, lr, wall});
            }
        }
        result.epoch_losses.push_back(sum / static_cast<double>(steps_per_epoch));
        epochs_done = epoch + 1;
        if (options.stop_after_epoch && epochs_done >= *options.stop_after_epoch) break;
    }
    model->eval();
    result.checkpoint = make_pretrain_checkpoint(model, run, &opt, epochs_done);
    result.model = model;
    return result;
}

double masked_reconstruction_correlation(MaskedAutoencoder& model, const std::vector<Volume>& volumes,
                                         double mask_ratio, uint64_t seed) {
    torch::NoGradGuard no_grad;
    const int64_t p = model->encoder->config().patch_size;
    auto data = stack_standardized(volumes, p);
    const GridDims grid = grid_for({data.size(3), data.size(2), data.size(1)}, p);
    auto patches = patchify_batch(data, p);
    auto targets = normalize_patch_targets(patches);
    auto [visible, mask] = draw_masks(patches.size(0), grid.numel(), mask_ratio, seed, 0, 0);
    auto pred = model->forward(patches, grid, visible);
    auto sel = mask.to(torch::kBool);
    auto a = pred.index({sel}).flatten().to(torch::kFloat64);
    auto b = targets.index({sel}).flatten().to(torch::kFloat64);
    a = a - a.mean();
    b = b - b.mean();
    return (a * b).sum().item<double>() / std::sqrt((a * a).sum().item<double>() * (b * b).sum().item<double>());
}

}  // namespace calcseg
