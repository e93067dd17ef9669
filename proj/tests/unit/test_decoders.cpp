#include <cmath>
#include <filesystem>
#include <random>

#include "calcseg/decoders.hpp"
#include "calcseg/errors.hpp"
#include "calcseg/png_io.hpp"
#include "calcseg/rng.hpp"

#include <doctest.h>

using namespace calcseg;
namespace fs = std::filesystem;

namespace {

// Variance across the 8 parity phases of the per-phase means of [1, C, Z, Y, X].
double phase_variance(const torch::Tensor& t) {
    auto a = t[0].to(torch::kFloat64).mean(0).contiguous();
    auto acc = a.accessor<double, 3>();
    double sum[8] = {0};
    double count[8] = {0};
    for (int64_t z = 0; z < a.size(0); ++z)
        for (int64_t y = 0; y < a.size(1); ++y)
            for (int64_t x = 0; x < a.size(2); ++x) {
                const int phase = static_cast<int>((z % 2) * 4 + (y % 2) * 2 + (x % 2));
                sum[phase] += acc[z][y][x];
                count[phase] += 1;
            }
    double mean = 0;
    for (int k = 0; k < 8; ++k) mean += sum[k] / count[k] / 8;
    double var = 0;
    for (int k = 0; k < 8; ++k) var += std::pow(sum[k] / count[k] - mean, 2) / 8;
    return var;
}

EncoderConfig tiny_encoder(int64_t p) {
    EncoderConfig enc;
    enc.name = "tiny";
    enc.patch_size = p;
    enc.embed_dim = 12;
    enc.depth = 2;
    enc.num_heads = 2;
    return enc;
}

DecoderSpec spec_for(DecoderKind kind, UpsampleMode mode = UpsampleMode::NnInterpConv) {
    DecoderSpec s;
    s.kind = kind;
    s.upsample = mode;
    if (kind == DecoderKind::MaeDec) s.mae = MaeDecoderConfig{6, 1, 1, 2.0};
    return s;
}

fs::path scratch_dir(const std::string& name) {
    auto d = fs::temp_directory_path() / ("calcseg_dec_" + name + "_" + std::to_string(::getpid()));
    fs::remove_all(d);
    return d;
}

}  // namespace

TEST_CASE("upscale blocks double every axis") {
    for (auto mode : {UpsampleMode::Transposed, UpsampleMode::NnInterpConv}) {
        UpscaleBlock block(8, 5, mode);
        auto y = block->forward(torch::randn({1, 8, 4, 4, 4}));
        CHECK(y.sizes() == torch::IntArrayRef({1, 5, 8, 8, 8}));
        auto z = block->forward(torch::randn({2, 8, 3, 1, 2}));
        CHECK(z.sizes() == torch::IntArrayRef({2, 5, 6, 2, 4}));
    }
    UpscaleBlock t(8, 5, UpsampleMode::Transposed);
    CHECK(t->transposed()->options.kernel_size()->at(0) == 2);
    CHECK(t->transposed()->options.stride()->at(0) == 2);
    UpscaleBlock n(8, 5, UpsampleMode::NnInterpConv);
    CHECK(n->conv()->options.kernel_size()->at(0) == 3);
    CHECK(n->conv()->options.stride()->at(0) == 1);
    CHECK_THROWS_AS(UpscaleBlock(0, 4, UpsampleMode::Transposed), ConfigError);
}

TEST_CASE("identity convolution keeps a constant input constant") {
    UpscaleBlock block(1, 1, UpsampleMode::NnInterpConv);
    torch::NoGradGuard no_grad;
    block->conv()->weight.zero_();
    block->conv()->weight[0][0][1][1][1] = 1.0;
    block->conv()->bias.zero_();
    auto y = block->forward(torch::full({1, 1, 4, 4, 4}, 3.5));
    CHECK((y - 3.5).abs().max().item<double>() == 0.0);
}

TEST_CASE("transposed kernels checkerboard where interpolation does not") {
    torch::NoGradGuard no_grad;
    UpscaleBlock tr(1, 1, UpsampleMode::Transposed);
    tr->transposed()->weight.zero_();
    tr->transposed()->weight[0][0][0][0][0] = 1.0;
    tr->transposed()->bias.zero_();
    UpscaleBlock nn(1, 1, UpsampleMode::NnInterpConv);
    nn->conv()->weight.zero_();
    nn->conv()->weight[0][0][0][0][0] = 1.0;
    nn->conv()->bias.zero_();
    auto ones = torch::ones({1, 1, 4, 4, 4});
    CHECK(phase_variance(tr->forward(ones)) > 1e-3);
    CHECK(phase_variance(nn->forward(ones)) < 1e-10);

    // Randomly initialised blocks behave the same way on constant input.
    for (uint64_t seed = 0; seed < 5; ++seed) {
        torch::manual_seed(seed);
        UpscaleBlock a(4, 3, UpsampleMode::NnInterpConv);
        UpscaleBlock b(4, 3, UpsampleMode::Transposed);
        auto c = torch::full({1, 4, 3, 3, 3}, 0.7);
        CHECK(phase_variance(a->forward(c)) < 1e-10);
        CHECK(phase_variance(b->forward(c)) > 1e-6);
    }
}

TEST_CASE("decoder configuration") {
    CHECK(doubling_stages(4) == 2);
    CHECK(doubling_stages(16) == 4);
    try {
        doubling_stages(6);
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        CHECK(std::string(e.what()).find("patch_size") != std::string::npos);
    }
    CHECK(default_channel_schedule(384, 2) == std::vector<int64_t>{256, 128, 64});
    CHECK(default_channel_schedule(384, 4) == std::vector<int64_t>{256, 128, 64, 32, 16});
    CHECK(default_channel_schedule(12, 2) == std::vector<int64_t>{16, 16, 16});
    CHECK(default_unetr_taps(12) == std::vector<int64_t>{3, 6, 9});
    CHECK(default_unetr_taps(6) == std::vector<int64_t>{1, 3, 4});
    CHECK(default_unetr_taps(2) == std::vector<int64_t>{1});
    for (auto k : all_decoder_kinds()) CHECK(parse_decoder_kind(to_string(k)) == k);
    CHECK_THROWS_AS(parse_decoder_kind("FCN"), ConfigError);

    auto bad = spec_for(DecoderKind::Unetr);
    bad.taps = {2, 1};
    CHECK_THROWS_AS(build_decoder(bad, encoder_config("ViTiac-S", 4), 0), ConfigError);
    bad.taps = {1, 7};
    CHECK_THROWS_AS(build_decoder(bad, encoder_config("ViTiac-S", 4), 0), ConfigError);

    auto s = spec_for(DecoderKind::SfpnUnet, UpsampleMode::Transposed);
    s.channels = {32, 16, 8};
    auto back = decoder_spec_from_json(to_json(s));
    CHECK(back.kind == s.kind);
    CHECK(back.upsample == s.upsample);
    CHECK(back.channels == s.channels);
}

TEST_CASE("every decoder family returns input-shaped logits") {
    torch::NoGradGuard no_grad;
    const std::vector<std::vector<int64_t>> shapes{{1, 32, 32, 32}, {1, 16, 32, 48}};
    for (const auto& name : encoder_names()) {
        for (int64_t p : {4, 8, 16}) {
            const auto enc = encoder_config(name, p);
            for (auto kind : all_decoder_kinds()) {
                auto model = build_segmentation_model(enc, spec_for(kind), 1);
                model->eval();
                for (const auto& shape : shapes) {
                    CAPTURE(name);
                    CAPTURE(p);
                    CAPTURE(to_string(kind));
                    auto x = torch::randn(shape);
                    CHECK(model->forward(x).sizes() == torch::IntArrayRef(shape));
                }
                if (kind == DecoderKind::MaeDec) CHECK(is_convolution_free(*model->decoder));
                else CHECK_FALSE(is_convolution_free(*model->decoder));
            }
        }
    }
}

TEST_CASE("UNETR doubling stages follow the patch size") {
    torch::NoGradGuard no_grad;
    for (int64_t p : {4, 16}) {
        auto enc = encoder_config("ViTiac-S", p);
        auto dec = build_decoder(spec_for(DecoderKind::Unetr), enc, 0);
        CHECK(static_cast<int64_t>(dec->stage_names().size()) == doubling_stages(p) - 1);
        auto model = build_segmentation_model(enc, spec_for(DecoderKind::Unetr), 0);
        model->eval();
        std::vector<int64_t> seen;
        auto out = model->forward(torch::randn({1, 64, 64, 64}), [&](const std::string&, int64_t scale, const torch::Tensor& t) {
            CHECK(t.size(2) == 64 / p * scale);
            seen.push_back(scale);
        });
        CHECK(out.sizes() == torch::IntArrayRef({1, 64, 64, 64}));
        CHECK(static_cast<int64_t>(seen.size()) == doubling_stages(p) - 1);
        CHECK(dec->needs_volume());
        CHECK(dec->required_taps() == std::set<int64_t>{1, 3, 4});
    }
}

TEST_CASE("zeroed output layers give logits of exactly zero") {
    torch::NoGradGuard no_grad;
    for (auto kind : all_decoder_kinds()) {
        for (int64_t p : {4, 8}) {
            auto model = build_segmentation_model(encoder_config("ViTiac-S", p), spec_for(kind), 3);
            model->eval();
            model->decoder->zero_output_layer();
            auto logits = model->forward(torch::randn({1, 16, 16, 16}));
            CHECK(logits.abs().max().item<double>() == 0.0);
            CHECK((torch::sigmoid(logits) - 0.5).abs().max().item<double>() == 0.0);
        }
    }
}

TEST_CASE("decoders are deterministic under a seed") {
    torch::NoGradGuard no_grad;
    auto x = torch::randn({1, 16, 16, 16});
    for (auto kind : all_decoder_kinds()) {
        auto a = build_segmentation_model(encoder_config("ViTiac-S", 8), spec_for(kind), 9);
        auto b = build_segmentation_model(encoder_config("ViTiac-S", 8), spec_for(kind), 9);
        auto c = build_segmentation_model(encoder_config("ViTiac-S", 8), spec_for(kind), 10);
        a->eval();
        b->eval();
        CHECK(parameter_checksum(*a) == parameter_checksum(*b));
        CHECK(parameter_checksum(*a->decoder) != parameter_checksum(*c->decoder));
        CHECK(torch::equal(a->forward(x), b->forward(x)));
    }
}

TEST_CASE("token logits land in their own block") {
    const GridDims grid{3, 2, 2};
    const int64_t p = 4;
    auto gen = make_generator(2);
    auto logits = torch::randn({1, grid.numel(), p * p * p}, gen);
    auto base = unpatchify_batch(logits, grid, p);
    for (int64_t k = 0; k < grid.numel(); ++k) {
        auto moved = logits.clone();
        moved[0][k] += 1.0;
        auto diff = (unpatchify_batch(moved, grid, p) - base).abs() > 0;
        CHECK(diff.sum().item<int64_t>() == p * p * p);
        const int64_t gx = k % grid.x, gy = (k / grid.x) % grid.y, gz = k / (grid.x * grid.y);
        using torch::indexing::Slice;
        auto block = diff.index({0, Slice(gz * p, gz * p + p), Slice(gy * p, gy * p + p), Slice(gx * p, gx * p + p)});
        CHECK(block.all().item<bool>());
    }
}

TEST_CASE("MAE decoder rejects a partial token set") {
    auto enc = encoder_config("ViTiac-S", 8);
    auto dec = build_decoder(spec_for(DecoderKind::MaeDec), enc, 0);
    DecoderInputs in;
    in.grid = {2, 2, 2};
    in.final_tokens = torch::randn({1, 5, enc.embed_dim});
    CHECK_THROWS_AS(dec->forward(in), ShapeError);
}

TEST_CASE("gradients agree with finite differences") {
    std::mt19937_64 rng(17);
    for (auto kind : all_decoder_kinds()) {
        for (auto mode : {UpsampleMode::NnInterpConv, UpsampleMode::Transposed}) {
            if (kind == DecoderKind::MaeDec && mode == UpsampleMode::Transposed) continue;
            CAPTURE(to_string(kind));
            CAPTURE(to_string(mode));
            auto model = build_segmentation_model(tiny_encoder(4), spec_for(kind, mode), 5);
            model->to(torch::kFloat64);
            model->eval();
            auto gen = make_generator(rng());
            auto x = torch::randn({1, 8, 8, 8}, gen, torch::kFloat64);
            auto w = torch::randn({1, 8, 8, 8}, gen, torch::kFloat64);
            auto objective = [&] { return (model->forward(x) * w).sum(); };

            model->zero_grad();
            objective().backward();
            std::vector<torch::Tensor> params;
            for (auto& prm : model->decoder->parameters()) params.push_back(prm);
            for (int trial = 0; trial < 10; ++trial) {
                auto& prm = params[rng() % params.size()];
                const int64_t idx = static_cast<int64_t>(rng() % static_cast<uint64_t>(prm.numel()));
                // Parameters outside the forward path (the MAE mask token) have no gradient.
                const double analytic = prm.grad().defined() ? prm.grad().flatten()[idx].item<double>() : 0.0;
                const double h = 1e-5;
                double fd;
                {
                    torch::NoGradGuard no_grad;
                    auto flat = prm.view({-1});
                    const double orig = flat[idx].item<double>();
                    flat[idx] = orig + h;
                    const double up = objective().item<double>();
                    flat[idx] = orig - h;
                    const double dn = objective().item<double>();
                    flat[idx] = orig;
                    fd = (up - dn) / (2 * h);
                }
                const double scale = std::max({std::abs(analytic), std::abs(fd), 1e-6});
                CAPTURE(analytic);
                CAPTURE(fd);
                CHECK(std::abs(analytic - fd) / scale < 1e-3);
            }
        }
    }
}

TEST_CASE("feature dumps") {
    torch::NoGradGuard no_grad;
    auto enc = encoder_config("ViTiac-S", 16);
    auto dec = build_decoder(spec_for(DecoderKind::Upscale), enc, 4);
    dec->eval();
    DecoderInputs in;
    in.grid = {2, 2, 2};
    in.final_grid = torch::randn({1, enc.embed_dim, 2, 2, 2});
    in.final_tokens = torch::randn({1, 8, enc.embed_dim});
    const auto dir = scratch_dir("upscale");
    auto dumps = dump_decoder_features(*dec, in, {}, dir);
    REQUIRE(dumps.size() == 4);
    CHECK(dumps.back().stage == "probability");
    for (size_t i = 0; i < dumps.size(); ++i) {
        CHECK(fs::exists(dumps[i].file));
        int64_t w = 0, h = 0;
        read_png_gray(dumps[i].file, w, h);
        CHECK(w == dumps[i].width);
        CHECK(h == dumps[i].height);
        if (i > 0) CHECK(w == 2 * dumps[i - 1].width);
    }
    CHECK(dumps[0].width == 4);
    CHECK(fs::exists(dir / "index.json"));

    // Constant decoder input: every stage of the interpolating decoder stays flat.
    in.final_grid = torch::full({1, enc.embed_dim, 2, 2, 2}, 0.25);
    for (const auto& d : dump_decoder_features(*dec, in, {}, scratch_dir("const"))) {
        CAPTURE(d.stage);
        CHECK(d.variance < 1e-10);
    }
    CHECK_THROWS_WITH_AS(dump_decoder_features(*dec, in, {"up9"}, dir), doctest::Contains("up1, up2, up3"),
                         ConfigError);
    auto only = dump_decoder_features(*dec, in, {"up2"}, scratch_dir("one"));
    REQUIRE(only.size() == 1);
    CHECK(only[0].stage == "up2");

    auto model = build_segmentation_model(enc, spec_for(DecoderKind::Upscale), 4);
    auto vol = make_volume(torch::full({20, 30, 30}, 40.0f), {0.5, 0.5, 1.0}, "c0");
    auto full = dump_feature_maps(model, vol, {}, scratch_dir("model"));
    CHECK(full.size() == 4);
    CHECK(full.back().width == 32);
}
