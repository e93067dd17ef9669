#include <cmath>
#include <random>

#include "calcseg/encoder.hpp"
#include "calcseg/errors.hpp"

// After the torch headers: c10 defines its own CHECK.
#include <doctest.h>

using namespace calcseg;

TEST_CASE("random_mask visible counts") {
    CHECK(random_mask(100, {0.9, 1}).visible.size() == 10);
    CHECK(random_mask(4096, {0.9, 1}).visible.size() == 409);
    auto none = random_mask(37, {0.0, 1});
    CHECK(none.visible.size() == 37);
    for (auto m : none.mask) CHECK(m == 0);
}

TEST_CASE("random_mask exactness over a property sweep") {
    std::mt19937_64 rng(2024);
    std::uniform_int_distribution<int64_t> pick_n(1, 4096);
    for (int trial = 0; trial < 300; ++trial) {
        const int64_t n = trial < 20 ? trial + 1 : pick_n(rng);
        const int64_t expected = n / 10;
        if (expected < 1) {
            CHECK_THROWS_AS(random_mask(n, {0.9, static_cast<uint64_t>(trial)}), ConfigError);
            continue;
        }
        auto draw = random_mask(n, {0.9, static_cast<uint64_t>(trial)});
        int64_t masked = 0;
        for (auto m : draw.mask) masked += m;
        CHECK(static_cast<int64_t>(draw.visible.size()) == expected);
        CHECK(masked + static_cast<int64_t>(draw.visible.size()) == n);
        for (auto v : draw.visible) CHECK(draw.mask[static_cast<size_t>(v)] == 0);
    }
}

TEST_CASE("random_mask is deterministic and uniform") {
    auto a = random_mask(50, {0.75, 99});
    auto b = random_mask(50, {0.75, 99});
    CHECK(a.visible == b.visible);
    CHECK(a.visible != random_mask(50, {0.75, 100}).visible);

    const int draws = 10000;
    std::vector<int> counts(20, 0);
    for (int d = 0; d < draws; ++d) {
        auto m = random_mask(20, {0.5, static_cast<uint64_t>(d) * 7919u + 3u});
        for (size_t i = 0; i < 20; ++i) counts[i] += m.mask[i];
    }
    const double sigma = std::sqrt(0.25 / draws);
    for (int c : counts) CHECK(std::abs(c / static_cast<double>(draws) - 0.5) <= 3 * sigma);
}

TEST_CASE("encoder size table") {
    auto s = encoder_config("ViTiac-S", 8);
    CHECK(s.embed_dim == 384);
    CHECK(s.depth == 6);
    CHECK(s.num_heads == 6);
    CHECK(encoder_config("ViTiac-M", 8).embed_dim == 576);
    CHECK(encoder_config("ViTiac-L", 8).depth == 12);
    CHECK_THROWS_AS(encoder_config("ViTiac-XL", 8), ConfigError);
    EncoderConfig bad{"custom", 100, 2, 3, 4.0, 4};
    CHECK_THROWS_AS(validate(bad), ConfigError);
}

TEST_CASE("parameter count matches the closed form") {
    auto closed_form = [](const EncoderConfig& c) {
        const int64_t D = c.embed_dim, H = c.mlp_hidden(), p3 = c.patch_size * c.patch_size * c.patch_size;
        const int64_t embed = p3 * D + D;
        const int64_t block = 2 * D + (3 * D * D + 3 * D) + (D * D + D) + 2 * D + (D * H + H) + (H * D + D);
        return embed + c.depth * block + 2 * D;
    };
    int64_t prev = 0;
    for (const auto& name : encoder_names()) {
        auto cfg = encoder_config(name, 4);
        auto enc = build_encoder(cfg, 0);
        const int64_t n = parameter_count(*enc);
        CHECK(n == closed_form(cfg));
        CHECK(n > prev);
        prev = n;
    }
}

TEST_CASE("build_encoder is reproducible") {
    auto cfg = encoder_config("ViTiac-S", 8);
    CHECK(parameter_checksum(*build_encoder(cfg, 5)) == parameter_checksum(*build_encoder(cfg, 5)));
    CHECK(parameter_checksum(*build_encoder(cfg, 5)) != parameter_checksum(*build_encoder(cfg, 6)));
}

TEST_CASE("encode shape, taps and errors") {
    EncoderConfig cfg{"tiny", 48, 3, 4, 2.0, 4};
    auto enc = build_encoder(cfg, 1);
    enc->eval();
    torch::NoGradGuard ng;
    const GridDims grid{2, 2, 2};
    auto patches = torch::randn({2, 8, 64});
    auto out = enc->forward(patches, grid, std::nullopt, {1, 3});
    CHECK(out.states.sizes() == torch::IntArrayRef({2, 8, 48}));
    CHECK(out.hidden.size() == 2);
    CHECK(out.hidden.at(3).sizes() == torch::IntArrayRef({2, 8, 48}));

    auto vis = torch::tensor({{0, 5}, {2, 7}}, torch::kInt64);
    auto masked = enc->forward(patches, grid, vis);
    CHECK(masked.states.sizes() == torch::IntArrayRef({2, 2, 48}));
    CHECK(torch::equal(masked.visible_indices, vis));

    CHECK_THROWS_AS(enc->encode(torch::zeros({1, 4, 47})), ShapeError);
    CHECK_THROWS_AS(enc->forward(patches, grid, std::nullopt, {4}), ConfigError);
    CHECK_THROWS_AS(enc->forward(torch::zeros({1, 8, 63}), grid), ShapeError);
}

TEST_CASE("encoder is permutation equivariant and deterministic") {
    auto cfg = encoder_config("ViTiac-S", 4);
    auto enc = build_encoder(cfg, 3);
    enc->eval();
    torch::NoGradGuard ng;
    const GridDims grid{4, 4, 2};
    auto gen = torch::make_generator<at::CPUGeneratorImpl>(17);
    auto patches = torch::rand({1, grid.numel(), 64}, gen) * 6.0 - 3.0;
    auto embedded = enc->embed(patches, grid);  // positions already attached to each token
    auto perm = torch::randperm(grid.numel(), gen);
    auto a = enc->encode(embedded).states;
    auto b = enc->encode(embedded.index_select(1, perm)).states;
    CHECK((a.index_select(1, perm) - b).abs().max().item<double>() <= 1e-5);
    auto again = enc->encode(embedded).states;
    CHECK((a - again).abs().max().item<double>() <= 1e-6);
    CHECK(torch::isfinite(a).all().item<bool>());
}
