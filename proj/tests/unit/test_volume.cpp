#include <random>

#include "calcseg/errors.hpp"
#include "calcseg/volume.hpp"

// After the torch headers: c10 defines its own CHECK.
#include <doctest.h>

using namespace calcseg;

namespace {

Volume random_volume(Dims d, uint64_t seed) {
    auto gen = torch::make_generator<at::CPUGeneratorImpl>(seed);
    return make_volume(torch::randn({d.z, d.y, d.x}, gen) * 300.0, {0.5, 0.5, 1.0}, "v");
}

// Oracle: token t, element e read straight from the voxel grid by index arithmetic.
float oracle_token_value(const torch::Tensor& data, const GridDims& g, int64_t p, int64_t t, int64_t e) {
    const int64_t gi = t % g.x, gj = (t / g.x) % g.y, gk = t / (g.x * g.y);
    const int64_t vi = e % p, vj = (e / p) % p, vk = e / (p * p);
    return data[gk * p + vk][gj * p + vj][gi * p + vi].item<float>();
}

}  // namespace

TEST_CASE("patchify token counts and shapes") {
    auto v64 = random_volume({64, 64, 64}, 1);
    auto s = patchify(v64, {4});
    CHECK(s.tokens.size(0) == 4096);
    CHECK(s.tokens.size(1) == 64);
    CHECK((s.grid == GridDims{16, 16, 16}));

    auto v16 = random_volume({16, 16, 16}, 2);
    auto one = patchify(v16, {16});
    CHECK(one.tokens.size(0) == 1);
    CHECK(torch::equal(one.tokens[0], v16.data.flatten()));

    auto v = random_volume({8, 8, 16}, 3);
    auto two = patchify(v, {8});
    CHECK(two.tokens.size(0) == 2);
    CHECK((two.grid == GridDims{1, 1, 2}));
}

TEST_CASE("patchify follows z-major raster order") {
    auto v = random_volume({8, 12, 16}, 4);
    const int64_t p = 4;
    auto s = patchify(v, {p});
    std::mt19937 rng(7);
    for (int trial = 0; trial < 200; ++trial) {
        const int64_t t = std::uniform_int_distribution<int64_t>(0, s.size() - 1)(rng);
        const int64_t e = std::uniform_int_distribution<int64_t>(0, p * p * p - 1)(rng);
        CHECK(s.tokens[t][e].item<float>() == oracle_token_value(v.data, s.grid, p, t, e));
    }
}

TEST_CASE("unpatchify inverts patchify exactly") {
    for (int64_t p : {4, 8, 16}) {
        for (uint64_t seed = 0; seed < 5; ++seed) {
            auto v = random_volume({32, 32, 32}, 100 + seed);
            CHECK(torch::equal(unpatchify(patchify(v, {p})), v.data));
        }
    }
    auto block = torch::arange(64, torch::kFloat32).reshape({1, 64});
    auto single = unpatchify({block, {1, 1, 1}, 4, {}});
    CHECK(torch::equal(single, block.reshape({4, 4, 4})));
}

TEST_CASE("swapping two tokens swaps exactly their blocks") {
    auto v = random_volume({16, 16, 16}, 9);
    const int64_t p = 4;
    auto s = patchify(v, {p});
    const int64_t a = 3, b = 41;
    auto swapped = s;
    swapped.tokens = s.tokens.clone();
    swapped.tokens[a].copy_(s.tokens[b]);
    swapped.tokens[b].copy_(s.tokens[a]);
    auto out = unpatchify(swapped);

    // Oracle: assign every block directly from its token.
    auto expected = torch::empty_like(v.data);
    for (int64_t t = 0; t < s.size(); ++t) {
        const int64_t gi = t % s.grid.x, gj = (t / s.grid.x) % s.grid.y, gk = t / (s.grid.x * s.grid.y);
        for (int64_t e = 0; e < p * p * p; ++e) {
            const int64_t vi = e % p, vj = (e / p) % p, vk = e / (p * p);
            expected[gk * p + vk][gj * p + vj][gi * p + vi] = swapped.tokens[t][e];
        }
    }
    CHECK(torch::equal(out, expected));
    const auto changed = out.ne(v.data).sum().item<int64_t>();
    CHECK(changed <= 2 * p * p * p);
    CHECK(changed > 0);
}

TEST_CASE("patchify errors") {
    auto v = random_volume({10, 8, 8}, 5);
    try {
        patchify(v, {4});
        FAIL("expected a dimension error");
    } catch (const DimensionError& e) {
        CHECK(e.axis() == 'x');
        CHECK(std::string(e.what()).find("axis x") != std::string::npos);
    }
    TokenSequence bad{torch::zeros({2, 10}), {2, 1, 1}, 4, {}};
    CHECK_THROWS_AS(unpatchify(bad), ShapeError);
}

TEST_CASE("padding policy pads with the HU floor and crops back") {
    auto v = random_volume({60, 62, 30}, 6);
    auto s = patchify(v, {16}, PadPolicy::HuFloor);
    CHECK((s.grid == GridDims{4, 4, 2}));
    CHECK(s.padding.before[0] == 2);
    CHECK(s.padding.after[0] == 2);
    CHECK(s.padding.before[1] == 1);
    CHECK(s.padding.after[1] == 1);
    auto full = unpatchify(s);
    CHECK(full[0][0][0].item<float>() == kHuFloor);
    CHECK(torch::equal(crop_padding(full, s.padding), v.data));
}

TEST_CASE("volume invariants") {
    auto bad = torch::zeros({4, 4, 4});
    bad[1][1][1] = std::numeric_limits<float>::quiet_NaN();
    CHECK_THROWS_AS(make_volume(bad, {1, 1, 1}), ShapeError);
    CHECK_THROWS_AS(make_volume(torch::zeros({4, 4, 4}), {0.0, 1, 1}), ConfigError);
    CHECK_THROWS_AS(make_volume(torch::zeros({4, 4}), {1, 1, 1}), ShapeError);
}

TEST_CASE("standardization maps the HU window onto [-1, 1]") {
    auto hu = torch::tensor({-3000.0f, -1024.0f, 512.0f, 2048.0f, 5000.0f});
    auto s = standardize_hu(hu);
    CHECK(s[0].item<float>() == doctest::Approx(-1.0));
    CHECK(s[1].item<float>() == doctest::Approx(-1.0));
    CHECK(s[2].item<float>() == doctest::Approx(0.0));
    CHECK(s[3].item<float>() == doctest::Approx(1.0));
    CHECK(s[4].item<float>() == doctest::Approx(1.0));
}

TEST_CASE("3D sin-cos encoding at the origin") {
    for (int64_t d : {12, 96, 384}) {
        auto t = sincos_positional_encoding_3d({1, 1, 1}, d).encodings;
        auto even = t.index({0, torch::indexing::Slice(0, torch::indexing::None, 2)});
        auto odd = t.index({0, torch::indexing::Slice(1, torch::indexing::None, 2)});
        CHECK(torch::all(even == 0).item<bool>());
        CHECK(torch::all(odd == 1).item<bool>());
    }
}

TEST_CASE("3D sin-cos encoding range and distinctness over a 16^3 grid") {
    auto t = sincos_positional_encoding_3d({16, 16, 16}, 384).encodings.to(torch::kFloat64);
    CHECK(t.abs().max().item<double>() <= 1.0);
    // Exhaustive pairwise squared distances.
    auto sq = (t * t).sum(1);
    auto d2 = sq.unsqueeze(1) + sq.unsqueeze(0) - 2.0 * t.matmul(t.t());
    d2.fill_diagonal_(1e9);
    CHECK(d2.min().item<double>() > 1e-6);
}

TEST_CASE("3D sin-cos encoding depends only on position") {
    auto small = sincos_positional_encoding_3d({3, 2, 2}, 96).encodings;
    auto large = sincos_positional_encoding_3d({7, 5, 4}, 96).encodings;
    for (int64_t k = 0; k < 2; ++k)
        for (int64_t j = 0; j < 2; ++j)
            for (int64_t i = 0; i < 3; ++i) {
                CHECK(torch::equal(small[(k * 2 + j) * 3 + i], large[(k * 5 + j) * 7 + i]));
            }
}

TEST_CASE("3D sin-cos encoding channel policy") {
    // D = 100: each axis gets 32 channels, the last 4 are zero.
    auto t = sincos_positional_encoding_3d({4, 4, 4}, 100).encodings;
    CHECK(axis_encoding_width(100) == 32);
    CHECK(torch::all(t.index({torch::indexing::Slice(), torch::indexing::Slice(96, 100)}) == 0).item<bool>());
    // 1D reference for the x block, standard interleaved formulation.
    const int64_t w = 32;
    for (int64_t i = 0; i < 4; ++i) {
        for (int64_t c = 0; c < w; ++c) {
            const double omega = std::pow(10000.0, -static_cast<double>(c / 2) / (w / 2));
            const double ref = c % 2 == 0 ? std::sin(i * omega) : std::cos(i * omega);
            CHECK(t[i][c].item<float>() == doctest::Approx(ref).epsilon(1e-6));
        }
    }
    CHECK_THROWS_AS(sincos_positional_encoding_3d({2, 2, 2}, 5), ConfigError);
}

TEST_CASE("patchify is bitwise stable") {
    auto v = random_volume({32, 32, 16}, 11);
    CHECK(torch::equal(patchify(v, {8}).tokens, patchify(v, {8}).tokens));
}
