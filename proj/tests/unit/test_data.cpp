#include <filesystem>
#include <fstream>
#include <map>
#include <random>

#include "calcseg/data.hpp"
#include "calcseg/eval.hpp"
#include "calcseg/errors.hpp"

#include <doctest.h>

using namespace calcseg;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
    auto dir = fs::temp_directory_path() / ("calcseg_test_data_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

torch::Tensor slice_mask(std::initializer_list<std::pair<int, int>> on, int64_t z = 1, int64_t n = 6) {
    auto m = torch::zeros({z, n, n}, torch::kFloat32);
    for (auto [y, x] : on) m[0][y][x] = 200.0f;
    return m;
}

DatasetManifest synthetic_manifest(int patients, int manufacturers, uint64_t seed) {
    std::mt19937_64 rng(seed);
    DatasetManifest m;
    for (int p = 0; p < patients; ++p) {
        const int series = 1 + static_cast<int>(rng() % 3);
        for (int s = 0; s < series; ++s) {
            ManifestEntry e;
            e.patient_id = "P" + std::to_string(p);
            e.case_id = e.patient_id + "_S" + std::to_string(s);
            e.path = "volumes/" + e.case_id + ".nii";
            e.manufacturer = "M" + std::to_string(p % manufacturers);
            e.slice_thickness_mm = 1.0;
            m.entries.push_back(e);
        }
    }
    return m;
}

}  // namespace

TEST_CASE("phantoms are deterministic per seed and index") {
    PhantomConfig cfg;
    cfg.seed = 11;
    auto a = generate_phantom(cfg, 3);
    auto b = generate_phantom(cfg, 3);
    CHECK(torch::equal(a.volume.data, b.volume.data));
    CHECK(torch::equal(a.label, b.label));
    CHECK(a.volume.spacing == b.volume.spacing);
    CHECK_FALSE(torch::equal(a.volume.data, generate_phantom(cfg, 4).volume.data));
    CHECK((a.volume.dims() == cfg.dims));
}

TEST_CASE("phantom labels are annotation-positive by construction") {
    PhantomConfig cfg;
    cfg.seed = 5;
    int64_t nonempty = 0;
    for (int i = 0; i < 12; ++i) {
        auto ph = generate_phantom(cfg, i);
        auto sel = ph.label.to(torch::kBool);
        if (sel.any().item<bool>()) {
            ++nonempty;
            CHECK(ph.clean.index({sel}).min().item<float>() >= 130.0f);
        }
        const double k = ph.volume.spacing.z / cfg.base_slice_mm;
        CHECK(std::abs(k - std::round(k)) < 1e-9);
        CHECK(ph.volume.spacing.x >= cfg.inplane_spacing_mm.lo);
        CHECK(ph.volume.spacing.x <= cfg.inplane_spacing_mm.hi);
    }
    CHECK(nonempty >= 10);

    cfg.lesions_min = cfg.lesions_max = 0;
    auto none = generate_phantom(cfg, 0);
    CHECK(none.label.sum().item<int64_t>() == 0);
    CHECK(none.lesion_count == 0);
}

TEST_CASE("phantom label noise stays separable") {
    PhantomConfig cfg;
    cfg.seed = 21;
    for (int i = 0; i < 10; ++i) {
        auto ph = generate_phantom(cfg, i);
        if (ph.label.sum().item<int64_t>() == 0) continue;
        // The whole volume except the bone plate, which is a deliberate >130 HU distractor.
        auto region = torch::ones_like(ph.label);
        region.index_put_({torch::indexing::Slice(), torch::indexing::Slice(),
                           torch::indexing::Slice(0, cfg.bone_thickness)},
                          0);
        auto noisy_rule = apply_annotation_rule(ph.volume.data, region);
        CHECK(dice(noisy_rule, ph.label) > 0.8);
    }
}

TEST_CASE("phantom config validation and placement failure") {
    PhantomConfig cfg;
    cfg.lesion_hu = {100.0, 400.0};
    CHECK_THROWS_AS(generate_phantom(cfg, 0), ConfigError);

    PhantomConfig tight;
    tight.lesion_radius_mm = {20.0, 25.0};
    tight.lesions_min = tight.lesions_max = 1;
    tight.max_placement_attempts = 5;
    CHECK_THROWS_AS(generate_phantom(tight, 0), GenerationError);

    PhantomConfig custom;
    custom.dims = {48, 40, 20};
    custom.noise_sd_hu = 3.0;
    auto round_trip = phantom_config_from_json(to_json(custom));
    CHECK(round_trip.noise_sd_hu == 3.0);
    CHECK((round_trip.dims == Dims{48, 40, 20}));
}

TEST_CASE("annotation rule examples") {
    auto hu = torch::zeros({1, 6, 6});
    hu[0][2][2] = 129.0f;
    hu[0][2][3] = 130.0f;
    hu[0][3][3] = 500.0f;
    auto region = torch::zeros({1, 6, 6});
    region[0][2][2] = 1;
    region[0][2][3] = 1;
    region[0][3][3] = 1;
    auto out = apply_annotation_rule(hu, region);
    CHECK(out[0][2][2].item<int>() == 0);
    CHECK(out[0][2][3].item<int>() == 1);
    CHECK(out[0][3][3].item<int>() == 1);

    auto everywhere = torch::ones({1, 6, 6});
    CHECK(apply_annotation_rule(slice_mask({{1, 1}}), everywhere).sum().item<int>() == 0);
    CHECK(apply_annotation_rule(slice_mask({{1, 1}, {1, 2}}), everywhere).sum().item<int>() == 2);
    CHECK(apply_annotation_rule(slice_mask({{1, 1}, {2, 2}}), everywhere).sum().item<int>() == 2);

    // Stacked pixels on neighbouring slices are single pixels in 2D.
    auto stacked = torch::zeros({2, 6, 6});
    stacked[0][3][3] = 300.0f;
    stacked[1][3][3] = 300.0f;
    auto region2 = torch::ones({2, 6, 6});
    CHECK(apply_annotation_rule(stacked, region2).sum().item<int>() == 0);
    AnnotationRule three_d;
    three_d.per_slice = false;
    CHECK_THROWS_AS(apply_annotation_rule(stacked, region2, three_d), ConfigError);
    three_d.override = true;
    CHECK(apply_annotation_rule(stacked, region2, three_d).sum().item<int>() == 2);
}

TEST_CASE("annotation rule is idempotent") {
    std::mt19937_64 rng(77);
    for (int trial = 0; trial < 50; ++trial) {
        const int64_t z = 1 + static_cast<int64_t>(rng() % 4), y = 3 + static_cast<int64_t>(rng() % 10),
                      x = 3 + static_cast<int64_t>(rng() % 10);
        auto gen = at::detail::createCPUGenerator(rng());
        auto hu = torch::rand({z, y, x}, gen) * 400.0f - 100.0f;
        auto region = torch::rand({z, y, x}, gen) < 0.7;
        auto once = apply_annotation_rule(hu, region);
        auto twice = apply_annotation_rule(hu, once);
        CHECK(torch::equal(once, twice));
        CHECK((hu.index({once.to(torch::kBool)}) >= 130.0f).all().item<bool>());
    }
}

TEST_CASE("split_by_patient examples and errors") {
    auto m = synthetic_manifest(100, 4, 1);
    SplitConfig cfg;
    cfg.seed = 9;
    auto out = split_by_patient(m, cfg);
    std::map<std::string, std::set<std::string>> patients_in;
    std::map<std::string, int> dev_test_series;
    for (const auto& e : out.entries) {
        std::string group = e.split == Split::Pretrain || e.split == Split::Finetune ? "train"
                            : e.split == Split::Dev                                 ? "dev"
                            : e.split == Split::Test                                ? "test"
                                                                                    : "";
        if (!group.empty()) patients_in[group].insert(e.patient_id);
        if (e.split == Split::Dev || e.split == Split::Test) dev_test_series[e.patient_id] += 1;
    }
    CHECK(patients_in["train"].size() == 80);
    CHECK(patients_in["dev"].size() == 10);
    CHECK(patients_in["test"].size() == 10);
    for (const auto& [p, n] : dev_test_series) CHECK(n == 1);

    SplitConfig bad = cfg;
    bad.test_fraction = 0.2;
    CHECK_THROWS_AS(split_by_patient(m, bad), ConfigError);
    CHECK_THROWS_AS(split_by_patient(synthetic_manifest(9, 2, 1), cfg), ConfigError);
}

TEST_CASE("split invariants hold over a seed sweep") {
    for (uint64_t seed = 0; seed < 100; ++seed) {
        auto m = synthetic_manifest(20 + static_cast<int>(seed % 40), 3, seed);
        std::set<std::string> empty;
        for (size_t i = 0; i < m.entries.size(); i += 5) empty.insert(m.entries[i].case_id);
        SplitConfig cfg;
        cfg.seed = seed;
        auto out = split_by_patient(m, cfg, empty);
        std::map<std::string, std::set<int>> groups_of_patient;
        std::set<std::string> train_patients;
        for (const auto& e : out.entries) {
            if (e.split == Split::Pretrain || e.split == Split::Finetune) {
                groups_of_patient[e.patient_id].insert(0);
                train_patients.insert(e.patient_id);
            }
            if (e.split == Split::Dev) groups_of_patient[e.patient_id].insert(1);
            if (e.split == Split::Test) groups_of_patient[e.patient_id].insert(2);
            if (e.split == Split::Dev || e.split == Split::Test || e.split == Split::Finetune) {
                CHECK(empty.count(e.case_id) == 0);
            }
            CHECK(e.split != Split::Unassigned);
        }
        for (const auto& [p, g] : groups_of_patient) CHECK(g.size() == 1);
        for (const auto& e : out.with_split(Split::Finetune)) CHECK(train_patients.count(e.patient_id) == 1);
        CHECK(out.pretrain_pool().size() >= out.with_split(Split::Finetune).size());
    }
}

TEST_CASE("split is stratified by manufacturer") {
    auto m = synthetic_manifest(200, 4, 3);
    SplitConfig cfg;
    cfg.seed = 4;
    auto out = split_by_patient(m, cfg);
    std::map<std::string, std::map<std::string, int>> counts;
    std::map<std::string, int> totals;
    std::map<std::string, std::string> group_of;
    for (const auto& e : out.entries) {
        std::string g = e.split == Split::Dev ? "dev" : e.split == Split::Test ? "test" : "";
        if (e.split == Split::Pretrain || e.split == Split::Finetune) g = "train";
        if (g.empty() || group_of.count(e.patient_id)) continue;
        group_of[e.patient_id] = g;
        counts[g][e.manufacturer] += 1;
        totals[g] += 1;
    }
    for (const auto& [g, per] : counts) {
        for (int k = 0; k < 4; ++k) {
            const double share = per.count("M" + std::to_string(k)) ? per.at("M" + std::to_string(k)) : 0;
            CHECK(std::abs(share / totals[g] - 0.25) <= 0.10);
        }
    }
}

TEST_CASE("finetune quota") {
    auto m = synthetic_manifest(40, 2, 8);
    SplitConfig cfg;
    cfg.finetune_count = 7;
    auto out = split_by_patient(m, cfg);
    CHECK(out.with_split(Split::Finetune).size() == 7);
}

TEST_CASE("NIfTI and raw volumes round-trip") {
    auto dir = scratch_dir("io");
    auto gen = at::detail::createCPUGenerator(3);
    auto data = torch::randn({5, 7, 9}, gen) * 300.0f;
    auto v = make_volume(data, {0.4321, 0.55, 2.5}, "case_a", "patient_a");
    for (const char* name : {"a.nii", "b.raw"}) {
        write_volume(v, dir / name);
        auto r = read_volume(dir / name);
        CHECK(torch::equal(r.data, v.data));
        CHECK(std::abs(r.spacing.x - v.spacing.x) < 1e-6);
        CHECK(std::abs(r.spacing.y - v.spacing.y) < 1e-6);
        CHECK(std::abs(r.spacing.z - v.spacing.z) < 1e-6);
        CHECK(r.id == "case_a");
        CHECK(r.patient_id == "patient_a");
    }
    auto mask = (data > 0).to(torch::kUInt8);
    write_mask(mask, v.spacing, dir / "m.nii");
    CHECK(torch::equal(read_mask(dir / "m.nii"), mask));
    CHECK(label_path_for("x/case.nii") == fs::path("x/case_label.nii"));
}

TEST_CASE("malformed volume files raise parse errors with offsets") {
    auto dir = scratch_dir("bad");
    auto v = make_volume(torch::zeros({4, 4, 4}), {1, 1, 1}, "c");
    write_volume(v, dir / "ok.nii");
    const auto size = fs::file_size(dir / "ok.nii");

    fs::copy_file(dir / "ok.nii", dir / "trunc.nii");
    fs::resize_file(dir / "trunc.nii", size - 10);
    try {
        (void)read_volume(dir / "trunc.nii");
        FAIL("truncated file was accepted");
    } catch (const ParseError& e) {
        CHECK(e.byte_offset() == size - 10);
    }

    fs::copy_file(dir / "ok.nii", dir / "short.nii");
    fs::resize_file(dir / "short.nii", 100);
    CHECK_THROWS_AS(read_volume(dir / "short.nii"), ParseError);

    {
        std::fstream f(dir / "ok.nii", std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(344);
        f.write("xx", 2);
    }
    try {
        (void)read_volume(dir / "ok.nii");
        FAIL("bad magic was accepted");
    } catch (const ParseError& e) {
        CHECK(e.byte_offset() == 344);
    }

    write_volume(v, dir / "r.raw");
    { std::ofstream(dir / "r.json") << "{\"dims\": [4, 4, "; }
    CHECK_THROWS_AS(read_volume(dir / "r.raw"), ParseError);
}

TEST_CASE("manifest CSV round-trip") {
    auto dir = scratch_dir("manifest");
    auto m = split_by_patient(synthetic_manifest(12, 2, 1), SplitConfig{});
    write_manifest_csv(m, dir / "manifest.csv");
    auto r = read_manifest_csv(dir / "manifest.csv");
    REQUIRE(r.entries.size() == m.entries.size());
    for (size_t i = 0; i < m.entries.size(); ++i) {
        CHECK(r.entries[i].case_id == m.entries[i].case_id);
        CHECK(r.entries[i].split == m.entries[i].split);
        CHECK(r.entries[i].path == (dir / m.entries[i].path).string());
    }
    { std::ofstream(dir / "broken.csv") << "case_id,patient_id,path,split,manufacturer,slice_thickness_mm\na,b,c\n"; }
    try {
        (void)read_manifest_csv(dir / "broken.csv");
        FAIL("broken manifest accepted");
    } catch (const ParseError& e) {
        CHECK(e.byte_offset() == 62);
    }
}
