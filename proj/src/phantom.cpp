#include <cmath>
#include <random>

#include "calcseg/data.hpp"
#include "calcseg/encoder.hpp"
#include "calcseg/errors.hpp"
#include "calcseg/rng.hpp"

namespace calcseg {

namespace {

constexpr double kTwoPi = 6.283185307179586;

double uniform(std::mt19937_64& rng, const Range& r) {
    if (r.hi <= r.lo) return r.lo;
    return std::uniform_real_distribution<double>(r.lo, r.hi)(rng);
}

void require(bool ok, const std::string& what) {
    if (!ok) throw ConfigError("phantom config: " + what);
}

struct Lesion {
    double cx, cy, cz;  // voxel units on the fine grid
    double rx, ry, rz;
    double hu;
};

}  // namespace

void validate(const PhantomConfig& c) {
    require(c.dims.x >= 8 && c.dims.y >= 8 && c.dims.z >= 4, "dims must be at least 8 x 8 x 4");
    require(c.inplane_spacing_mm.lo > 0 && c.inplane_spacing_mm.hi >= c.inplane_spacing_mm.lo,
            "in-plane spacing range must be positive and ordered");
    require(c.slice_thickness_mm.lo > 0 && c.slice_thickness_mm.hi >= c.slice_thickness_mm.lo,
            "slice thickness range must be positive and ordered");
    require(c.base_slice_mm > 0, "base_slice_mm must be positive");
    require(c.lesions_min >= 0 && c.lesions_max >= c.lesions_min, "lesion count range invalid");
    require(c.lesion_radius_mm.lo > 0 && c.lesion_radius_mm.hi >= c.lesion_radius_mm.lo,
            "lesion radius range invalid");
    require(c.lesion_hu.lo >= 130.0 && c.lesion_hu.hi >= c.lesion_hu.lo,
            "lesion intensities must be >= 130 HU so lesions are annotation-positive");
    require(c.tissue_hu - 2 * c.tissue_amplitude_hu >= -1024.0 && c.tissue_hu + 2 * c.tissue_amplitude_hu < 130.0,
            "soft-tissue band must stay below the 130 HU annotation threshold");
    require(c.vessel_hu < 130.0, "vessel intensity must stay below 130 HU");
    require(c.bone_thickness >= 0 && c.bone_thickness < c.dims.x / 4, "bone plate too thick");
    require(c.noise_sd_hu >= 0, "noise_sd_hu must be non-negative");
    require(c.max_placement_attempts >= 1, "max_placement_attempts must be >= 1");
}

nlohmann::json to_json(const PhantomConfig& c) {
    auto range = [](const Range& r) { return nlohmann::json::array({r.lo, r.hi}); };
    return {{"dims", {c.dims.x, c.dims.y, c.dims.z}},
            {"inplane_spacing_mm", range(c.inplane_spacing_mm)},
            {"slice_thickness_mm", range(c.slice_thickness_mm)},
            {"base_slice_mm", c.base_slice_mm},
            {"lesion_count", {c.lesions_min, c.lesions_max}},
            {"lesion_radius_mm", range(c.lesion_radius_mm)},
            {"lesion_hu", range(c.lesion_hu)},
            {"tissue_hu", c.tissue_hu},
            {"tissue_amplitude_hu", c.tissue_amplitude_hu},
            {"vessel_hu", c.vessel_hu},
            {"vessel_radius_mm", c.vessel_radius_mm},
            {"bone_hu", c.bone_hu},
            {"bone_thickness", c.bone_thickness},
            {"noise_sd_hu", c.noise_sd_hu},
            {"seed", c.seed},
            {"max_placement_attempts", c.max_placement_attempts}};
}

PhantomConfig phantom_config_from_json(const nlohmann::json& j) {
    PhantomConfig c;
    auto range = [&](const char* key, Range& r) {
        if (j.contains(key)) r = {j.at(key).at(0).get<double>(), j.at(key).at(1).get<double>()};
    };
    if (j.contains("dims")) {
        const auto& d = j.at("dims");
        c.dims = {d.at(0).get<int64_t>(), d.at(1).get<int64_t>(), d.at(2).get<int64_t>()};
    }
    range("inplane_spacing_mm", c.inplane_spacing_mm);
    range("slice_thickness_mm", c.slice_thickness_mm);
    range("lesion_radius_mm", c.lesion_radius_mm);
    range("lesion_hu", c.lesion_hu);
    if (j.contains("lesion_count")) {
        c.lesions_min = j.at("lesion_count").at(0).get<int64_t>();
        c.lesions_max = j.at("lesion_count").at(1).get<int64_t>();
    }
    c.base_slice_mm = j.value("base_slice_mm", c.base_slice_mm);
    c.tissue_hu = j.value("tissue_hu", c.tissue_hu);
    c.tissue_amplitude_hu = j.value("tissue_amplitude_hu", c.tissue_amplitude_hu);
    c.vessel_hu = j.value("vessel_hu", c.vessel_hu);
    c.vessel_radius_mm = j.value("vessel_radius_mm", c.vessel_radius_mm);
    c.bone_hu = j.value("bone_hu", c.bone_hu);
    c.bone_thickness = j.value("bone_thickness", c.bone_thickness);
    c.noise_sd_hu = j.value("noise_sd_hu", c.noise_sd_hu);
    c.seed = j.value("seed", c.seed);
    c.max_placement_attempts = j.value("max_placement_attempts", c.max_placement_attempts);
    validate(c);
    return c;
}

Phantom generate_phantom(const PhantomConfig& cfg, int64_t index) {
    validate(cfg);
    std::mt19937_64 rng(mix_seed({cfg.seed, static_cast<uint64_t>(index), 0xFA47ull}));

    const double spacing_xy = uniform(rng, cfg.inplane_spacing_mm);
    const double thickness_draw = uniform(rng, cfg.slice_thickness_mm);
    const int64_t k = std::max<int64_t>(1, std::llround(thickness_draw / cfg.base_slice_mm));
    const double thickness = cfg.base_slice_mm * static_cast<double>(k);

    const int64_t X = cfg.dims.x, Y = cfg.dims.y, Z = cfg.dims.z;
    const int64_t Zf = Z * k;
    auto opts = torch::TensorOptions().dtype(torch::kFloat64);
    auto xs = torch::arange(X, opts).view({1, 1, X});
    auto ys = torch::arange(Y, opts).view({1, Y, 1});
    auto zs = torch::arange(Zf, opts).view({Zf, 1, 1});

    // Soft tissue: one smooth cosine per in-plane axis, mildly jittered per case.
    std::uniform_real_distribution<double> jitter(-0.05, 0.05);
    std::uniform_real_distribution<double> gain(0.8, 1.0);
    const double ax = gain(rng), ay = gain(rng), px = jitter(rng), py = jitter(rng);
    auto fine = cfg.tissue_hu +
                cfg.tissue_amplitude_hu * ax * torch::cos(kTwoPi * (xs / static_cast<double>(X) + px)) +
                cfg.tissue_amplitude_hu * ay * torch::cos(kTwoPi * (ys / static_cast<double>(Y) + py));
    fine = fine.expand({Zf, Y, X}).clone();

    // Vessel: a tube meandering along z.
    const double phase = jitter(rng) * kTwoPi;
    const double vessel_r = cfg.vessel_radius_mm / spacing_xy;
    auto centre_x = [&](double z) {
        return 0.55 * X + 0.12 * X * std::sin(kTwoPi * z / static_cast<double>(Zf) + phase);
    };
    auto centre_y = [&](double z) {
        return 0.5 * Y + 0.12 * Y * std::cos(kTwoPi * z / static_cast<double>(Zf) + phase);
    };
    auto u = kTwoPi * zs / static_cast<double>(Zf) + phase;
    auto vx = 0.55 * X + 0.12 * X * torch::sin(u);
    auto vy = 0.5 * Y + 0.12 * Y * torch::cos(u);
    auto vessel = ((xs - vx).pow(2) + (ys - vy).pow(2)) <= vessel_r * vessel_r;
    fine.masked_fill_(vessel, cfg.vessel_hu);

    if (cfg.bone_thickness > 0) {
        fine.masked_fill_((xs < static_cast<double>(cfg.bone_thickness)).expand({Zf, Y, X}), cfg.bone_hu);
    }

    // Lesions: ellipsoids seated on the vessel wall, clear of the bone plate.
    std::uniform_int_distribution<int64_t> count_dist(cfg.lesions_min, cfg.lesions_max);
    const int64_t n_lesions = count_dist(rng);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::uniform_real_distribution<double> axis_gain(0.8, 1.2);
    std::vector<Lesion> lesions;
    for (int64_t l = 0; l < n_lesions; ++l) {
        bool placed = false;
        for (int64_t attempt = 0; attempt < cfg.max_placement_attempts && !placed; ++attempt) {
            const double r_mm = uniform(rng, cfg.lesion_radius_mm);
            Lesion les{};
            les.rx = r_mm * axis_gain(rng) / spacing_xy;
            les.ry = r_mm * axis_gain(rng) / spacing_xy;
            les.rz = r_mm * axis_gain(rng) / cfg.base_slice_mm;
            les.cz = les.rz + unit(rng) * (static_cast<double>(Zf) - 1.0 - 2.0 * les.rz);
            const double theta = unit(rng) * kTwoPi;
            const double offset = vessel_r + 0.3 * std::min(les.rx, les.ry);
            les.cx = centre_x(les.cz) + offset * std::cos(theta);
            les.cy = centre_y(les.cz) + offset * std::sin(theta);
            les.hu = uniform(rng, cfg.lesion_hu);
            placed = les.cz - les.rz >= 0.0 && les.cz + les.rz <= static_cast<double>(Zf) - 1.0 &&
                     les.cx - les.rx >= static_cast<double>(cfg.bone_thickness) + 1.0 &&
                     les.cx + les.rx <= static_cast<double>(X) - 2.0 && les.cy - les.ry >= 1.0 &&
                     les.cy + les.ry <= static_cast<double>(Y) - 2.0;
            if (placed) lesions.push_back(les);
        }
        if (!placed) {
            throw GenerationError("could not place lesion " + std::to_string(l) + " of phantom " +
                                  std::to_string(index) + " after " + std::to_string(cfg.max_placement_attempts) +
                                  " attempts");
        }
    }

    auto support = torch::zeros({Zf, Y, X}, torch::kBool);
    for (const auto& les : lesions) {
        auto inside = ((xs - les.cx) / les.rx).pow(2) + ((ys - les.cy) / les.ry).pow(2) +
                          ((zs - les.cz) / les.rz).pow(2) <=
                      1.0;
        // Overlapping lesions keep the brighter intensity.
        auto value = torch::where(support, torch::clamp_min(fine, les.hu), torch::full_like(fine, les.hu));
        fine = torch::where(inside, value, fine);
        support = support.logical_or(inside);
    }

    // Thick slices are the mean of k fine slices.
    auto clean = fine.view({Z, k, Y, X}).mean(1).to(torch::kFloat32).contiguous();
    auto pooled_support = support.view({Z, k, Y, X}).any(1);

    auto gen = make_generator(mix_seed({cfg.seed, static_cast<uint64_t>(index), 0x9015Eull}));
    auto noisy = clean + static_cast<float>(cfg.noise_sd_hu) * torch::randn({Z, Y, X}, gen);

    Phantom out;
    out.clean = clean;
    out.label = apply_annotation_rule(clean, pooled_support);
    out.lesion_count = n_lesions;
    out.slice_thickness_mm = thickness;
    const std::string id = "phantom_" + std::to_string(index);
    out.volume = make_volume(noisy.contiguous(), {spacing_xy, spacing_xy, thickness}, id);
    return out;
}

}  // namespace calcseg
