#pragma once

// Synthetic CT-like phantoms, the calcification annotation rule, patient-level
// dataset splits and volume file I/O.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "calcseg/volume.hpp"

namespace calcseg {

struct Range {
    double lo = 0.0;
    double hi = 0.0;
};

/// Phantoms mimic registered head-CT regions of interest: a soft-tissue field
/// with a stereotyped layout, a vessel running along z, a bone plate at the
/// low-x border and calcified lesions on the vessel wall.
struct PhantomConfig {
    Dims dims{32, 32, 16};
    Range inplane_spacing_mm{0.4, 0.6};
    Range slice_thickness_mm{0.5, 1.5};
    double base_slice_mm = 0.5;  // generation resolution before z pooling
    int64_t lesions_min = 2;
    int64_t lesions_max = 5;
    Range lesion_radius_mm{0.6, 1.4};
    Range lesion_hu{300.0, 1200.0};
    double tissue_hu = 40.0;
    double tissue_amplitude_hu = 20.0;  // per in-plane axis
    double vessel_hu = 65.0;
    double vessel_radius_mm = 0.8;
    double bone_hu = 1000.0;
    int64_t bone_thickness = 2;  // voxels; 0 disables the plate
    double noise_sd_hu = 5.0;
    uint64_t seed = 0;
    int64_t max_placement_attempts = 200;
};

/// Throws ConfigError on an inconsistent configuration.
void validate(const PhantomConfig& cfg);

nlohmann::json to_json(const PhantomConfig& cfg);
PhantomConfig phantom_config_from_json(const nlohmann::json& j);

struct Phantom {
    Volume volume;         // noisy HU
    torch::Tensor clean;   // pre-noise HU [z, y, x]
    torch::Tensor label;   // uint8 [z, y, x]
    int64_t lesion_count = 0;
    double slice_thickness_mm = 0.0;
};

/// Deterministic in (cfg.seed, index). Throws GenerationError when a lesion
/// cannot be placed within the attempt budget.
Phantom generate_phantom(const PhantomConfig& cfg, int64_t index);

struct AnnotationRule {
    float hu_threshold = 130.0f;
    int64_t min_component_size = 2;
    bool per_slice = true;   // 2D 8-connectivity; false = 3D 26-connectivity
    bool override = false;   // must be set to change the constants above
};

/// Throws ConfigError when the constants were changed without `override`.
void validate(const AnnotationRule& rule);

/// (region AND hu >= threshold), then connected components smaller than the
/// minimum size are removed. hu: float [z, y, x]; region: any dtype, nonzero = inside.
torch::Tensor apply_annotation_rule(const torch::Tensor& hu, const torch::Tensor& region,
                                    const AnnotationRule& rule = {});

enum class Split { Unassigned, Pretrain, Finetune, Dev, Test, Excluded };

std::string to_string(Split s);
Split parse_split(std::string_view name);

struct ManifestEntry {
    std::string case_id;
    std::string patient_id;
    std::string path;
    Split split = Split::Unassigned;
    std::string manufacturer;
    double slice_thickness_mm = 0.0;
};

struct DatasetManifest {
    std::vector<ManifestEntry> entries;

    std::vector<ManifestEntry> with_split(Split s) const;
    /// Finetune cases are a subset of the pre-training pool.
    std::vector<ManifestEntry> pretrain_pool() const;
};

void write_manifest_csv(const DatasetManifest& m, const std::filesystem::path& path);
/// Relative paths are resolved against the manifest's directory.
DatasetManifest read_manifest_csv(const std::filesystem::path& path);

struct SplitConfig {
    double train_fraction = 0.8;
    double dev_fraction = 0.1;
    double test_fraction = 0.1;
    double finetune_fraction = 0.1;          // of the training series
    std::optional<int64_t> finetune_count;   // overrides the fraction
    uint64_t seed = 0;
};

/// Patient-disjoint train/dev/test assignment, stratified by manufacturer.
/// Dev and test keep one non-empty series per patient; the rest are Excluded.
/// Training series become Pretrain, a labeled subset of them Finetune.
DatasetManifest split_by_patient(const DatasetManifest& manifest, const SplitConfig& cfg,
                                 const std::set<std::string>& empty_label_cases = {});

/// NIfTI-1 (.nii) or little-endian float32 raw with a JSON sidecar (.raw + .json).
Volume read_volume(const std::filesystem::path& path);
void write_volume(const Volume& volume, const std::filesystem::path& path);

/// Binary masks are stored as uint8 volumes in the same containers.
torch::Tensor read_mask(const std::filesystem::path& path);
void write_mask(const torch::Tensor& mask, const Spacing& spacing, const std::filesystem::path& path);

/// Where the label of a volume file lives: "<stem>_label<ext>" next to it.
std::filesystem::path label_path_for(const std::filesystem::path& volume_path);

}  // namespace calcseg
