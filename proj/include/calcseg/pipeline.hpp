#pragma once

// The end-to-end workflow behind the command-line tool: phantom generation,
// pre-training, fine-tuning, calibration, evaluation, ablation grids and
// feature dumps. Every step writes into one run directory and never touches
// its inputs.

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "calcseg/config.hpp"
#include "calcseg/eval.hpp"
#include "calcseg/training.hpp"

namespace calcseg {

namespace fs = std::filesystem;

/// Writes config/<command>.yaml (resolved tree), config/<command>.provenance.json
/// and config/<command>.run.json (seed, inputs, git describe).
void record_run(const RunConfig& cfg, const std::string& command, const nlohmann::json& inputs,
                const fs::path& out_dir);

struct PhantomGenResult {
    fs::path manifest;
    DatasetManifest entries;
};

/// Volumes and labels under data/, manifest.csv with split tags.
PhantomGenResult cmd_phantom_gen(const RunConfig& cfg, const fs::path& out_dir);

/// Pre-trains on the pre-training pool; writes checkpoints/pretrain.ckpt and pretrain_loss.jsonl.
fs::path cmd_pretrain(const RunConfig& cfg, const fs::path& manifest, const fs::path& out_dir);

/// Fine-tunes on the finetune split, selecting on dev; writes checkpoints/finetune.ckpt
/// and finetune_metrics.jsonl. No pre-trained checkpoint = from scratch.
fs::path cmd_finetune(const RunConfig& cfg, const fs::path& manifest, const std::optional<fs::path>& pretrained,
                      const fs::path& out_dir);

/// Calibrates on the dev split; writes calibration.json.
fs::path cmd_calibrate(const RunConfig& cfg, const fs::path& checkpoint, const fs::path& manifest,
                       const fs::path& out_dir);

/// Evaluates on the test split; writes eval_report.json, eval_cases.csv and bland_altman.svg.
EvalReport cmd_evaluate(const RunConfig& cfg, const fs::path& checkpoint, const fs::path& manifest,
                        const std::optional<fs::path>& calibration, const fs::path& out_dir);

struct AblationRow {
    std::string decoder;
    std::string upsample_mode;
    std::string encoder;
    int64_t patch_size = 0;
    std::string init;
    EvalReport report;
};

/// Every (encoder x patch size x decoder x upsample mode) cell: fine-tune,
/// then evaluate uncalibrated on test. Writes ablation.csv and per-cell runs.
std::vector<AblationRow> cmd_ablate(const RunConfig& cfg, const fs::path& manifest, const fs::path& out_dir);

void write_ablation_csv(const std::vector<AblationRow>& rows, const fs::path& path);

/// Feature-map PNGs of one case under features/<case id>/.
std::vector<FeatureDump> cmd_dump_features(const RunConfig& cfg, const fs::path& checkpoint, const fs::path& manifest,
                                           const std::string& case_id, const std::vector<std::string>& stages,
                                           const fs::path& out_dir);

/// Volume plus its label file for every entry.
std::vector<LabeledCase> load_labeled_cases(const std::vector<ManifestEntry>& entries);

}  // namespace calcseg
