#pragma once

// Supervised fine-tuning of encoder + segmentation decoder, and inference.

#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "calcseg/checkpoint.hpp"
#include "calcseg/decoders.hpp"
#include "calcseg/encoder.hpp"
#include "calcseg/volume.hpp"

namespace calcseg {

struct SegLossConfig {
    double dice_weight = 0.5;
    double bce_weight = 0.5;
    double pos_weight_min = 1.0;
    double pos_weight_max = 100.0;
    double dice_smooth = 1.0;
};

struct FinetuneRunConfig {
    EncoderConfig encoder;
    DecoderSpec decoder;
    std::optional<Checkpoint> pretrained;  // empty = random init from `seed`
    SegLossConfig loss;
    int64_t epochs = 300;
    int64_t batch_size = 2;
    double lr = 1e-3;                     // peak decoder LR
    double encoder_lr_multiplier = 0.1;
    double weight_decay = 0.05;
    double warmup_fraction = 0.05;
    int64_t patience = 50;                // epochs without dev improvement; 0 disables
    uint64_t seed = 0;
    bool include_empty_labels = false;
};

nlohmann::json to_json(const SegLossConfig& cfg);

/// Hyperparameters of the run (not the weights it starts from).
nlohmann::json run_settings_json(const FinetuneRunConfig& cfg);

struct LabeledCase {
    Volume volume;
    torch::Tensor label;  // binary [z, y, x]
};

struct FinetuneEpochRecord {
    int64_t epoch = 0;
    double train_loss = 0.0;
    std::optional<double> dev_dice;
    double lr = 0.0;
    double wall_time = 0.0;
};

nlohmann::json to_json(const FinetuneEpochRecord& r);

struct FinetuneOptions {
    std::function<void(const FinetuneEpochRecord&)> on_epoch;
    std::function<void(SegmentationModel&)> on_start;  // after initialisation, before the first step
};

struct FinetuneResult {
    SegmentationModel model{nullptr};  // best-dev weights
    Checkpoint checkpoint;
    std::vector<FinetuneEpochRecord> history;
    int64_t best_epoch = 0;
    std::optional<double> best_dev_dice;
};

/// Background/foreground voxel ratio of the labels clipped to the configured range.
double positive_weight(const torch::Tensor& labels, const SegLossConfig& cfg);

/// dice_weight * soft-Dice loss + bce_weight * weighted BCE. logits and
/// target: [B, Z, Y, X].
torch::Tensor segmentation_loss(const torch::Tensor& logits, const torch::Tensor& target, double pos_weight,
                                const SegLossConfig& cfg);

/// Trains on `train` and keeps the weights of the epoch with the best mean
/// development Dice (the last epoch when `dev` is empty).
FinetuneResult finetune(const std::vector<LabeledCase>& train, const std::vector<LabeledCase>& dev,
                        const FinetuneRunConfig& cfg, const FinetuneOptions& options = {});

/// Voxelwise foreground probability cropped back to the input dims.
torch::Tensor predict(SegmentationModel& model, const Volume& volume);

/// Mean Dice at 0.5 over cases with nonempty labels; no weight updates.
double mean_dice(SegmentationModel& model, const std::vector<LabeledCase>& cases);

Checkpoint make_finetune_checkpoint(SegmentationModel& model, const FinetuneRunConfig& cfg,
                                    const nlohmann::json& meta);

/// Throws FingerprintMismatch unless `ckpt` is a fine-tuned model.
SegmentationModel load_segmentation_model(const Checkpoint& ckpt);

/// Throws FingerprintMismatch naming both fingerprints when the pre-trained
/// checkpoint cannot initialise `enc`.
void check_pretrained_compatible(const EncoderConfig& enc, const Checkpoint& pretrained);

}  // namespace calcseg
