#pragma once

// Masked-autoencoder pre-training: lightweight transformer decoder,
// per-patch normalised targets and the masked-only reconstruction loss.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "calcseg/checkpoint.hpp"
#include "calcseg/encoder.hpp"
#include "calcseg/optim.hpp"
#include "calcseg/volume.hpp"

namespace calcseg {

struct MaeDecoderConfig {
    int64_t embed_dim = 192;
    int64_t depth = 2;
    int64_t num_heads = 4;
    double mlp_ratio = 4.0;
};

/// Width D/2 rounded to a multiple of the head count, depth 2, 4 heads.
MaeDecoderConfig default_mae_decoder(const EncoderConfig& enc);

/// Throws ConfigError unless the decoder is strictly shallower and narrower
/// than its encoder.
void validate(const MaeDecoderConfig& dec, const EncoderConfig& enc);

nlohmann::json to_json(const EncoderConfig& cfg);
EncoderConfig encoder_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const MaeDecoderConfig& cfg);

/// Transformer decoder mapping encoder tokens to p^3 values per token. Used
/// for reconstruction during pre-training and, freshly initialised, as the
/// convolution-free segmentation decoder.
class MaeDecoderImpl : public torch::nn::Module {
public:
    MaeDecoderImpl(const MaeDecoderConfig& cfg, int64_t encoder_dim, int64_t patch_size);

    /// All N tokens present: [B, N, D_enc] -> [B, N, p^3].
    torch::Tensor forward(const torch::Tensor& latent, const GridDims& grid);

    /// Visible tokens only; the single learned mask token fills the rest.
    torch::Tensor forward_masked(const torch::Tensor& latent_visible, const torch::Tensor& visible_indices,
                                 const GridDims& grid);

    const MaeDecoderConfig& config() const { return cfg_; }
    const torch::Tensor& mask_token() const { return mask_token_; }
    torch::nn::Linear& head() { return head_; }

private:
    torch::Tensor run(torch::Tensor x, const GridDims& grid);

    MaeDecoderConfig cfg_;
    torch::nn::Linear embed_{nullptr};
    torch::Tensor mask_token_;
    torch::nn::ModuleList blocks_;
    torch::nn::LayerNorm norm_{nullptr};
    torch::nn::Linear head_{nullptr};
};
TORCH_MODULE(MaeDecoder);

MaeDecoder build_mae_decoder(const MaeDecoderConfig& cfg, const EncoderConfig& enc, uint64_t init_seed);

class MaskedAutoencoderImpl : public torch::nn::Module {
public:
    MaskedAutoencoderImpl(Encoder encoder, MaeDecoder decoder);

    /// patches: standardized [B, N, p^3]; visible: [B, N_vis] -> predictions [B, N, p^3].
    torch::Tensor forward(const torch::Tensor& patches, const GridDims& grid, const torch::Tensor& visible);

    Encoder encoder{nullptr};
    MaeDecoder decoder{nullptr};
};
TORCH_MODULE(MaskedAutoencoder);

/// Per patch (x - mean) / sqrt(var + eps) with the population variance.
torch::Tensor normalize_patch_targets(const torch::Tensor& raw_patches, double eps = 1e-6);

/// Mean squared error over masked tokens only. pred/target: [..., N, p^3];
/// mask: [..., N] with 1 = masked. Throws ConfigError when nothing is masked.
torch::Tensor mae_loss(const torch::Tensor& pred, const torch::Tensor& target, const torch::Tensor& mask);

struct PretrainRunConfig {
    double mask_ratio = 0.9;
    int64_t epochs = 100;
    int64_t batch_size = 4;
    double base_lr = 1.5e-4;
    bool scale_lr_by_batch = true;  // lr = base_lr * batch / 256
    double warmup_fraction = 0.05;
    double weight_decay = 0.05;
    uint64_t seed = 0;
    bool pixel_norm = true;
    double norm_eps = 1e-6;

    double effective_lr() const;
};

/// Full-scale preset (800 epochs); desk runs use the struct defaults.
PretrainRunConfig full_scale_pretrain();

nlohmann::json to_json(const PretrainRunConfig& cfg);

/// Linear warmup then cosine decay to zero, evaluated at 0-based `step`.
double warmup_cosine_lr(double peak, int64_t step, int64_t total_steps, double warmup_fraction);

struct LossRecord {
    int64_t epoch = 0;
    int64_t step = 0;
    double loss = 0.0;
    double lr = 0.0;
    double wall_time = 0.0;
};

nlohmann::json to_json(const LossRecord& r);

struct PretrainOptions {
    std::optional<Checkpoint> resume;             // continue a previous run
    std::optional<int64_t> stop_after_epoch;      // simulate an interruption
    std::function<void(const LossRecord&)> on_step;  // loss-curve sink
};

struct PretrainResult {
    MaskedAutoencoder model{nullptr};
    std::vector<double> epoch_losses;  // mean step loss per epoch, from the first epoch run here
    Checkpoint checkpoint;
};

/// Pre-trains encoder + decoder on unlabeled volumes (HU). All volumes must
/// share dims after padding to the patch size.
PretrainResult pretrain(const std::vector<Volume>& dataset, const EncoderConfig& enc,
                        const MaeDecoderConfig& dec, const PretrainRunConfig& run,
                        const PretrainOptions& options = {});

/// Standardizes, pads and stacks volumes into [M, Z, Y, X].
torch::Tensor stack_standardized(const std::vector<Volume>& volumes, int64_t patch_size);

/// Pearson correlation between predictions and normalised targets over the
/// masked tokens of a fixed-seed draw; the reconstruction sanity check.
double masked_reconstruction_correlation(MaskedAutoencoder& model, const std::vector<Volume>& volumes,
                                         double mask_ratio, uint64_t seed);

Checkpoint make_pretrain_checkpoint(MaskedAutoencoder& model, const PretrainRunConfig& run,
                                    const GroupedAdamW* optimizer, int64_t epochs_done);

/// Rebuilds a pre-trained model from its checkpoint.
MaskedAutoencoder load_pretrained(const Checkpoint& ckpt);

}  // namespace calcseg
