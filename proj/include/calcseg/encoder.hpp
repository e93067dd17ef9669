#pragma once

// 3D ViT encoder (pre-norm blocks, no CLS token) and MAE random masking.

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include <torch/torch.h>

#include "calcseg/volume.hpp"

namespace calcseg {

struct EncoderConfig {
    std::string name = "ViTiac-S";
    int64_t embed_dim = 384;
    int64_t depth = 6;
    int64_t num_heads = 6;
    double mlp_ratio = 4.0;
    int64_t patch_size = 16;

    int64_t mlp_hidden() const { return static_cast<int64_t>(embed_dim * mlp_ratio); }
};

/// The fixed size table: ViTiac-S 384/6/6, ViTiac-M 576/8/8, ViTiac-L 768/12/12.
EncoderConfig encoder_config(std::string_view name, int64_t patch_size);
std::vector<std::string> encoder_names();
void validate(const EncoderConfig& cfg);

struct MaskingSpec {
    double ratio = 0.9;
    uint64_t seed = 0;
};

struct MaskDraw {
    std::vector<int64_t> visible;  // ascending token indices
    std::vector<uint8_t> mask;     // 1 = masked
};

/// floor(n * (1 - ratio)); the MAE rounding convention.
int64_t visible_count(int64_t n, double ratio);

MaskDraw random_mask(int64_t n, const MaskingSpec& spec);

struct LatentSequence {
    torch::Tensor states;                     // [B, N_vis, D], after the final norm
    std::map<int64_t, torch::Tensor> hidden;  // block index (1-based) -> [B, N_vis, D]
    torch::Tensor visible_indices;            // [B, N_vis] int64
};

class AttentionImpl : public torch::nn::Module {
public:
    AttentionImpl(int64_t dim, int64_t heads);
    torch::Tensor forward(const torch::Tensor& x);

private:
    int64_t heads_;
    torch::nn::Linear qkv_{nullptr};
    torch::nn::Linear proj_{nullptr};
};
TORCH_MODULE(Attention);

class TransformerBlockImpl : public torch::nn::Module {
public:
    TransformerBlockImpl(int64_t dim, int64_t heads, int64_t mlp_hidden);
    torch::Tensor forward(const torch::Tensor& x);

private:
    torch::nn::LayerNorm norm1_{nullptr};
    Attention attn_{nullptr};
    torch::nn::LayerNorm norm2_{nullptr};
    torch::nn::Linear fc1_{nullptr};
    torch::nn::Linear fc2_{nullptr};
};
TORCH_MODULE(TransformerBlock);

/// xavier-uniform Linear weights, zero biases, unit LayerNorm. Draws from
/// `gen` only, never from the global torch generator.
void init_transformer_weights(torch::nn::Module& module, at::Generator& gen);

at::Generator make_generator(uint64_t seed);

class EncoderImpl : public torch::nn::Module {
public:
    explicit EncoderImpl(EncoderConfig cfg);

    const EncoderConfig& config() const { return cfg_; }

    /// Linear patch projection plus the fixed 3D sin-cos table: [B, N, p^3] -> [B, N, D].
    torch::Tensor embed(const torch::Tensor& patches, const GridDims& grid);

    /// Runs the transformer on already-embedded tokens.
    LatentSequence encode(const torch::Tensor& embedded, const std::set<int64_t>& keep_hidden = {});

    /// embed -> keep visible tokens (if given) -> encode.
    LatentSequence forward(const torch::Tensor& patches, const GridDims& grid,
                           const std::optional<torch::Tensor>& visible_indices = std::nullopt,
                           const std::set<int64_t>& keep_hidden = {});

private:
    EncoderConfig cfg_;
    torch::nn::Linear patch_embed_{nullptr};
    torch::nn::ModuleList blocks_;
    torch::nn::LayerNorm norm_{nullptr};
};
TORCH_MODULE(Encoder);

/// Seeded construction; identical (cfg, seed) pairs give identical weights.
Encoder build_encoder(const EncoderConfig& cfg, uint64_t init_seed);

int64_t parameter_count(const torch::nn::Module& module);

/// Order-sensitive checksum over named parameters (name, shape and values).
uint64_t parameter_checksum(const torch::nn::Module& module);

/// Gathers rows along dim 1: x[B, N, D], idx[B, K] -> [B, K, D].
torch::Tensor gather_tokens(const torch::Tensor& x, const torch::Tensor& idx);

}  // namespace calcseg
