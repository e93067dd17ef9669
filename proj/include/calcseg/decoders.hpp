#pragma once

// Segmentation decoders placed on top of the ViT encoder: UNETR, simple
// feature pyramid + U-Net, plain upscaling, and the transformer (MAE) decoder.
// Convolutional decoders double the resolution log2(p) times with one of two
// upscale primitives: transposed convolution (kernel 2, stride 2) or
// nearest-neighbour interpolation followed by a 3^3 convolution.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "calcseg/encoder.hpp"
#include "calcseg/mae.hpp"
#include "calcseg/volume.hpp"

namespace calcseg {

enum class DecoderKind { Unetr, SfpnUnet, Upscale, MaeDec };
enum class UpsampleMode { Transposed, NnInterpConv };

std::string to_string(DecoderKind kind);
std::string to_string(UpsampleMode mode);
DecoderKind parse_decoder_kind(std::string_view name);
UpsampleMode parse_upsample_mode(std::string_view name);
std::vector<DecoderKind> all_decoder_kinds();

struct DecoderSpec {
    DecoderKind kind = DecoderKind::MaeDec;
    UpsampleMode upsample = UpsampleMode::NnInterpConv;  // ignored by MaeDec
    std::vector<int64_t> channels;                       // per level 0..S; empty = default schedule
    std::vector<int64_t> taps;                           // UNETR only; empty = default taps
    std::optional<MaeDecoderConfig> mae;                 // MaeDec only; empty = default_mae_decoder
};

nlohmann::json to_json(const DecoderSpec& spec);
DecoderSpec decoder_spec_from_json(const nlohmann::json& j);

/// log2(p); throws ConfigError naming patch_size unless p is a power of two >= 2.
int64_t doubling_stages(int64_t patch_size);

/// min(D, 256) at the token grid, halved per doubling, floor 16: S + 1 entries.
std::vector<int64_t> default_channel_schedule(int64_t embed_dim, int64_t stages);

/// Blocks at 1/4, 1/2 and 3/4 of the depth (1-based, deduplicated, final block excluded).
std::vector<int64_t> default_unetr_taps(int64_t depth);

/// Instance normalisation over the spatial axes of [B, C, Z, Y, X]. Defined
/// for single-voxel maps as well (output = bias).
torch::Tensor instance_norm(const torch::Tensor& x, const torch::Tensor& weight, const torch::Tensor& bias,
                            double eps = 1e-5);

/// [B, N, D] tokens -> [B, D, gz, gy, gx] feature map.
torch::Tensor tokens_to_grid(const torch::Tensor& tokens, const GridDims& grid);

/// Doubles every spatial axis. Transposed: ConvTranspose3d(k=2, s=2).
/// NnInterpConv: nearest x2 then Conv3d(k=3, s=1) with replicate padding, so
/// constant inputs stay constant.
class UpscaleBlockImpl : public torch::nn::Module {
public:
    UpscaleBlockImpl(int64_t in_channels, int64_t out_channels, UpsampleMode mode);
    torch::Tensor forward(const torch::Tensor& x);

    UpsampleMode mode() const { return mode_; }
    torch::nn::ConvTranspose3d& transposed() { return transposed_; }
    torch::nn::Conv3d& conv() { return conv_; }

private:
    UpsampleMode mode_;
    torch::nn::ConvTranspose3d transposed_{nullptr};
    torch::nn::Conv3d conv_{nullptr};
};
TORCH_MODULE(UpscaleBlock);

/// Conv (1^3 or 3^3, replicate padding) + instance norm + leaky ReLU.
class ConvNormActImpl : public torch::nn::Module {
public:
    ConvNormActImpl(int64_t in_channels, int64_t out_channels, int64_t kernel);
    torch::Tensor forward(const torch::Tensor& x);

private:
    torch::nn::Conv3d conv_{nullptr};
    torch::Tensor gamma_;
    torch::Tensor beta_;
};
TORCH_MODULE(ConvNormAct);

/// UpscaleBlock + instance norm + leaky ReLU.
class UpStageImpl : public torch::nn::Module {
public:
    UpStageImpl(int64_t in_channels, int64_t out_channels, UpsampleMode mode);
    torch::Tensor forward(const torch::Tensor& x);

private:
    UpscaleBlock up_{nullptr};
    torch::Tensor gamma_;
    torch::Tensor beta_;
};
TORCH_MODULE(UpStage);

/// What a decoder may consume. Which fields are read depends on the family.
struct DecoderInputs {
    torch::Tensor volume;                    // standardized [B, 1, Z, Y, X] (UNETR)
    torch::Tensor final_tokens;              // [B, N, D]
    torch::Tensor final_grid;                // [B, D, gz, gy, gx]
    std::map<int64_t, torch::Tensor> taps;   // block -> [B, D, gz, gy, gx] (UNETR)
    GridDims grid;
};

/// Receives intermediate decoder feature maps: (stage name, scale factor, map).
using FeatureSink = std::function<void(const std::string&, int64_t, const torch::Tensor&)>;

class SegDecoderImpl : public torch::nn::Module {
public:
    /// Returns foreground logits [B, 1, Z, Y, X].
    virtual torch::Tensor forward(const DecoderInputs& in, const FeatureSink& sink = {}) = 0;

    /// Sets the output layer's weights and bias to zero.
    virtual void zero_output_layer() = 0;

    /// Intermediate stages reported to a FeatureSink, shallowest first.
    virtual std::vector<std::string> stage_names() const = 0;

    virtual std::set<int64_t> required_taps() const { return {}; }
    virtual bool needs_volume() const { return false; }
};

std::shared_ptr<SegDecoderImpl> build_decoder(const DecoderSpec& spec, const EncoderConfig& enc, uint64_t init_seed);

/// Encoder + segmentation decoder.
class SegmentationModelImpl : public torch::nn::Module {
public:
    SegmentationModelImpl(Encoder encoder, std::shared_ptr<SegDecoderImpl> decoder, DecoderSpec spec);

    /// Standardized, patch-conforming [B, Z, Y, X] -> logits [B, Z, Y, X].
    torch::Tensor forward(const torch::Tensor& volumes, const FeatureSink& sink = {});

    /// Encoder pass only, packaged for the decoder.
    DecoderInputs decoder_inputs(const torch::Tensor& volumes);

    Encoder encoder{nullptr};
    std::shared_ptr<SegDecoderImpl> decoder;
    const DecoderSpec& spec() const { return spec_; }

private:
    DecoderSpec spec_;
};
TORCH_MODULE(SegmentationModel);

SegmentationModel build_segmentation_model(const EncoderConfig& enc, const DecoderSpec& spec, uint64_t init_seed);

/// True when no submodule is a (transposed) convolution and no parameter is a 5D kernel.
bool is_convolution_free(const torch::nn::Module& module);

struct FeatureDump {
    std::string stage;
    int64_t scale = 1;
    std::filesystem::path file;
    int64_t width = 0;
    int64_t height = 0;
    double variance = 0.0;  // of the un-quantised central slice
};

/// Writes the central-slice (channel mean) of every selected stage plus the
/// probability mask as 16-bit grayscale PNGs named {stage}_x{scale}.png and an
/// index.json. `stages` empty = all. Unknown stage -> ConfigError listing the valid ones.
std::vector<FeatureDump> dump_decoder_features(SegDecoderImpl& decoder, const DecoderInputs& inputs,
                                               const std::vector<std::string>& stages,
                                               const std::filesystem::path& out_dir);

/// Encoder + decoder dump for one HU volume.
std::vector<FeatureDump> dump_feature_maps(SegmentationModel& model, const Volume& volume,
                                           const std::vector<std::string>& stages,
                                           const std::filesystem::path& out_dir);

}  // namespace calcseg
