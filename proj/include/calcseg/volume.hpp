#pragma once

// Volume and token representations shared by every module.
//
// Layout conventions:
//   * Volume data is a contiguous float32 tensor of shape [z, y, x].
//   * Dimensions and spacings are quoted (x, y, z).
//   * Tokens follow a z-major raster order: token (i, j, k) on the patch grid
//     has index (k * gy + j) * gx + i, and voxels inside a patch are flattened
//     the same way.

#include <array>
#include <cstdint>
#include <string>

#include <torch/torch.h>

namespace calcseg {

inline constexpr float kHuFloor = -1024.0f;
inline constexpr float kHuCeil = 2048.0f;

struct Dims {
    int64_t x = 1;
    int64_t y = 1;
    int64_t z = 1;

    int64_t numel() const { return x * y * z; }
    bool operator==(const Dims&) const = default;
};

struct Spacing {
    double x = 1.0;
    double y = 1.0;
    double z = 1.0;

    double voxel_volume() const { return x * y * z; }
    bool operator==(const Spacing&) const = default;
};

using GridDims = Dims;

std::string to_string(const Dims& d);

struct Volume {
    torch::Tensor data;  // float32 [z, y, x]
    Spacing spacing;
    std::string id;
    std::string patient_id;

    Dims dims() const;
};

/// Builds a validated volume. Throws ShapeError / ConfigError on a violated invariant.
Volume make_volume(torch::Tensor data, Spacing spacing, std::string id = {}, std::string patient_id = {});

/// Checks every Volume invariant (rank 3, finite data, positive finite spacing).
void validate(const Volume& v);

struct PatchConfig {
    int64_t patch_size = 16;
};

enum class PadPolicy { Disabled, HuFloor };

/// Voxels added before/after each axis (x, y, z) by the padding policy.
struct Padding {
    std::array<int64_t, 3> before{0, 0, 0};
    std::array<int64_t, 3> after{0, 0, 0};

    bool empty() const;
    bool operator==(const Padding&) const = default;
};

struct TokenSequence {
    torch::Tensor tokens;  // [N, D]
    GridDims grid;
    int64_t patch_size = 0;
    Padding padding;

    int64_t size() const { return tokens.size(0); }
};

struct PositionTable {
    torch::Tensor encodings;  // [N, D], float32
    GridDims grid;
};

TokenSequence patchify(const Volume& volume, const PatchConfig& cfg, PadPolicy policy = PadPolicy::Disabled);

/// Reassembles a [z, y, x] array from raw-voxel tokens. Padding recorded in the
/// sequence is NOT removed; use crop_padding for that.
torch::Tensor unpatchify(const TokenSequence& seq);

/// Batched forms used by the models: [B, Z, Y, X] <-> [B, N, p^3].
torch::Tensor patchify_batch(const torch::Tensor& volumes, int64_t patch_size);
torch::Tensor unpatchify_batch(const torch::Tensor& tokens, const GridDims& grid, int64_t patch_size);

GridDims grid_for(const Dims& dims, int64_t patch_size);

/// Symmetric padding of the trailing three axes up to the next multiple of p.
std::pair<torch::Tensor, Padding> pad_to_multiple(const torch::Tensor& data, int64_t patch_size,
                                                  float value = kHuFloor);
torch::Tensor crop_padding(const torch::Tensor& data, const Padding& padding);

/// Clips to [kHuFloor, kHuCeil] and maps linearly onto [-1, 1].
torch::Tensor standardize_hu(const torch::Tensor& hu);

/// Width of each per-axis block in the 3D table: the largest even number <= D/3.
int64_t axis_encoding_width(int64_t embed_dim);

/// Fixed 3D sin-cos table: [x | y | z] blocks, each interleaving sin/cos over
/// geometric frequencies; leftover channels (D not a multiple of 6) are zero.
PositionTable sincos_positional_encoding_3d(const GridDims& grid, int64_t embed_dim);

}  // namespace calcseg
