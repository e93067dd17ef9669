#include "calcseg/volume.hpp"

#include <cmath>
#include <sstream>

#include "calcseg/errors.hpp"

namespace calcseg {

std::string to_string(const Dims& d) {
    std::ostringstream os;
    os << d.x << "x" << d.y << "x" << d.z;
    return os.str();
}

Dims Volume::dims() const {
    return {data.size(2), data.size(1), data.size(0)};
}

void validate(const Volume& v) {
    if (!v.data.defined() || v.data.dim() != 3) {
        throw ShapeError("volume data must be a 3D [z, y, x] array");
    }
    for (int64_t i = 0; i < 3; ++i) {
        if (v.data.size(i) < 1) throw ShapeError("volume dimensions must be >= 1");
    }
    for (double s : {v.spacing.x, v.spacing.y, v.spacing.z}) {
        if (!std::isfinite(s) || s <= 0.0) {
            throw ConfigError("volume spacing must be strictly positive and finite");
        }
    }
    if (!torch::isfinite(v.data).all().item<bool>()) {
        throw ShapeError("volume '" + v.id + "' contains non-finite intensities");
    }
}

Volume make_volume(torch::Tensor data, Spacing spacing, std::string id, std::string patient_id) {
    Volume v{data.to(torch::kFloat32).contiguous(), spacing, std::move(id), std::move(patient_id)};
    validate(v);
    return v;
}

bool Padding::empty() const {
    for (int i = 0; i < 3; ++i) {
        if (before[i] != 0 || after[i] != 0) return false;
    }
    return true;
}

GridDims grid_for(const Dims& dims, int64_t patch_size) {
    if (patch_size < 1) throw ConfigError("patch_size must be positive");
    const std::array<std::pair<char, int64_t>, 3> axes{{{'x', dims.x}, {'y', dims.y}, {'z', dims.z}}};
    for (auto [name, extent] : axes) {
        if (extent % patch_size != 0) {
            std::ostringstream os;
            os << "axis " << name << " has extent " << extent << ", not a multiple of patch_size "
               << patch_size;
            throw DimensionError(os.str(), name);
        }
    }
    return {dims.x / patch_size, dims.y / patch_size, dims.z / patch_size};
}

torch::Tensor patchify_batch(const torch::Tensor& volumes, int64_t p) {
    if (volumes.dim() != 4) throw ShapeError("patchify_batch expects [B, Z, Y, X]");
    const int64_t B = volumes.size(0);
    const GridDims g = grid_for({volumes.size(3), volumes.size(2), volumes.size(1)}, p);
    return volumes.reshape({B, g.z, p, g.y, p, g.x, p})
        .permute({0, 1, 3, 5, 2, 4, 6})
        .reshape({B, g.numel(), p * p * p});
}

torch::Tensor unpatchify_batch(const torch::Tensor& tokens, const GridDims& g, int64_t p) {
    if (tokens.dim() != 3) throw ShapeError("unpatchify_batch expects [B, N, p^3]");
    if (tokens.size(1) != g.numel()) {
        throw ShapeError("token count " + std::to_string(tokens.size(1)) + " does not match grid " +
                         to_string(g));
    }
    if (tokens.size(2) != p * p * p) {
        throw ShapeError("token length " + std::to_string(tokens.size(2)) + " != p^3 = " +
                         std::to_string(p * p * p));
    }
    const int64_t B = tokens.size(0);
    return tokens.reshape({B, g.z, g.y, g.x, p, p, p})
        .permute({0, 1, 4, 2, 5, 3, 6})
        .reshape({B, g.z * p, g.y * p, g.x * p});
}

std::pair<torch::Tensor, Padding> pad_to_multiple(const torch::Tensor& data, int64_t p, float value) {
    if (p < 1) throw ConfigError("patch_size must be positive");
    const int64_t nd = data.dim();
    Padding pad;
    // torch pad order: last axis first -> (x_before, x_after, y_before, y_after, z_before, z_after)
    std::vector<int64_t> spec;
    for (int axis = 0; axis < 3; ++axis) {
        const int64_t extent = data.size(nd - 1 - axis);
        const int64_t total = (p - extent % p) % p;
        pad.before[axis] = total / 2;
        pad.after[axis] = total - total / 2;
        spec.push_back(pad.before[axis]);
        spec.push_back(pad.after[axis]);
    }
    if (pad.empty()) return {data, pad};
    return {torch::constant_pad_nd(data, spec, value), pad};
}

torch::Tensor crop_padding(const torch::Tensor& data, const Padding& pad) {
    if (pad.empty()) return data;
    using torch::indexing::Slice;
    const int64_t nd = data.dim();
    torch::Tensor out = data;
    for (int axis = 0; axis < 3; ++axis) {
        const int64_t dim = nd - 1 - axis;
        const int64_t extent = out.size(dim);
        out = out.narrow(dim, pad.before[axis], extent - pad.before[axis] - pad.after[axis]);
    }
    return out.contiguous();
}

TokenSequence patchify(const Volume& volume, const PatchConfig& cfg, PadPolicy policy) {
    torch::Tensor data = volume.data;
    Padding pad;
    if (policy == PadPolicy::HuFloor) {
        std::tie(data, pad) = pad_to_multiple(data, cfg.patch_size, kHuFloor);
    }
    const Dims dims{data.size(2), data.size(1), data.size(0)};
    const GridDims grid = grid_for(dims, cfg.patch_size);
    torch::Tensor tokens = patchify_batch(data.unsqueeze(0), cfg.patch_size).squeeze(0).contiguous();
    return {tokens, grid, cfg.patch_size, pad};
}

torch::Tensor unpatchify(const TokenSequence& seq) {
    if (seq.tokens.dim() != 2) throw ShapeError("token sequence must be [N, D]");
    return unpatchify_batch(seq.tokens.unsqueeze(0), seq.grid, seq.patch_size).squeeze(0).contiguous();
}

torch::Tensor standardize_hu(const torch::Tensor& hu) {
    constexpr float half_range = (kHuCeil - kHuFloor) / 2.0f;
    constexpr float centre = (kHuCeil + kHuFloor) / 2.0f;
    return (hu.clamp(kHuFloor, kHuCeil) - centre) / half_range;
}

int64_t axis_encoding_width(int64_t embed_dim) {
    return (embed_dim / 6) * 2;
}

PositionTable sincos_positional_encoding_3d(const GridDims& grid, int64_t embed_dim) {
    const int64_t w = axis_encoding_width(embed_dim);
    if (w == 0) {
        throw ConfigError("embed_dim " + std::to_string(embed_dim) +
                          " is too small for a 3D sin-cos encoding (need >= 6)");
    }
    const int64_t half = w / 2;
    // omega_k = 10000^(-k / half); computed in double, stored as float.
    auto omega = torch::arange(half, torch::kFloat64).div(static_cast<double>(half));
    omega = torch::pow(10000.0, -omega);

    auto axis_table = [&](int64_t extent) {
        auto pos = torch::arange(extent, torch::kFloat64).unsqueeze(1);  // [extent, 1]
        auto angles = pos * omega.unsqueeze(0);                          // [extent, half]
        return torch::stack({torch::sin(angles), torch::cos(angles)}, 2).reshape({extent, w});
    };
    const auto tx = axis_table(grid.x);
    const auto ty = axis_table(grid.y);
    const auto tz = axis_table(grid.z);

    const int64_t n = grid.numel();
    auto table = torch::zeros({n, embed_dim}, torch::kFloat64);
    // z-major raster: index = (k * gy + j) * gx + i
    auto iz = torch::arange(grid.z).repeat_interleave(grid.y * grid.x);
    auto iy = torch::arange(grid.y).repeat_interleave(grid.x).repeat({grid.z});
    auto ix = torch::arange(grid.x).repeat({grid.z * grid.y});
    using torch::indexing::Slice;
    table.index_put_({Slice(), Slice(0, w)}, tx.index_select(0, ix));
    table.index_put_({Slice(), Slice(w, 2 * w)}, ty.index_select(0, iy));
    table.index_put_({Slice(), Slice(2 * w, 3 * w)}, tz.index_select(0, iz));
    return {table.to(torch::kFloat32), grid};
}

}  // namespace calcseg
