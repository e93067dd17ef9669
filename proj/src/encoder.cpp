#include "calcseg/encoder.hpp"

#include <ATen/CPUGeneratorImpl.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <random>

#include "calcseg/errors.hpp"

namespace calcseg {

namespace {

struct SizeRow {
    const char* name;
    int64_t embed_dim;
    int64_t depth;
    int64_t heads;
};

constexpr SizeRow kSizeTable[] = {
    {"ViTiac-S", 384, 6, 6},
    {"ViTiac-M", 576, 8, 8},
    {"ViTiac-L", 768, 12, 12},
};

}  // namespace

EncoderConfig encoder_config(std::string_view name, int64_t patch_size) {
    for (const auto& row : kSizeTable) {
        if (name == row.name) {
            EncoderConfig cfg{row.name, row.embed_dim, row.depth, row.heads, 4.0, patch_size};
            validate(cfg);
            return cfg;
        }
    }
    throw ConfigError("unknown encoder size '" + std::string(name) +
                      "' (expected ViTiac-S, ViTiac-M or ViTiac-L)");
}

std::vector<std::string> encoder_names() {
    std::vector<std::string> out;
    for (const auto& row : kSizeTable) out.emplace_back(row.name);
    return out;
}

void validate(const EncoderConfig& cfg) {
    if (cfg.embed_dim <= 0 || cfg.depth <= 0 || cfg.num_heads <= 0) {
        throw ConfigError("encoder dimensions must be positive");
    }
    if (cfg.embed_dim % cfg.num_heads != 0) {
        throw ConfigError("embed_dim " + std::to_string(cfg.embed_dim) + " not divisible by num_heads " +
                          std::to_string(cfg.num_heads));
    }
    if (cfg.patch_size < 1) throw ConfigError("patch_size must be positive");
    if (cfg.mlp_ratio <= 0.0) throw ConfigError("mlp_ratio must be positive");
    if (axis_encoding_width(cfg.embed_dim) == 0) {
        throw ConfigError("embed_dim too small for the 3D positional encoding");
    }
}

int64_t visible_count(int64_t n, double ratio) {
    // The epsilon absorbs representation error: 100 * (1 - 0.9) is 9.999...
    return static_cast<int64_t>(std::floor(static_cast<double>(n) * (1.0 - ratio) + 1e-9));
}

MaskDraw random_mask(int64_t n, const MaskingSpec& spec) {
    if (n < 1) throw ConfigError("random_mask needs at least one token");
    if (!(spec.ratio >= 0.0 && spec.ratio < 1.0)) {
        throw ConfigError("mask ratio must lie in [0, 1)");
    }
    const int64_t keep = visible_count(n, spec.ratio);
    if (keep < 1) {
        throw ConfigError("mask ratio " + std::to_string(spec.ratio) + " leaves no visible token out of " +
                          std::to_string(n));
    }
    std::vector<int64_t> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(spec.seed);
    // Partial Fisher-Yates: the first `keep` slots are a uniform sample without replacement.
    for (int64_t i = 0; i < keep; ++i) {
        std::uniform_int_distribution<int64_t> pick(i, n - 1);
        std::swap(order[static_cast<size_t>(i)], order[static_cast<size_t>(pick(rng))]);
    }
    MaskDraw out;
    out.visible.assign(order.begin(), order.begin() + keep);
    std::sort(out.visible.begin(), out.visible.end());
    out.mask.assign(static_cast<size_t>(n), 1);
    for (int64_t v : out.visible) out.mask[static_cast<size_t>(v)] = 0;
    return out;
}

AttentionImpl::AttentionImpl(int64_t dim, int64_t heads) : heads_(heads) {
    qkv_ = register_module("qkv", torch::nn::Linear(dim, 3 * dim));
    proj_ = register_module("proj", torch::nn::Linear(dim, dim));
}

torch::Tensor AttentionImpl::forward(const torch::Tensor& x) {
    const int64_t B = x.size(0), N = x.size(1), D = x.size(2);
    auto qkv = qkv_(x).reshape({B, N, 3, heads_, D / heads_}).permute({2, 0, 3, 1, 4});
    auto out = at::scaled_dot_product_attention(qkv[0], qkv[1], qkv[2]);
    return proj_(out.transpose(1, 2).reshape({B, N, D}));
}

TransformerBlockImpl::TransformerBlockImpl(int64_t dim, int64_t heads, int64_t mlp_hidden) {
    norm1_ = register_module("norm1", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim}).eps(1e-6)));
    attn_ = register_module("attn", Attention(dim, heads));
    norm2_ = register_module("norm2", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim}).eps(1e-6)));
    fc1_ = register_module("fc1", torch::nn::Linear(dim, mlp_hidden));
    fc2_ = register_module("fc2", torch::nn::Linear(mlp_hidden, dim));
}

torch::Tensor TransformerBlockImpl::forward(const torch::Tensor& x) {
    auto h = x + attn_(norm1_(x));
    return h + fc2_(torch::gelu(fc1_(norm2_(h))));
}

at::Generator make_generator(uint64_t seed) {
    return at::make_generator<at::CPUGeneratorImpl>(seed);
}

void init_transformer_weights(torch::nn::Module& module, at::Generator& gen) {
    torch::NoGradGuard no_grad;
    for (auto& child : module.modules(/*include_self=*/true)) {
        if (auto* linear = child->as<torch::nn::Linear>()) {
            auto& w = linear->weight;
            const double bound = std::sqrt(6.0 / static_cast<double>(w.size(0) + w.size(1)));
            w.uniform_(-bound, bound, gen);
            if (linear->bias.defined()) linear->bias.zero_();
        } else if (auto* norm = child->as<torch::nn::LayerNorm>()) {
            norm->weight.fill_(1.0);
            norm->bias.zero_();
        }
    }
}

EncoderImpl::EncoderImpl(EncoderConfig cfg) : cfg_(std::move(cfg)) {
    validate(cfg_);
    const int64_t p3 = cfg_.patch_size * cfg_.patch_size * cfg_.patch_size;
    patch_embed_ = register_module("patch_embed", torch::nn::Linear(p3, cfg_.embed_dim));
    blocks_ = register_module("blocks", torch::nn::ModuleList());
    for (int64_t i = 0; i < cfg_.depth; ++i) {
        blocks_->push_back(TransformerBlock(cfg_.embed_dim, cfg_.num_heads, cfg_.mlp_hidden()));
    }
    norm_ = register_module("norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({cfg_.embed_dim}).eps(1e-6)));
}

torch::Tensor EncoderImpl::embed(const torch::Tensor& patches, const GridDims& grid) {
    const int64_t p3 = cfg_.patch_size * cfg_.patch_size * cfg_.patch_size;
    if (patches.dim() != 3 || patches.size(2) != p3) {
        throw ShapeError("encoder expects [B, N, " + std::to_string(p3) + "] patches");
    }
    if (patches.size(1) != grid.numel()) {
        throw ShapeError("patch count " + std::to_string(patches.size(1)) + " does not match grid " +
                         to_string(grid));
    }
    auto pos = sincos_positional_encoding_3d(grid, cfg_.embed_dim).encodings.to(patches.dtype());
    return patch_embed_(patches) + pos.unsqueeze(0);
}

LatentSequence EncoderImpl::encode(const torch::Tensor& embedded, const std::set<int64_t>& keep_hidden) {
    if (embedded.dim() != 3 || embedded.size(2) != cfg_.embed_dim) {
        throw ShapeError("encoder input must be [B, N, " + std::to_string(cfg_.embed_dim) + "]");
    }
    for (int64_t b : keep_hidden) {
        if (b < 1 || b > cfg_.depth) {
            throw ConfigError("hidden-state tap " + std::to_string(b) + " outside encoder depth " +
                              std::to_string(cfg_.depth));
        }
    }
    LatentSequence out;
    torch::Tensor x = embedded;
    int64_t index = 0;
    for (const auto& block : *blocks_) {
        x = block->as<TransformerBlock>()->forward(x);
        ++index;
        if (keep_hidden.count(index)) out.hidden.emplace(index, x);
    }
    out.states = norm_(x);
    return out;
}

LatentSequence EncoderImpl::forward(const torch::Tensor& patches, const GridDims& grid,
                                    const std::optional<torch::Tensor>& visible_indices,
                                    const std::set<int64_t>& keep_hidden) {
    auto x = embed(patches, grid);
    torch::Tensor idx;
    if (visible_indices) {
        idx = *visible_indices;
        x = gather_tokens(x, idx);
    } else {
        idx = torch::arange(x.size(1)).unsqueeze(0).expand({x.size(0), x.size(1)});
    }
    auto out = encode(x, keep_hidden);
    out.visible_indices = idx;
    return out;
}

Encoder build_encoder(const EncoderConfig& cfg, uint64_t init_seed) {
    Encoder enc(cfg);
    auto gen = make_generator(init_seed);
    init_transformer_weights(*enc, gen);
    return enc;
}

int64_t parameter_count(const torch::nn::Module& module) {
    int64_t n = 0;
    for (const auto& p : module.parameters()) n += p.numel();
    return n;
}

uint64_t parameter_checksum(const torch::nn::Module& module) {
    uint64_t h = 1469598103934665603ull;  // FNV-1a
    auto feed = [&h](const void* data, size_t len) {
        const auto* bytes = static_cast<const unsigned char*>(data);
        for (size_t i = 0; i < len; ++i) {
            h ^= bytes[i];
            h *= 1099511628211ull;
        }
    };
    for (const auto& item : module.named_parameters()) {
        feed(item.key().data(), item.key().size());
        auto t = item.value().detach().to(torch::kCPU).contiguous();
        feed(t.data_ptr(), static_cast<size_t>(t.numel()) * t.element_size());
    }
    return h;
}

torch::Tensor gather_tokens(const torch::Tensor& x, const torch::Tensor& idx) {
    return torch::gather(x, 1, idx.unsqueeze(-1).expand({idx.size(0), idx.size(1), x.size(2)}));
}

}  // namespace calcseg
