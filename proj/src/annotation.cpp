#include <vector>

#include "calcseg/data.hpp"
#include "calcseg/errors.hpp"

namespace calcseg {

void validate(const AnnotationRule& rule) {
    const AnnotationRule defaults;
    const bool changed = rule.hu_threshold != defaults.hu_threshold ||
                         rule.min_component_size != defaults.min_component_size ||
                         rule.per_slice != defaults.per_slice;
    if (changed && !rule.override) {
        throw ConfigError("annotation rule constants (130 HU, components >= 2 pixels per slice) "
                          "can only be changed with the explicit override flag");
    }
    if (rule.min_component_size < 1) throw ConfigError("min_component_size must be >= 1");
}

torch::Tensor apply_annotation_rule(const torch::Tensor& hu, const torch::Tensor& region, const AnnotationRule& rule) {
    validate(rule);
    if (hu.dim() != 3) throw ShapeError("annotation rule expects a [z, y, x] volume");
    if (region.sizes() != hu.sizes()) throw ShapeError("annotation region must match the volume shape");

    auto candidate = (region.to(torch::kCPU) != 0).logical_and(hu.to(torch::kCPU) >= rule.hu_threshold);
    auto mask = candidate.to(torch::kUInt8).contiguous();
    if (rule.min_component_size <= 1) return mask;

    const int64_t Z = mask.size(0), Y = mask.size(1), X = mask.size(2);
    uint8_t* m = mask.data_ptr<uint8_t>();
    std::vector<int32_t> label(static_cast<size_t>(Z * Y * X), -1);
    std::vector<int64_t> stack, component;
    const int64_t dz_max = rule.per_slice ? 0 : 1;

    for (int64_t start = 0; start < Z * Y * X; ++start) {
        if (!m[start] || label[static_cast<size_t>(start)] >= 0) continue;
        component.clear();
        stack.assign(1, start);
        label[static_cast<size_t>(start)] = 1;
        while (!stack.empty()) {
            const int64_t v = stack.back();
            stack.pop_back();
            component.push_back(v);
            const int64_t z = v / (Y * X), y = (v / X) % Y, x = v % X;
            for (int64_t dz = -dz_max; dz <= dz_max; ++dz) {
                for (int64_t dy = -1; dy <= 1; ++dy) {
                    for (int64_t dx = -1; dx <= 1; ++dx) {
                        const int64_t nz = z + dz, ny = y + dy, nx = x + dx;
                        if (nz < 0 || nz >= Z || ny < 0 || ny >= Y || nx < 0 || nx >= X) continue;
                        const int64_t n = (nz * Y + ny) * X + nx;
                        if (m[n] && label[static_cast<size_t>(n)] < 0) {
                            label[static_cast<size_t>(n)] = 1;
                            stack.push_back(n);
                        }
                    }
                }
            }
        }
        if (static_cast<int64_t>(component.size()) < rule.min_component_size) {
            for (int64_t v : component) m[v] = 0;
        }
    }
    return mask;
}

}  // namespace calcseg
