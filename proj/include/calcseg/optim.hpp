#pragma once

// AdamW construction with per-group learning-rate multipliers, and export /
// import of its per-parameter state so runs can resume bit-for-bit.

#include <memory>
#include <string>
#include <utility>
#include <vector>

#include <torch/torch.h>

#include "calcseg/checkpoint.hpp"

namespace calcseg {

using NamedParams = std::vector<std::pair<std::string, torch::Tensor>>;

NamedParams named_params(const torch::nn::Module& module, const std::string& prefix);

struct ParamGroupSpec {
    NamedParams params;
    double lr_multiplier = 1.0;
};

/// One AdamW per run. Every group is split into decayed (rank >= 2) and
/// non-decayed (biases, norms, tokens) halves.
class GroupedAdamW {
public:
    GroupedAdamW(const std::vector<ParamGroupSpec>& groups, double weight_decay,
                 std::pair<double, double> betas = {0.9, 0.999});

    torch::optim::AdamW& optimizer() { return *opt_; }
    void set_lr(double base_lr);
    void zero_grad() { opt_->zero_grad(); }
    void step() { opt_->step(); }

    TensorMap export_state() const;
    void import_state(const TensorMap& state);

private:
    std::unique_ptr<torch::optim::AdamW> opt_;
    std::vector<double> multipliers_;  // one per torch param group
    NamedParams ordered_;
};

}  // namespace calcseg
