#pragma once

// Single-file checkpoints: weights keyed by canonical module path
// ("encoder.blocks.0.attn.qkv.weight", ...), optional optimizer state, and a
// JSON config fingerprint.

#include <filesystem>
#include <map>
#include <string>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

namespace calcseg {

using TensorMap = std::map<std::string, torch::Tensor>;

struct Checkpoint {
    nlohmann::json fingerprint;
    TensorMap weights;
    TensorMap optimizer_state;
    nlohmann::json meta = nlohmann::json::object();  // epoch, step, best dev dice, ...
};

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Named parameters (and buffers) of `module`, detached and cloned, under `prefix`.
TensorMap collect_weights(const torch::nn::Module& module, const std::string& prefix);

/// Copies every `prefix`-keyed tensor into `module`. Throws ShapeError when a
/// parameter is missing from the map or its shape differs.
void assign_weights(torch::nn::Module& module, const TensorMap& weights, const std::string& prefix);

/// Build identification baked in at configure time (git describe).
std::string git_describe();

/// Compares the fields that must agree for weights to be transferable.
/// Throws FingerprintMismatch naming both fingerprints.
void require_compatible(const nlohmann::json& expected, const nlohmann::json& found,
                        const std::vector<std::string>& keys);

}  // namespace calcseg
