#include "calcseg/checkpoint.hpp"

#include <fstream>
#include <iterator>

#include <torch/serialize.h>

#include "calcseg/errors.hpp"

#ifndef CALCSEG_GIT_DESCRIBE
#define CALCSEG_GIT_DESCRIBE "unknown"
#endif

namespace calcseg {

namespace {

constexpr const char* kFormatTag = "calcseg-checkpoint-v1";

c10::Dict<std::string, at::Tensor> to_dict(const TensorMap& m) {
    c10::Dict<std::string, at::Tensor> d;
    for (const auto& [k, v] : m) d.insert(k, v.detach().to(torch::kCPU).contiguous());
    return d;
}

TensorMap from_dict(const c10::IValue& v) {
    TensorMap out;
    for (const auto& entry : v.toGenericDict()) {
        out.emplace(entry.key().toStringRef(), entry.value().toTensor());
    }
    return out;
}

}  // namespace

std::string git_describe() {
    return CALCSEG_GIT_DESCRIBE;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
    c10::impl::GenericDict root(c10::StringType::get(), c10::AnyType::get());
    root.insert("format", std::string(kFormatTag));
    root.insert("fingerprint", ckpt.fingerprint.dump());
    root.insert("meta", ckpt.meta.dump());
    root.insert("weights", to_dict(ckpt.weights));
    root.insert("optimizer", to_dict(ckpt.optimizer_state));
    const std::vector<char> bytes = torch::pickle_save(c10::IValue(root));

    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    const auto tmp = std::filesystem::path(path.string() + ".tmp");
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw Error("cannot open '" + tmp.string() + "' for writing");
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw Error("short write to '" + tmp.string() + "'");
    }
    std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open checkpoint '" + path.string() + "'");
    std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    c10::IValue root;
    try {
        root = torch::pickle_load(bytes);
    } catch (const c10::Error& e) {
        throw ParseError("checkpoint '" + path.string() + "' is not a readable archive", 0);
    }
    if (!root.isGenericDict()) throw ParseError("checkpoint root is not a dictionary", 0);
    auto dict = root.toGenericDict();
    if (!dict.contains("format") || dict.at("format").toStringRef() != kFormatTag) {
        throw ParseError("checkpoint '" + path.string() + "' has an unknown format tag", 0);
    }
    Checkpoint ckpt;
    ckpt.fingerprint = nlohmann::json::parse(dict.at("fingerprint").toStringRef());
    ckpt.meta = nlohmann::json::parse(dict.at("meta").toStringRef());
    ckpt.weights = from_dict(dict.at("weights"));
    ckpt.optimizer_state = from_dict(dict.at("optimizer"));
    return ckpt;
}

TensorMap collect_weights(const torch::nn::Module& module, const std::string& prefix) {
    TensorMap out;
    for (const auto& item : module.named_parameters()) {
        out.emplace(prefix + item.key(), item.value().detach().clone());
    }
    for (const auto& item : module.named_buffers()) {
        out.emplace(prefix + item.key(), item.value().detach().clone());
    }
    return out;
}

void assign_weights(torch::nn::Module& module, const TensorMap& weights, const std::string& prefix) {
    torch::NoGradGuard no_grad;
    auto copy_into = [&](const std::string& name, torch::Tensor& target) {
        auto it = weights.find(prefix + name);
        if (it == weights.end()) throw ShapeError("checkpoint lacks tensor '" + prefix + name + "'");
        if (it->second.sizes() != target.sizes()) {
            throw ShapeError("checkpoint tensor '" + prefix + name + "' has a different shape");
        }
        target.copy_(it->second);
    };
    for (auto& item : module.named_parameters()) copy_into(item.key(), item.value());
    for (auto& item : module.named_buffers()) copy_into(item.key(), item.value());
}

void require_compatible(const nlohmann::json& expected, const nlohmann::json& found,
                        const std::vector<std::string>& keys) {
    for (const auto& key : keys) {
        const auto ptr = nlohmann::json::json_pointer(key);
        const bool a = expected.contains(ptr);
        const bool b = found.contains(ptr);
        if (a != b || (a && expected.at(ptr) != found.at(ptr))) {
            throw FingerprintMismatch("checkpoint fingerprint mismatch at '" + key + "': run expects " +
                                      expected.dump() + " but checkpoint has " + found.dump());
        }
    }
}

}  // namespace calcseg
