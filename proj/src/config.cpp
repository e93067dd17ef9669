#include "calcseg/config.hpp"

#include <fstream>
#include <sstream>

#include <yaml-cpp/yaml.h>

#include "calcseg/errors.hpp"
#include "calcseg/log.hpp"

namespace calcseg {

namespace {

using json = nlohmann::json;

json decoder_tree(const DecoderSpec& s) {
    return {{"kind", to_string(s.kind)}, {"upsample_mode", to_string(s.upsample)}};
}

// Leaves of `tree` as dotted keys.
void collect_leaves(const json& tree, const std::string& prefix, std::vector<std::string>& out) {
    if (tree.is_object()) {
        for (auto it = tree.begin(); it != tree.end(); ++it) {
            collect_leaves(it.value(), prefix.empty() ? it.key() : prefix + "." + it.key(), out);
        }
    } else {
        out.push_back(prefix);
    }
}

json::json_pointer pointer_for(const std::string& dotted) {
    std::string p;
    std::stringstream ss(dotted);
    std::string part;
    while (std::getline(ss, part, '.')) p += "/" + part;
    return json::json_pointer(p);
}

json scalar_guess(const YAML::Node& n) {
    if (n.IsNull()) return nullptr;
    const std::string s = n.Scalar();
    if (n.Tag() == "!") return s;  // quoted
    bool b;
    if (YAML::convert<bool>::decode(n, b) && (s == "true" || s == "false")) return b;
    try {
        size_t pos = 0;
        const long long i = std::stoll(s, &pos);
        if (pos == s.size()) return static_cast<int64_t>(i);
    } catch (const std::exception&) {
    }
    try {
        size_t pos = 0;
        const double d = std::stod(s, &pos);
        if (pos == s.size()) return d;
    } catch (const std::exception&) {
    }
    return s;
}

// Converts `n` to JSON shaped like `like` (the current value at that key).
json coerce(const YAML::Node& n, const json& like, const std::string& key) {
    auto fail = [&](const std::string& want) {
        std::ostringstream os;
        os << n;
        return ConfigError("config key '" + key + "' expects " + want + ", got '" + os.str() + "'");
    };
    if (like.is_object()) {
        if (!n.IsMap()) throw fail("a mapping");
        json out = like;
        for (auto it = n.begin(); it != n.end(); ++it) {
            const std::string k = it->first.as<std::string>();
            if (!like.contains(k)) throw ConfigError("unknown config key '" + key + "." + k + "'");
            out[k] = coerce(it->second, like.at(k), key + "." + k);
        }
        return out;
    }
    if (like.is_array()) {
        if (!n.IsSequence()) throw fail("a list");
        json out = json::array();
        for (const auto& item : n) out.push_back(like.empty() ? scalar_guess(item) : coerce(item, like.at(0), key));
        return out;
    }
    if (!n.IsScalar() && !n.IsNull()) throw fail("a scalar");
    const json guess = scalar_guess(n);
    if (like.is_null()) return guess;
    if (guess.is_null()) return nullptr;  // optional values may be cleared
    if (like.is_boolean()) {
        if (!guess.is_boolean()) throw fail("true or false");
        return guess;
    }
    if (like.is_number_integer()) {
        if (!guess.is_number_integer()) throw fail("an integer");
        return guess;
    }
    if (like.is_number_float()) {
        if (!guess.is_number()) throw fail("a number");
        return guess.get<double>();
    }
    if (like.is_string()) return n.Scalar();
    return guess;
}

void mark(RunConfig& cfg, const std::string& prefix, const json& value, const std::string& source) {
    std::vector<std::string> leaves;
    collect_leaves(value, prefix, leaves);
    for (const auto& k : leaves) cfg.provenance[k] = source;
}

// Only the leaves a file actually names change provenance.
void mark_named(RunConfig& cfg, const YAML::Node& n, const std::string& prefix) {
    if (n.IsMap()) {
        for (auto it = n.begin(); it != n.end(); ++it) mark_named(cfg, it->second, prefix + "." + it->first.as<std::string>());
    } else {
        mark(cfg, prefix, cfg.tree.at(pointer_for(prefix)), "file");
    }
}

void emit(YAML::Emitter& out, const json& j) {
    if (j.is_object()) {
        out << YAML::BeginMap;
        for (auto it = j.begin(); it != j.end(); ++it) {
            out << YAML::Key << it.key() << YAML::Value;
            emit(out, it.value());
        }
        out << YAML::EndMap;
    } else if (j.is_array()) {
        out << YAML::Flow << YAML::BeginSeq;
        for (const auto& v : j) emit(out, v);
        out << YAML::EndSeq;
    } else if (j.is_null()) {
        out << YAML::Null;
    } else if (j.is_boolean()) {
        out << j.get<bool>();
    } else if (j.is_number_integer()) {
        out << j.get<int64_t>();
    } else if (j.is_number_float()) {
        std::ostringstream os;
        os.precision(17);
        os << j.get<double>();
        std::string s = os.str();
        if (s.find_first_of(".eEn") == std::string::npos) s += ".0";
        out << s;
    } else {
        out << YAML::DoubleQuoted << j.get<std::string>();
    }
}

template <typename T>
T at(const RunConfig& cfg, const std::string& dotted) {
    try {
        return cfg.tree.at(pointer_for(dotted)).get<T>();
    } catch (const json::exception& e) {
        throw ConfigError("config key '" + dotted + "': " + e.what());
    }
}

}  // namespace

RunConfig default_run_config() {
    RunConfig cfg;
    json phantom = to_json(PhantomConfig{});
    phantom.erase("seed");  // follows the global seed

    const FinetuneRunConfig ft;
    const PretrainRunConfig pre;
    cfg.tree = {
        {"seed", 0},
        {"device", "cpu"},
        {"data",
         {{"patients", 80},
          {"series_per_patient", 4},
          {"manufacturers", 4},
          {"format", "nii"},
          {"phantom", phantom},
          {"split", {{"train_fraction", 0.6}, {"dev_fraction", 0.2}, {"test_fraction", 0.2}, {"finetune_count", 12}}}}},
        {"encoder", {{"name", "ViTiac-S"}, {"patch_size", 4}}},
        {"mae",
         {{"mask_ratio", pre.mask_ratio},
          {"epochs", pre.epochs},
          {"batch_size", pre.batch_size},
          {"base_lr", 1e-3},
          {"scale_lr_by_batch", false},
          {"warmup_fraction", pre.warmup_fraction},
          {"weight_decay", pre.weight_decay},
          {"pixel_norm", pre.pixel_norm},
          {"norm_eps", pre.norm_eps},
          {"decoder", {{"embed_dim", 0}, {"depth", 0}, {"heads", 0}}}}},
        {"decoder", decoder_tree(DecoderSpec{})},
        {"training",
         {{"epochs", ft.epochs},
          {"batch_size", ft.batch_size},
          {"lr", ft.lr},
          {"encoder_lr_multiplier", ft.encoder_lr_multiplier},
          {"weight_decay", ft.weight_decay},
          {"warmup_fraction", ft.warmup_fraction},
          {"patience", ft.patience},
          {"include_empty_labels", ft.include_empty_labels},
          {"loss", to_json(ft.loss)}}},
        {"eval", {{"resamples", 1000}}},
        {"ablate",
         {{"encoders", {"ViTiac-S"}},
          {"patch_sizes", {4}},
          {"decoders", {"MAE_DEC"}},
          {"upsample_modes", {"NN_INTERP_CONV"}},
          {"init", "scratch"}}},
    };
    mark(cfg, "", cfg.tree, "default");
    return cfg;
}

void merge_config_file(RunConfig& cfg, const std::filesystem::path& path) {
    YAML::Node root;
    try {
        root = YAML::LoadFile(path.string());
    } catch (const YAML::BadFile&) {
        throw ConfigError("cannot read config file '" + path.string() + "'");
    } catch (const YAML::Exception& e) {
        throw ParseError("config file '" + path.string() + "': " + e.msg, static_cast<std::size_t>(e.mark.pos));
    }
    if (root.IsNull()) return;
    if (!root.IsMap()) throw ConfigError("config file '" + path.string() + "' must hold a mapping");
    for (auto it = root.begin(); it != root.end(); ++it) {
        const std::string k = it->first.as<std::string>();
        if (!cfg.tree.contains(k)) throw ConfigError("unknown config key '" + k + "'");
        const json before = cfg.tree[k];
        cfg.tree[k] = coerce(it->second, before, k);
        mark_named(cfg, it->second, k);
    }
}

void apply_override(RunConfig& cfg, const std::string& key, const std::string& yaml_value, const std::string& source) {
    const auto ptr = pointer_for(key);
    if (key.empty() || !cfg.tree.contains(ptr)) throw ConfigError("unknown config key '" + key + "'");
    YAML::Node n;
    try {
        n = YAML::Load(yaml_value);
    } catch (const YAML::Exception& e) {
        throw ConfigError("cannot parse value '" + yaml_value + "' for '" + key + "': " + e.msg);
    }
    cfg.tree[ptr] = coerce(n, cfg.tree[ptr], key);
    mark(cfg, key, cfg.tree[ptr], source);
    log_info("config " + key + " = " + cfg.tree[ptr].dump() + " (" + source + ")");
}

std::string to_yaml(const json& tree) {
    YAML::Emitter out;
    emit(out, tree);
    return std::string(out.c_str()) + "\n";
}

json provenance_json(const RunConfig& cfg) {
    json j = json::object();
    for (const auto& [k, v] : cfg.provenance) j[k] = {{"source", v}, {"value", cfg.tree.at(pointer_for(k))}};
    return j;
}

uint64_t run_seed(const RunConfig& cfg) {
    const auto s = at<int64_t>(cfg, "seed");
    if (s < 0) throw ConfigError("seed must be non-negative");
    return static_cast<uint64_t>(s);
}

PhantomConfig phantom_config(const RunConfig& cfg) {
    json j = cfg.tree.at("data").at("phantom");
    j["seed"] = run_seed(cfg);
    try {
        return phantom_config_from_json(j);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("data.phantom: ") + e.what());
    }
}

SplitConfig split_config(const RunConfig& cfg) {
    SplitConfig s;
    s.train_fraction = at<double>(cfg, "data.split.train_fraction");
    s.dev_fraction = at<double>(cfg, "data.split.dev_fraction");
    s.test_fraction = at<double>(cfg, "data.split.test_fraction");
    const auto& fc = cfg.tree.at("data").at("split").at("finetune_count");
    if (!fc.is_null()) s.finetune_count = fc.get<int64_t>();
    s.seed = run_seed(cfg);
    return s;
}

EncoderConfig encoder_from_config(const RunConfig& cfg) {
    return encoder_config(at<std::string>(cfg, "encoder.name"), at<int64_t>(cfg, "encoder.patch_size"));
}

MaeDecoderConfig mae_decoder_from_config(const RunConfig& cfg, const EncoderConfig& enc) {
    MaeDecoderConfig d = default_mae_decoder(enc);
    if (const auto v = at<int64_t>(cfg, "mae.decoder.embed_dim"); v > 0) d.embed_dim = v;
    if (const auto v = at<int64_t>(cfg, "mae.decoder.depth"); v > 0) d.depth = v;
    if (const auto v = at<int64_t>(cfg, "mae.decoder.heads"); v > 0) d.num_heads = v;
    return d;
}

PretrainRunConfig pretrain_from_config(const RunConfig& cfg) {
    PretrainRunConfig r;
    r.mask_ratio = at<double>(cfg, "mae.mask_ratio");
    r.epochs = at<int64_t>(cfg, "mae.epochs");
    r.batch_size = at<int64_t>(cfg, "mae.batch_size");
    r.base_lr = at<double>(cfg, "mae.base_lr");
    r.scale_lr_by_batch = at<bool>(cfg, "mae.scale_lr_by_batch");
    r.warmup_fraction = at<double>(cfg, "mae.warmup_fraction");
    r.weight_decay = at<double>(cfg, "mae.weight_decay");
    r.pixel_norm = at<bool>(cfg, "mae.pixel_norm");
    r.norm_eps = at<double>(cfg, "mae.norm_eps");
    r.seed = run_seed(cfg);
    return r;
}

DecoderSpec decoder_from_config(const RunConfig& cfg) {
    DecoderSpec s;
    s.kind = parse_decoder_kind(at<std::string>(cfg, "decoder.kind"));
    s.upsample = parse_upsample_mode(at<std::string>(cfg, "decoder.upsample_mode"));
    if (s.kind == DecoderKind::MaeDec) {
        const auto enc = encoder_from_config(cfg);
        s.mae = mae_decoder_from_config(cfg, enc);
    }
    return s;
}

FinetuneRunConfig finetune_from_config(const RunConfig& cfg) {
    FinetuneRunConfig f;
    f.encoder = encoder_from_config(cfg);
    f.decoder = decoder_from_config(cfg);
    f.epochs = at<int64_t>(cfg, "training.epochs");
    f.batch_size = at<int64_t>(cfg, "training.batch_size");
    f.lr = at<double>(cfg, "training.lr");
    f.encoder_lr_multiplier = at<double>(cfg, "training.encoder_lr_multiplier");
    f.weight_decay = at<double>(cfg, "training.weight_decay");
    f.warmup_fraction = at<double>(cfg, "training.warmup_fraction");
    f.patience = at<int64_t>(cfg, "training.patience");
    f.include_empty_labels = at<bool>(cfg, "training.include_empty_labels");
    f.loss.dice_weight = at<double>(cfg, "training.loss.dice_weight");
    f.loss.bce_weight = at<double>(cfg, "training.loss.bce_weight");
    f.loss.pos_weight_min = at<double>(cfg, "training.loss.pos_weight_min");
    f.loss.pos_weight_max = at<double>(cfg, "training.loss.pos_weight_max");
    f.loss.dice_smooth = at<double>(cfg, "training.loss.dice_smooth");
    f.seed = run_seed(cfg);
    return f;
}

void validate(const RunConfig& cfg) {
    run_seed(cfg);
    const auto device = at<std::string>(cfg, "device");
    if (device != "cpu") throw ConfigError("device '" + device + "' is not supported by this build (use cpu)");
    if (at<int64_t>(cfg, "data.patients") < 1) throw ConfigError("data.patients must be >= 1");
    if (at<int64_t>(cfg, "data.series_per_patient") < 1) throw ConfigError("data.series_per_patient must be >= 1");
    if (at<int64_t>(cfg, "data.manufacturers") < 1) throw ConfigError("data.manufacturers must be >= 1");
    const auto fmt = at<std::string>(cfg, "data.format");
    if (fmt != "nii" && fmt != "raw") throw ConfigError("data.format must be nii or raw");
    phantom_config(cfg);
    const auto enc = encoder_from_config(cfg);
    validate(enc);
    validate(mae_decoder_from_config(cfg, enc), enc);
    decoder_from_config(cfg);
    finetune_from_config(cfg);
    const auto pre = pretrain_from_config(cfg);
    if (!(pre.mask_ratio > 0.0 && pre.mask_ratio < 1.0)) throw ConfigError("mae.mask_ratio must lie in (0, 1)");
    if (at<int64_t>(cfg, "eval.resamples") < 1) throw ConfigError("eval.resamples must be >= 1");
    for (const auto& e : cfg.tree.at("ablate").at("encoders")) encoder_config(e.get<std::string>(), 4);
    for (const auto& d : cfg.tree.at("ablate").at("decoders")) parse_decoder_kind(d.get<std::string>());
    for (const auto& m : cfg.tree.at("ablate").at("upsample_modes")) parse_upsample_mode(m.get<std::string>());
    const auto init = at<std::string>(cfg, "ablate.init");
    if (init != "scratch" && init != "pretrain") throw ConfigError("ablate.init must be scratch or pretrain");
}

}  // namespace calcseg
