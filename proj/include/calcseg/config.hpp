#pragma once

// Run configuration: one nested tree (data, encoder, mae, decoder, training,
// eval, ablate) built from defaults, then a YAML file, then command-line
// overrides. Every leaf remembers where its value came from.

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "calcseg/data.hpp"
#include "calcseg/decoders.hpp"
#include "calcseg/encoder.hpp"
#include "calcseg/mae.hpp"
#include "calcseg/training.hpp"

namespace calcseg {

struct RunConfig {
    nlohmann::json tree;
    std::map<std::string, std::string> provenance;  // dotted key -> default | file | flag
};

RunConfig default_run_config();

/// Merges a YAML file. Unknown keys and type mismatches throw ConfigError.
void merge_config_file(RunConfig& cfg, const std::filesystem::path& path);

/// Sets one dotted key ("training.epochs") from YAML text ("40", "[4, 8]").
void apply_override(RunConfig& cfg, const std::string& key, const std::string& yaml_value,
                    const std::string& source = "flag");

std::string to_yaml(const nlohmann::json& tree);
nlohmann::json provenance_json(const RunConfig& cfg);

/// Cross-field checks (fractions, positive sizes, known names).
void validate(const RunConfig& cfg);

uint64_t run_seed(const RunConfig& cfg);
PhantomConfig phantom_config(const RunConfig& cfg);
SplitConfig split_config(const RunConfig& cfg);
EncoderConfig encoder_from_config(const RunConfig& cfg);
MaeDecoderConfig mae_decoder_from_config(const RunConfig& cfg, const EncoderConfig& enc);
PretrainRunConfig pretrain_from_config(const RunConfig& cfg);
DecoderSpec decoder_from_config(const RunConfig& cfg);
/// Everything but the pre-trained checkpoint.
FinetuneRunConfig finetune_from_config(const RunConfig& cfg);

}  // namespace calcseg
