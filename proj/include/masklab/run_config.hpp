#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "masklab/discovery.hpp"
#include "masklab/model.hpp"
#include "masklab/train.hpp"

namespace masklab {

/// Everything a pipeline run needs, with working defaults for the p=11
/// reproduction. model.vocab_size / max_seq_len of 0 mean "derive from the
/// task" (modulus + 4 symbols; 5-token prompts).
struct RunConfig {
    TransformerConfig model;  // member defaults are already the 2x64x4x256 stack
    struct TaskSection {
        int modulus = 11;
        double split_fraction = 0.9;
    } task;
    BaseTrainConfig base_training;
    DiscoveryConfig discovery;
    std::uint64_t seed = 0;

    /// model with vocab_size/max_seq_len resolved against the task section.
    TransformerConfig resolved_model() const;
};

/// Parse result plus where each dotted key came from ("file"; later "flag"
/// when the CLI overrides it). Keys never touched stay absent = default.
struct LoadedRunConfig {
    RunConfig config;
    std::map<std::string, std::string> origin;

    std::string origin_of(const std::string& key) const;
};

/// Strict parse: any unrecognized key anywhere is an error naming its dotted
/// path. Every field is optional; absent fields keep their defaults.
LoadedRunConfig parse_run_config(const std::string& json_text, const std::string& origin_label);
LoadedRunConfig load_run_config(const std::string& path);

/// Full dump with every field explicit (the documented-defaults reference
/// when called on RunConfig{}).
std::string run_config_to_json(const RunConfig& c);

}  // namespace masklab
