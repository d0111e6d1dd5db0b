#ifndef RANKCELL_CLI_HPP
#define RANKCELL_CLI_HPP

#include "rankcell/benchmark.hpp"
#include "rankcell/corpus.hpp"
#include "rankcell/train.hpp"

#include <iosfwd>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

/**
 * @file cli.hpp
 *
 * @brief The `rankcell` command line: one JSON configuration, `--section.key value` overrides
 * and a manifest next to every artifact.
 */

namespace rankcell {

/// Read when no `--config` is given.
inline constexpr const char* kConfigEnvVar = "RANKCELL_CONFIG";

struct PathsConfig {
    std::string corpus;
    std::string held_out;
    std::string medians;
    std::string shards;
    std::string val_shards;
    std::string checkpoints;
    std::string reports;
};

struct QcConfig {
    bool enabled = true;
    std::uint64_t min_counts = 225;
    double max_mito_frac = 0.10;
    /// Empty: genes whose symbol starts with "MT-".
    std::vector<std::string> mito_genes;
    std::vector<std::string> include_datasets;
    std::vector<std::string> exclude_datasets;
};

struct TokenizeConfig {
    std::size_t context_len = 2048;
    std::size_t cells_per_shard = 65536;
};

struct BenchmarkConfig {
    TaskKind task = TaskKind::held_out_diseases;
    std::string mode = "finetune";
    std::size_t folds = 3;
    double train_frac = 0.70;
    std::size_t seeds = 3;
    std::vector<double> lr_candidates = kFinetuneLrs;
    std::size_t epochs = 3;
    std::size_t batch_size = 32;
    std::size_t probe_steps = 300;
    std::size_t top_genes = 2000;
    std::vector<double> l2_candidates{1e-4, 1e-3, 1e-2, 1e-1, 1.0};
    /// Row label in reports; defaults to the checkpoint file stem or "baseline".
    std::string model_name;
};

/**
 * @brief Everything a command reads besides its inputs.
 *
 * `model` holds a `preset` name plus optional `ModelConfig` fields that override it;
 * `vocab_size` and `context_len` always come from the data. `seed` seeds training, fold
 * construction and synthetic corpora.
 */
struct PipelineConfig {
    PathsConfig paths;
    Variant variant = Variant::g;
    std::uint64_t seed = 0;
    nlohmann::json model = nlohmann::json{{"preset", "2M"}};
    TrainConfig train = TrainConfig::desk();
    QcConfig qc;
    TokenizeConfig tokenize;
    BenchmarkConfig benchmark;
    SyntheticOptions synthetic;
};

nlohmann::json to_json(const PipelineConfig& cfg);
/// Unknown keys and wrong types throw `UsageError` with the field path.
PipelineConfig pipeline_config_from_json(const nlohmann::json& j);

/// Sets `path` (dot-separated) in `j`; `value` is parsed as JSON when possible, else taken as a string.
void apply_override(nlohmann::json& j, std::string_view path, std::string_view value);

/// Resolved architecture for a vocabulary and context length.
ModelConfig resolve_model(const PipelineConfig& cfg, std::size_t vocab_size);

/// SHA-256 of a file, or a sorted map of relative path to digest for a directory.
nlohmann::json fingerprint_path(const std::filesystem::path& path);

/**
 * Runs one command (`args[0]`). Returns the process exit code: 0 success, 1 usage error, 2 data
 * error, 3 numeric divergence. Messages go to `err`, results to `out`.
 */
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}

#endif
