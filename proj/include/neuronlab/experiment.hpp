// SPDX-License-Identifier: Apache-2.0
#pragma once

// Experiment orchestration behind the command-line tool. Each command reads
// one JSON config, writes its artifacts under the output directory and
// returns its report. Commands share state only through files there.

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "neuronlab/attribution.hpp"
#include "neuronlab/continual.hpp"
#include "neuronlab/intervention.hpp"

namespace nlab {

struct PretrainConfig {
    /// The base model is trained from scratch on a mixture of these suites.
    std::vector<std::string> tasks;
    std::size_t n_train = 2000;
    std::uint64_t data_seed = 11;
    TrainHyperparams hyperparams;
    /// Empty: <output_dir>/base.ckpt
    std::string checkpoint;
};

struct ContinualConfig {
    std::vector<std::string> sequence;
    /// Each order is a permutation of indices into `sequence`.
    std::vector<std::vector<int>> orders;
    /// Any of ncft, seqft, wncft, per-task-ft.
    std::vector<std::string> methods;
    std::size_t task_vector_samples = 64;
    OverlapRule overlap_rule = OverlapRule::highest_relevance;
};

struct ExperimentConfig {
    ModelConfig model;
    PretrainConfig pretrain;
    std::vector<std::string> tasks;
    std::size_t n_train = 500;
    std::size_t n_test = 100;
    /// Relevance is computed on the first `probe` training examples.
    std::size_t probe = 128;
    double k_percent = 10.0;
    std::vector<double> proportions = {10, 30, 50, 70, 100};
    TrainHyperparams hyperparams;
    TrainHyperparams sweep_hyperparams;
    std::vector<std::uint64_t> seeds = {1, 2, 3, 4, 5};
    Aggregation aggregation = Aggregation::mean;
    bool per_layer = false;
    InterventionMode deactivation = InterventionMode::deactivate_activation;
    ContinualConfig continual;
    int max_new_tokens = 16;
    std::string output_dir = "runs";

    static ExperimentConfig defaults();
    /// Throws ConfigError.
    void validate() const;
};

nlohmann::json config_to_json(const ExperimentConfig& c);
/// Missing keys take their defaults; unknown keys are rejected (ConfigError).
ExperimentConfig config_from_json(const nlohmann::json& j);
/// Accepts a bare config or any report that embeds one under "config".
ExperimentConfig load_config(const std::filesystem::path& path);

/// Environment overrides (NLAB_OUT, NLAB_SEED), applied before validation.
void apply_environment(ExperimentConfig& c);

enum class Command { identify, deactivate, finetune, sweep, similarity, continual, report };
std::string_view command_name(Command c) noexcept;
Command parse_command(std::string_view name);

struct RunOptions {
    bool force = false;
    /// progress lines on stderr
    bool verbose = false;
};

/// Runs one command and writes <output_dir>/<command>.json. Refuses to
/// overwrite an existing report unless opts.force (ConfigError); a missing
/// upstream artifact raises FileError naming the command that produces it.
nlohmann::ordered_json run_command(Command cmd, const ExperimentConfig& config, const RunOptions& opts = {});

/// Loads the base checkpoint, pretraining it first when absent.
ModelState ensure_base_model(const ExperimentConfig& config, bool verbose = false);

/// Dataset of one task for one seed, sized by the config.
TaskData experiment_data(const ExperimentConfig& config, const std::string& task, std::uint64_t seed);

/// Report JSON with the timestamp field removed, for byte comparisons.
std::string report_without_timestamp(const nlohmann::ordered_json& report);

}  // namespace nlab
