// SPDX-License-Identifier: Apache-2.0
#pragma once

// Neuron-set overlap, per-layer parameter similarity between two tasks'
// neuron sets, and correlation statistics.

#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "neuronlab/attribution.hpp"

namespace nlab {

/// Jaccard index |X n Y| / |X u Y|. Duplicates are ignored. Throws InputError if both are empty.
double overlap_rate(const std::vector<NeuronId>& x, const std::vector<NeuronId>& y);

/// Cosine between the mean W1 column of each set at `layer`; nullopt when either
/// set has no W1 member there. Throws UndefinedValue for a zero mean column.
std::optional<double> layer_param_similarity(const ModelState& model, const std::vector<NeuronId>& a,
                                             const std::vector<NeuronId>& b, int layer);

/// layer_param_similarity for every layer.
std::vector<std::optional<double>> similarity_profile(const ModelState& model, const std::vector<NeuronId>& a,
                                                      const std::vector<NeuronId>& b);

/// Mean of the non-null entries; nullopt when every entry is null.
std::optional<double> profile_mean(const std::vector<std::optional<double>>& profile);

enum class CorrelationMethod { pearson, spearman };
std::string_view method_name(CorrelationMethod m) noexcept;

struct CorrelationResult {
    double r = 0.0;
    double p = 1.0;  ///< two-sided
    CorrelationMethod method = CorrelationMethod::pearson;
};

/// p from Student's t with n-2 degrees of freedom. Throws UndefinedValue on constant input.
CorrelationResult pearson(const std::vector<double>& xs, const std::vector<double>& ys);
/// Pearson on average ranks. p is exact (all permutations) for n <= 10, else the
/// normal approximation z = r sqrt(n-1).
CorrelationResult spearman(const std::vector<double>& xs, const std::vector<double>& ys);

/// Average ranks (1-based), ties sharing their mean rank.
std::vector<double> average_ranks(const std::vector<double>& xs);

/// Models M_i, each fine-tuned on one task, probed on a fixed list of test tasks.
struct StudyInput {
    std::vector<ModelState> models;
    std::vector<std::string> test_tasks;
    /// index into test_tasks of the task model i was trained on
    std::vector<std::size_t> trained_task;
    /// sets[i][j]: neuron set of test task j identified in model i
    std::vector<std::vector<TaskNeuronSet>> sets;
    /// scores[i][j]: metric of model i on test task j
    std::vector<std::vector<double>> scores;
};

struct TaskStudy {
    std::string test_task;
    /// per layer, averaged over models; null where no model has a value
    std::vector<std::optional<double>> profile;
    /// per model: layer-averaged similarity between its training task and the test task
    std::vector<std::optional<double>> similarities;
    std::vector<double> scores;
    std::optional<CorrelationResult> pearson;
    std::optional<CorrelationResult> spearman;
    /// why a correlation is missing (constant input, too few points)
    std::string note;
};

std::vector<TaskStudy> similarity_generalization_study(const StudyInput& input);

/// layer,similarity,test_task  (empty similarity for null layers)
std::string profile_csv(const std::vector<TaskStudy>& study);
/// [{task, method, r, p}, ...]
nlohmann::ordered_json correlation_json(const std::vector<TaskStudy>& study);

}  // namespace nlab
