// SPDX-License-Identifier: Apache-2.0
#pragma once

// Continual fine-tuning over a task sequence: neuron-level isolation (NCFT),
// its similarity-weighted inference variant (W-NCFT), the sequential and
// per-task full fine-tuning baselines, and the CL / FG metrics.

#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "neuronlab/attribution.hpp"
#include "neuronlab/train.hpp"

namespace nlab {

struct SequenceTask {
    std::string name;
    TaskKind kind = TaskKind::classification;
    Dataset train;
    Dataset test;
    /// identified on the base model before any training
    TaskNeuronSet neurons;
};

struct TaskSequence {
    std::string order_label;
    std::vector<SequenceTask> tasks;

    void validate() const;  ///< N >= 2, non-empty splits
};

struct TaskVector {
    std::vector<double> values;
    std::size_t samples = 0;
};

/// Mean over sampled examples of the mean final-layer feature over prompt positions.
/// Samples without replacement; a dataset smaller than n_samples needs with_replacement.
TaskVector task_vector(const ModelState& reference, const Dataset& data, std::size_t n_samples, std::uint64_t seed,
                       bool with_replacement = false);

/// Softmax over the cosine similarities between `test` and each trained task.
std::vector<double> similarity_weights(const TaskVector& test, const std::vector<TaskVector>& trained);

enum class OverlapRule {
    highest_relevance,  ///< a shared column takes the weight of its highest-scoring claimant
    relevance_weighted  ///< a shared column takes the score-weighted mean of its claimants' weights
};

/// Copy of `model` whose W1/W2 columns of task k are scaled by weights[k]. Columns in no set are untouched.
ModelState weighted_merge(const ModelState& model, const std::vector<TaskNeuronSet>& sets,
                          const std::vector<double>& weights, OverlapRule rule = OverlapRule::highest_relevance);

/// Mean ratio ||merged column|| / ||trained column|| over the claimed columns with non-zero norm.
double norm_shrinkage(const ModelState& trained, const ModelState& merged, const std::vector<TaskNeuronSet>& sets);

/// a[i][j]: metric on task i after stage j (entries with i > j stay empty).
struct AccuracyMatrix {
    std::vector<std::vector<std::optional<double>>> a;
    /// metric of a model fine-tuned on task i alone
    std::vector<std::optional<double>> alone;

    explicit AccuracyMatrix(std::size_t n = 0)
        : a(n, std::vector<std::optional<double>>(n)), alone(n) {}
    std::size_t size() const noexcept { return a.size(); }
};

/// (1/N) sum_i a[i][N-1]. InputError if that column is incomplete.
double cl_metric(const AccuracyMatrix& m);
/// 100/(j-1) sum_{i<j} a[i][j-1] / A_i for 1-based stage j >= 2.
double fg_metric(const AccuracyMatrix& m, std::size_t stage);

struct ContinualOptions {
    /// fill a W-NCFT matrix from these task vectors (one per task, base-model encoder)
    std::optional<std::vector<TaskVector>> task_vectors;
    OverlapRule overlap_rule = OverlapRule::highest_relevance;
    int max_new_tokens = 16;
};

struct ContinualRun {
    ModelState final_model;
    std::vector<ModelState> stages;
    AccuracyMatrix matrix;
    /// W-NCFT evaluation of the same checkpoints, when task vectors were given
    std::optional<AccuracyMatrix> weighted;
    /// mean column-norm ratio of the merges applied at each stage
    std::vector<double> shrinkage;
    std::vector<std::string> warnings;
};

/// Stage n trains only the columns of task n's neuron set; no mask at test time.
ContinualRun ncft_train(const ModelState& base, const TaskSequence& seq, const TrainHyperparams& hp,
                        const ContinualOptions& opts = {});
/// Stage n trains every parameter on task n.
ContinualRun seqft_train(const ModelState& base, const TaskSequence& seq, const TrainHyperparams& hp,
                         const ContinualOptions& opts = {});
/// A_i: metric of an independent full fine-tune from `base` on each task.
std::vector<double> per_task_ft(const ModelState& base, const TaskSequence& seq, const TrainHyperparams& hp,
                                int max_new_tokens = 16);

/// {order_label, method, matrix, A_i, CL, FG}; FG per stage 2..N (null where A_i is missing or 0).
nlohmann::ordered_json continual_report(const std::string& order_label, const std::string& method,
                                        const AccuracyMatrix& m);
/// order_label,method,stage,fg
std::string fg_csv_rows(const std::string& order_label, const std::string& method, const AccuracyMatrix& m);

}  // namespace nlab
