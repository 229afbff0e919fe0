// SPDX-License-Identifier: Apache-2.0
#pragma once

// Teacher-forced training with coordinate-level freezing, and task metrics.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "neuronlab/error.hpp"
#include "neuronlab/model.hpp"
#include "neuronlab/tasks.hpp"

namespace nlab {

enum class OptimizerKind { sgd, adam };

struct TrainHyperparams {
    int steps = 200;
    int batch_size = 16;
    double learning_rate = 0.05;
    std::uint64_t seed = 0;
    OptimizerKind optimizer = OptimizerKind::sgd;
    /// Global gradient-norm clip over the trainable coordinates; 0 disables.
    double grad_clip = 1.0;

    void validate() const;
    bool operator==(const TrainHyperparams&) const = default;
};

void to_json(nlohmann::json& j, const TrainHyperparams& h);
void from_json(const nlohmann::json& j, TrainHyperparams& h);

/// The coordinates a training run may change. Everything else stays bit-identical,
/// optimizer state included.
struct TrainableSet {
    enum class Scope { all_parameters, ffn_columns };

    Scope scope = Scope::all_parameters;
    /// For ffn_columns: W1 column j / W2 column j of every member neuron.
    ColumnSet columns;

    static TrainableSet everything() { return {}; }
    static TrainableSet ffn(ColumnSet cols) { return {Scope::ffn_columns, std::move(cols)}; }
};

struct TrainResult {
    ModelState model;
    std::vector<double> loss_history;  ///< mean token loss of each step's batch
};

/// Loss became non-finite. Carries the last checkpoint whose step was finite.
class TrainingDiverged : public NumericFault {
public:
    TrainingDiverged(std::string op, int step, ModelState last_good)
        : NumericFault(std::move(op), "training diverged at step " + std::to_string(step)),
          step_(step),
          last_good_(std::move(last_good)) {}

    int step() const noexcept { return step_; }
    const ModelState& last_good() const noexcept { return last_good_; }

private:
    int step_;
    ModelState last_good_;
};

TrainResult train(const ModelState& init, const Dataset& data, const TrainableSet& trainable, const TrainHyperparams& hp);

// -- evaluation ----------------------------------------------------------------

struct InferenceOptions {
    const ColumnSet* deactivated = nullptr;
    int max_new_tokens = 16;
};

/// Greedy continuation of `prompt` until <eos> or the token budget.
std::vector<int> greedy_decode(const ModelState& model, std::vector<int> prompt, const InferenceOptions& opts = {});

/// Accuracy (classification) or mean per-example Rouge-L (generation), in [0, 1].
double evaluate_task(const ModelState& model, const Dataset& test, TaskKind kind, const InferenceOptions& opts = {});

/// Mean teacher-forced cross-entropy over every target token of `data`.
double dataset_loss(const ModelState& model, const Dataset& data, const ColumnSet* deactivated = nullptr);

}  // namespace nlab
