// SPDX-License-Identifier: Apache-2.0
#pragma once

// Causal probes on a neuron set: switch neurons off, or fine-tune only them.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "neuronlab/attribution.hpp"
#include "neuronlab/train.hpp"

namespace nlab {

enum class InterventionMode { deactivate_activation, deactivate_parameter, finetune_masked };

std::string_view mode_name(InterventionMode m) noexcept;
InterventionMode parse_mode(std::string_view name);

struct InterventionPlan {
    TaskNeuronSet target;
    InterventionMode mode = InterventionMode::deactivate_activation;
    double proportion = 100.0;  ///< in (0, 100]

    /// Top ceil(p/100 * |target|) members of the ranked target set.
    TaskNeuronSet subset() const { return target.prefix(proportion); }
};

/// Result of a deactivation: parameter mode yields a new checkpoint, activation
/// mode an inference-time mask over an unchanged model.
struct Deactivated {
    ModelState model;
    std::optional<ColumnSet> mask;

    InferenceOptions inference(int max_new_tokens = 16) const;
};

Deactivated deactivate(const ModelState& model, const InterventionPlan& plan);

/// Copy of `model` with the W1 / W2 columns of `columns` set to 0.
ModelState zero_columns(const ModelState& model, const ColumnSet& columns);

TrainResult masked_finetune(const ModelState& model, const Dataset& data, const InterventionPlan& plan,
                            const TrainHyperparams& hp);

/// Test splits a sweep scores after every fine-tuning run.
struct EvalTask {
    std::string name;
    TaskKind kind = TaskKind::classification;
    Dataset test;
};

struct SweepRow {
    double proportion = 0.0;
    double id_metric = 0.0;
    std::optional<double> ood_cls_metric;  ///< mean over out-of-domain classification tasks
    std::optional<double> ood_gen_metric;  ///< mean over out-of-domain generation tasks
    std::uint64_t seed = 0;
};

/// For each proportion a fresh masked fine-tune from `model` on the prefix of
/// `ranking`, then in-domain and out-of-domain evaluation.
std::vector<SweepRow> sweep_proportions(const ModelState& model, const Dataset& train_data, const TaskNeuronSet& ranking,
                                        const std::vector<double>& proportions, const TrainHyperparams& hp,
                                        const EvalTask& in_domain, const std::vector<EvalTask>& out_of_domain);

/// Columns: proportion,id_metric,ood_cls_metric,ood_gen_metric,seed
std::string sweep_csv(const std::vector<SweepRow>& rows);

}  // namespace nlab
