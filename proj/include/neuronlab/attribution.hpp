// SPDX-License-Identifier: Apache-2.0
#pragma once

// Gradient-times-activation relevance of every neuron for a task, top-k
// selection, and the brute-force zeroing oracle the estimate approximates.

#include <cstddef>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "neuronlab/model.hpp"
#include "neuronlab/tasks.hpp"

namespace nlab {

enum class Aggregation { mean, sum };

std::string_view aggregation_name(Aggregation a) noexcept;
Aggregation parse_aggregation(std::string_view name);

struct RelevanceTable {
    ModelConfig config;
    /// One non-negative score per neuron, indexed by flat_index.
    std::vector<double> scores;
    std::string dataset_id;
    std::size_t token_count = 0;
    Aggregation aggregation = Aggregation::mean;

    double score(const NeuronId& id) const;
};

/// |d loss / d omega * omega| summed over every fed position of every example,
/// where the loss is the example's summed cross-entropy over its target tokens.
/// Mean aggregation divides by the number of target tokens in the dataset.
/// Examples are reduced in a canonical content order, so the table does not
/// depend on dataset order or on how the work is split.
RelevanceTable relevance_scores(const ModelState& model, const Dataset& data,
                                Aggregation aggregation = Aggregation::mean);

/// Identifier recorded in a RelevanceTable: task names plus an order-free content hash.
std::string dataset_id(const Dataset& data);

struct TaskNeuronSet {
    /// Descending score; ties broken by NeuronId order.
    std::vector<NeuronId> neurons;
    std::vector<double> scores;
    double k_percent = 10.0;
    std::size_t total_neurons = 0;
    std::string dataset_id;

    std::size_t size() const noexcept { return neurons.size(); }
    /// The first ceil(p/100 * size) members (at least one).
    TaskNeuronSet prefix(double proportion) const;
    ColumnSet columns(const ModelConfig& cfg) const;
};

/// Every neuron in descending score order (ties by NeuronId).
std::vector<NeuronId> full_ranking(const RelevanceTable& table);

/// max(1, round(k/100 * N)) highest-scoring neurons. With per_layer, the quota is
/// applied inside each layer and the survivors are ordered globally.
TaskNeuronSet select_top_k(const RelevanceTable& table, double k_percent, bool per_layer = false);

/// Neurons drawn uniformly without replacement, for random-control runs.
TaskNeuronSet random_neuron_set(const ModelConfig& cfg, std::size_t count, std::uint64_t seed);

/// |L(neuron zeroed) - L(original)| with L the mean target-token cross-entropy.
double exact_loss_delta(const ModelState& model, const Dataset& data, const NeuronId& neuron);

nlohmann::ordered_json neuron_set_to_json(const TaskNeuronSet& set);
TaskNeuronSet neuron_set_from_json(const nlohmann::json& j);
void save_neuron_set(const TaskNeuronSet& set, const std::filesystem::path& path);
TaskNeuronSet load_neuron_set(const std::filesystem::path& path);

}  // namespace nlab
