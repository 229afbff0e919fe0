// SPDX-License-Identifier: Apache-2.0
#include "neuronlab/attribution.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "neuronlab/error.hpp"
#include "neuronlab/parallel.hpp"
#include "neuronlab/rng.hpp"
#include "neuronlab/train.hpp"

namespace nlab {

std::string_view aggregation_name(Aggregation a) noexcept { return a == Aggregation::mean ? "mean" : "sum"; }

Aggregation parse_aggregation(std::string_view name) {
    if (name == "mean") return Aggregation::mean;
    if (name == "sum") return Aggregation::sum;
    throw ConfigError("aggregation must be \"mean\" or \"sum\", got \"" + std::string(name) + "\"");
}

double RelevanceTable::score(const NeuronId& id) const { return scores.at(flat_index(config, id)); }

namespace {

std::uint64_t fnv1a(std::string_view s, std::uint64_t h = 0xcbf29ce484222325ULL) {
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

// Indices of `data` sorted by example content.
std::vector<std::size_t> canonical_order(const Dataset& data) {
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        const Example& x = data[a];
        const Example& y = data[b];
        return std::tie(x.input, x.target, x.task) < std::tie(y.input, y.target, y.task);
    });
    return order;
}

void accumulate_columns(const Tensor& grad, const Tensor& value, double* out) {
    const std::size_t rows = value.rows(), cols = value.cols();
    for (std::size_t r = 0; r < rows; ++r) {
        const double* g = grad.ptr() + r * cols;
        const double* w = value.ptr() + r * cols;
        for (std::size_t c = 0; c < cols; ++c) out[c] += std::abs(g[c] * w[c]);
    }
}

}  // namespace

std::string dataset_id(const Dataset& data) {
    std::set<std::string> tasks;
    std::string content;
    for (std::size_t i : canonical_order(data)) {
        const Example& e = data[i];
        tasks.insert(e.task);
        content += e.input;
        content += '\t';
        content += e.target;
        content += '\t';
        content += e.task;
        content += '\n';
    }
    std::string id;
    for (const auto& t : tasks) id += (id.empty() ? "" : "+") + t;
    std::ostringstream hex;
    hex << std::hex << fnv1a(content);
    return id + "#" + hex.str();
}

RelevanceTable relevance_scores(const ModelState& model, const Dataset& data, Aggregation aggregation) {
    if (data.empty()) throw InputError("relevance_scores: empty dataset");
    const ModelConfig& cfg = model.config();
    const std::size_t n = total_neurons(cfg);
    const std::size_t per_layer = neurons_per_layer(cfg);
    const std::size_t d_ff = static_cast<std::size_t>(cfg.d_ff);

    std::vector<std::vector<double>> per_example(data.size());
    std::vector<std::size_t> tokens(data.size(), 0);
    parallel_for(data.size(), [&](std::size_t i) {
        EncodedExample e = encode_example(data[i]);
        ag::Tape tape;
        ForwardOptions fo;
        fo.tap_neurons = true;
        auto g = build_forward(tape, model, e.tokens, fo);
        ag::Var loss = ag::cross_entropy(g.logits, e.targets, ag::Reduction::sum);
        auto rec = tape.backward(loss);
        std::vector<double> s(n, 0.0);
        for (int l = 0; l < cfg.num_layers; ++l) {
            double* base = s.data() + static_cast<std::size_t>(l) * per_layer;
            accumulate_columns(rec.tap(activation_tap(l)), g.activations[static_cast<std::size_t>(l)].value(), base);
            if (!cfg.w1_only) {
                accumulate_columns(rec.tap(ffn_output_tap(l)), g.ffn_outputs[static_cast<std::size_t>(l)].value(),
                                   base + d_ff);
            }
        }
        for (int t : e.targets) tokens[i] += t >= 0 ? 1 : 0;
        per_example[i] = std::move(s);
    });

    RelevanceTable table;
    table.config = cfg;
    table.scores.assign(n, 0.0);
    table.aggregation = aggregation;
    table.dataset_id = dataset_id(data);
    for (std::size_t i : canonical_order(data)) {
        for (std::size_t k = 0; k < n; ++k) table.scores[k] += per_example[i][k];
        table.token_count += tokens[i];
    }
    if (aggregation == Aggregation::mean) {
        for (double& v : table.scores) v /= static_cast<double>(table.token_count);
    }
    for (double v : table.scores) {
        if (!std::isfinite(v)) throw NumericFault("relevance");
    }
    return table;
}

TaskNeuronSet TaskNeuronSet::prefix(double proportion) const {
    if (!(proportion > 0.0 && proportion <= 100.0)) {
        throw InputError("proportion must lie in (0, 100], got " + std::to_string(proportion));
    }
    if (neurons.empty()) throw InputError("prefix of an empty neuron set");
    auto m = static_cast<std::size_t>(std::ceil(proportion / 100.0 * static_cast<double>(neurons.size()) - 1e-9));
    m = std::clamp<std::size_t>(m, 1, neurons.size());
    TaskNeuronSet out = *this;
    out.neurons.resize(m);
    out.scores.resize(std::min(m, scores.size()));
    return out;
}

ColumnSet TaskNeuronSet::columns(const ModelConfig& cfg) const { return ColumnSet::of(cfg, neurons); }

std::vector<NeuronId> full_ranking(const RelevanceTable& table) {
    std::vector<std::size_t> idx(table.scores.size());
    std::iota(idx.begin(), idx.end(), 0);
    // flat index order is NeuronId order, so a stable sort breaks ties correctly
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return table.scores[a] > table.scores[b]; });
    std::vector<NeuronId> out;
    out.reserve(idx.size());
    for (std::size_t i : idx) out.push_back(neuron_at(table.config, i));
    return out;
}

namespace {

std::size_t quota(double k_percent, std::size_t n) {
    auto m = static_cast<std::size_t>(std::llround(k_percent / 100.0 * static_cast<double>(n)));
    return std::clamp<std::size_t>(m, 1, n);
}

}  // namespace

TaskNeuronSet select_top_k(const RelevanceTable& table, double k_percent, bool per_layer) {
    if (!(k_percent > 0.0 && k_percent <= 100.0)) {
        throw InputError("k_percent must lie in (0, 100], got " + std::to_string(k_percent));
    }
    const std::size_t n = table.scores.size();
    if (n != total_neurons(table.config)) throw ContractViolation("relevance table does not cover the inventory");
    auto ranking = full_ranking(table);
    TaskNeuronSet set;
    set.k_percent = k_percent;
    set.total_neurons = n;
    set.dataset_id = table.dataset_id;
    if (!per_layer) {
        ranking.resize(quota(k_percent, n));
    } else {
        const std::size_t layer_quota = quota(k_percent, neurons_per_layer(table.config));
        std::vector<std::size_t> taken(static_cast<std::size_t>(table.config.num_layers), 0);
        std::vector<NeuronId> kept;
        for (const auto& id : ranking) {
            auto& t = taken[static_cast<std::size_t>(id.layer)];
            if (t < layer_quota) {
                ++t;
                kept.push_back(id);
            }
        }
        ranking = std::move(kept);
    }
    set.neurons = std::move(ranking);
    for (const auto& id : set.neurons) set.scores.push_back(table.score(id));
    return set;
}

TaskNeuronSet random_neuron_set(const ModelConfig& cfg, std::size_t count, std::uint64_t seed) {
    const std::size_t n = total_neurons(cfg);
    if (count < 1 || count > n) throw InputError("random neuron set size must lie in [1, " + std::to_string(n) + "]");
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    Rng rng(Rng::derive(seed, 0x72616e646f6dULL));
    // partial Fisher-Yates
    for (std::size_t i = 0; i < count; ++i) {
        std::size_t j = i + rng.below(n - i);
        std::swap(idx[i], idx[j]);
    }
    idx.resize(count);
    std::sort(idx.begin(), idx.end());
    TaskNeuronSet set;
    set.k_percent = 100.0 * static_cast<double>(count) / static_cast<double>(n);
    set.total_neurons = n;
    set.dataset_id = "random";
    for (std::size_t i : idx) set.neurons.push_back(neuron_at(cfg, i));
    set.scores.assign(count, 0.0);
    return set;
}

double exact_loss_delta(const ModelState& model, const Dataset& data, const NeuronId& neuron) {
    check_neuron(model.config(), neuron);
    ColumnSet one(model.config());
    one.insert(neuron);
    const double base = dataset_loss(model, data);
    const double zeroed = dataset_loss(model, data, &one);
    return std::abs(zeroed - base);
}

nlohmann::ordered_json neuron_set_to_json(const TaskNeuronSet& set) {
    nlohmann::ordered_json j;
    j["k_percent"] = set.k_percent;
    j["total_neurons"] = set.total_neurons;
    auto arr = nlohmann::ordered_json::array();
    for (const auto& id : set.neurons) arr.push_back({id.layer, std::string(tag_name(id.tag)), id.index});
    j["neurons"] = arr;
    j["scores"] = set.scores;
    j["dataset_id"] = set.dataset_id;
    return j;
}

TaskNeuronSet neuron_set_from_json(const nlohmann::json& j) {
    TaskNeuronSet set;
    try {
        set.k_percent = j.at("k_percent").get<double>();
        set.total_neurons = j.at("total_neurons").get<std::size_t>();
        for (const auto& n : j.at("neurons")) {
            if (!n.is_array() || n.size() != 3) throw SchemaError("neuron entries must be [layer, tag, index]");
            set.neurons.push_back({n[0].get<int>(), parse_tag(n[1].get<std::string>()), n[2].get<int>()});
        }
        set.scores = j.at("scores").get<std::vector<double>>();
        set.dataset_id = j.value("dataset_id", std::string());
    } catch (const nlohmann::json::exception& e) {
        throw SchemaError(std::string("neuron set: ") + e.what());
    }
    if (set.scores.size() != set.neurons.size()) throw SchemaError("neuron set: neurons and scores differ in length");
    std::set<NeuronId> seen(set.neurons.begin(), set.neurons.end());
    if (seen.size() != set.neurons.size()) throw SchemaError("neuron set: duplicate neuron");
    return set;
}

void save_neuron_set(const TaskNeuronSet& set, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw FileError("cannot write " + path.string());
    auto j = neuron_set_to_json(set);
    out << j.dump() << "\n";
}

TaskNeuronSet load_neuron_set(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw FileError("cannot read neuron set " + path.string());
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw SchemaError("neuron set " + path.string() + ": " + e.what());
    }
    return neuron_set_from_json(j);
}

}  // namespace nlab
