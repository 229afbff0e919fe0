// SPDX-License-Identifier: Apache-2.0
#include "neuronlab/continual.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

#include "neuronlab/error.hpp"
#include "neuronlab/rng.hpp"

namespace nlab {

void TaskSequence::validate() const {
    if (tasks.size() < 2) throw InputError("task sequence needs at least 2 tasks");
    for (const auto& t : tasks) {
        if (t.train.empty() || t.test.empty()) throw InputError("task " + t.name + " lacks a train or test split");
        if (t.neurons.neurons.empty()) throw InputError("task " + t.name + " has no neuron set");
    }
}

TaskVector task_vector(const ModelState& reference, const Dataset& data, std::size_t n_samples, std::uint64_t seed,
                       bool with_replacement) {
    if (data.empty()) throw InputError("task_vector: empty dataset");
    if (n_samples < 1) throw InputError("task_vector: n_samples must be >= 1");
    if (data.size() < n_samples && !with_replacement) {
        throw InputError("task_vector: dataset has " + std::to_string(data.size()) + " examples, fewer than " +
                         std::to_string(n_samples) + " samples; sampling with replacement must be requested");
    }
    Rng rng(Rng::derive(seed, 0x7665637472ULL));
    std::vector<std::size_t> picks;
    if (data.size() >= n_samples) {
        std::vector<std::size_t> idx(data.size());
        std::iota(idx.begin(), idx.end(), 0);
        for (std::size_t i = 0; i < n_samples; ++i) std::swap(idx[i], idx[i + rng.below(idx.size() - i)]);
        picks.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_samples));
    } else {
        for (std::size_t i = 0; i < n_samples; ++i) picks.push_back(rng.below(data.size()));
    }
    const std::size_t d = static_cast<std::size_t>(reference.config().d_model);
    TaskVector tv;
    tv.values.assign(d, 0.0);
    tv.samples = n_samples;
    for (std::size_t i : picks) {
        auto tr = forward_with_trace(reference, encode_example(data[i]).prompt);
        const Tensor& f = tr.features;
        std::vector<double> mean(d, 0.0);
        for (std::size_t r = 0; r < f.rows(); ++r) {
            for (std::size_t c = 0; c < d; ++c) mean[c] += f.at(r, c);
        }
        for (std::size_t c = 0; c < d; ++c) tv.values[c] += mean[c] / static_cast<double>(f.rows());
    }
    for (double& v : tv.values) v /= static_cast<double>(n_samples);
    return tv;
}

std::vector<double> similarity_weights(const TaskVector& test, const std::vector<TaskVector>& trained) {
    if (trained.empty()) throw InputError("similarity_weights: no trained tasks");
    std::vector<double> sims;
    for (const auto& t : trained) {
        if (t.values.size() != test.values.size()) throw ContractViolation("similarity_weights: task vectors differ in length");
        double dot = 0.0, na = 0.0, nb = 0.0;
        for (std::size_t i = 0; i < t.values.size(); ++i) {
            dot += test.values[i] * t.values[i];
            na += test.values[i] * test.values[i];
            nb += t.values[i] * t.values[i];
        }
        if (na == 0.0 || nb == 0.0) throw UndefinedValue("similarity_weights: zero-norm task vector");
        sims.push_back(dot / (std::sqrt(na) * std::sqrt(nb)));
    }
    const double mx = *std::max_element(sims.begin(), sims.end());
    double z = 0.0;
    for (double& s : sims) {
        s = std::exp(s - mx);
        z += s;
    }
    for (double& s : sims) s /= z;
    return sims;
}

namespace {

// Per column of one matrix: the scale it receives, or nullopt when unclaimed.
struct Claim {
    double best_score = -1.0;
    double weight = 1.0;
    double score_sum = 0.0;
    double weighted_sum = 0.0;
    bool claimed = false;
};

void scale_column(Tensor& m, std::size_t col, double s) {
    for (std::size_t r = 0; r < m.rows(); ++r) m.at(r, col) *= s;
}

}  // namespace

ModelState weighted_merge(const ModelState& model, const std::vector<TaskNeuronSet>& sets,
                          const std::vector<double>& weights, OverlapRule rule) {
    if (sets.size() != weights.size()) {
        throw ContractViolation("weighted_merge: " + std::to_string(weights.size()) + " weights for " +
                                std::to_string(sets.size()) + " neuron sets");
    }
    const ModelConfig& cfg = model.config();
    std::vector<Claim> claims(total_neurons(cfg));
    for (std::size_t k = 0; k < sets.size(); ++k) {
        const auto& s = sets[k];
        for (std::size_t m = 0; m < s.neurons.size(); ++m) {
            check_neuron(cfg, s.neurons[m]);
            const double score = m < s.scores.size() ? s.scores[m] : 0.0;
            Claim& c = claims[flat_index(cfg, s.neurons[m])];
            // strict comparison: on equal scores the earlier task keeps the column
            if (!c.claimed || score > c.best_score) {
                c.best_score = score;
                c.weight = weights[k];
            }
            c.claimed = true;
            c.score_sum += score;
            c.weighted_sum += score * weights[k];
        }
    }
    ModelState out = model;
    for (std::size_t f = 0; f < claims.size(); ++f) {
        const Claim& c = claims[f];
        if (!c.claimed) continue;
        double s = c.weight;
        if (rule == OverlapRule::relevance_weighted && c.score_sum > 0.0) s = c.weighted_sum / c.score_sum;
        NeuronId id = neuron_at(cfg, f);
        Tensor& m = id.tag == MatrixTag::W1 ? out.w1(id.layer) : out.w2(id.layer);
        scale_column(m, static_cast<std::size_t>(id.index), s);
    }
    return out;
}

double norm_shrinkage(const ModelState& trained, const ModelState& merged, const std::vector<TaskNeuronSet>& sets) {
    const ModelConfig& cfg = trained.config();
    ColumnSet cols(cfg);
    for (const auto& s : sets) {
        for (const auto& id : s.neurons) cols.insert(id);
    }
    double total = 0.0;
    std::size_t n = 0;
    for (const auto& id : cols.members()) {
        const Tensor& a = id.tag == MatrixTag::W1 ? trained.w1(id.layer) : trained.w2(id.layer);
        const Tensor& b = id.tag == MatrixTag::W1 ? merged.w1(id.layer) : merged.w2(id.layer);
        double na = 0.0, nb = 0.0;
        for (std::size_t r = 0; r < a.rows(); ++r) {
            const double x = a.at(r, static_cast<std::size_t>(id.index));
            const double y = b.at(r, static_cast<std::size_t>(id.index));
            na += x * x;
            nb += y * y;
        }
        if (na == 0.0) continue;
        total += std::sqrt(nb / na);
        ++n;
    }
    return n ? total / static_cast<double>(n) : 1.0;
}

double cl_metric(const AccuracyMatrix& m) {
    const std::size_t n = m.size();
    if (n == 0) throw InputError("cl_metric: empty matrix");
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        if (!m.a[i][n - 1]) throw InputError("cl_metric: final stage is missing task " + std::to_string(i + 1));
        s += *m.a[i][n - 1];
    }
    return s / static_cast<double>(n);
}

double fg_metric(const AccuracyMatrix& m, std::size_t stage) {
    if (stage < 2 || stage > m.size()) throw InputError("fg_metric: stage must lie in [2, N]");
    double s = 0.0;
    for (std::size_t i = 0; i + 1 < stage; ++i) {
        if (!m.alone[i]) throw InputError("fg_metric: missing per-task accuracy A_" + std::to_string(i + 1));
        if (*m.alone[i] == 0.0) throw InputError("fg_metric: A_" + std::to_string(i + 1) + " is 0");
        if (!m.a[i][stage - 1]) throw InputError("fg_metric: missing a_{" + std::to_string(i + 1) + "," + std::to_string(stage) + "}");
        s += *m.a[i][stage - 1] / *m.alone[i];
    }
    return 100.0 * s / static_cast<double>(stage - 1);
}

namespace {

double evaluate(const ModelState& model, const SequenceTask& t, int max_new_tokens) {
    InferenceOptions o;
    o.max_new_tokens = max_new_tokens;
    return evaluate_task(model, t.test, t.kind, o);
}

std::vector<std::string> overlap_warnings(const TaskSequence& seq, std::size_t n, const ModelConfig& cfg) {
    std::vector<std::string> out;
    ColumnSet now = seq.tasks[n].neurons.columns(cfg);
    for (std::size_t m = 0; m < n; ++m) {
        std::size_t shared = 0;
        for (const auto& id : seq.tasks[m].neurons.neurons) shared += now.contains(id) ? 1 : 0;
        if (shared) {
            out.push_back("tasks " + seq.tasks[m].name + " and " + seq.tasks[n].name + " share " +
                          std::to_string(shared) + " neurons");
        }
    }
    return out;
}

ContinualRun run_sequence(const ModelState& base, const TaskSequence& seq, const TrainHyperparams& hp,
                          const ContinualOptions& opts, bool masked) {
    seq.validate();
    const std::size_t n = seq.tasks.size();
    if (opts.task_vectors && opts.task_vectors->size() != n) {
        throw ContractViolation("continual: one task vector per task is required");
    }
    const ModelConfig& cfg = base.config();
    ContinualRun run{base, {}, AccuracyMatrix(n), std::nullopt, {}, {}};
    if (opts.task_vectors) run.weighted = AccuracyMatrix(n);
    std::vector<TaskNeuronSet> sets;
    for (const auto& t : seq.tasks) sets.push_back(t.neurons);

    ModelState model = base;
    for (std::size_t stage = 0; stage < n; ++stage) {
        const SequenceTask& task = seq.tasks[stage];
        if (masked) {
            auto w = overlap_warnings(seq, stage, cfg);
            run.warnings.insert(run.warnings.end(), w.begin(), w.end());
            model = train(model, task.train, TrainableSet::ffn(task.neurons.columns(cfg)), hp).model;
        } else {
            model = train(model, task.train, TrainableSet::everything(), hp).model;
        }
        for (std::size_t i = 0; i <= stage; ++i) run.matrix.a[i][stage] = evaluate(model, seq.tasks[i], opts.max_new_tokens);
        if (opts.task_vectors) {
            const auto& tv = *opts.task_vectors;
            std::vector<TaskVector> trained(tv.begin(), tv.begin() + static_cast<std::ptrdiff_t>(stage + 1));
            std::vector<TaskNeuronSet> trained_sets(sets.begin(), sets.begin() + static_cast<std::ptrdiff_t>(stage + 1));
            double shrink = 0.0;
            for (std::size_t j = 0; j <= stage; ++j) {
                auto weights = similarity_weights(tv[j], trained);
                ModelState merged = weighted_merge(model, trained_sets, weights, opts.overlap_rule);
                shrink += norm_shrinkage(model, merged, trained_sets);
                run.weighted->a[j][stage] = evaluate(merged, seq.tasks[j], opts.max_new_tokens);
            }
            run.shrinkage.push_back(shrink / static_cast<double>(stage + 1));
        }
        run.stages.push_back(model);
    }
    run.final_model = model;
    return run;
}

}  // namespace

ContinualRun ncft_train(const ModelState& base, const TaskSequence& seq, const TrainHyperparams& hp,
                        const ContinualOptions& opts) {
    return run_sequence(base, seq, hp, opts, true);
}

ContinualRun seqft_train(const ModelState& base, const TaskSequence& seq, const TrainHyperparams& hp,
                         const ContinualOptions& opts) {
    ContinualOptions plain = opts;
    plain.task_vectors.reset();
    return run_sequence(base, seq, hp, plain, false);
}

std::vector<double> per_task_ft(const ModelState& base, const TaskSequence& seq, const TrainHyperparams& hp,
                                int max_new_tokens) {
    if (seq.tasks.empty()) throw InputError("per_task_ft: empty sequence");
    std::vector<double> out;
    for (const auto& t : seq.tasks) {
        if (t.train.empty() || t.test.empty()) throw InputError("task " + t.name + " lacks a train or test split");
        ModelState m = train(base, t.train, TrainableSet::everything(), hp).model;
        out.push_back(evaluate(m, t, max_new_tokens));
    }
    return out;
}

nlohmann::ordered_json continual_report(const std::string& order_label, const std::string& method,
                                        const AccuracyMatrix& m) {
    nlohmann::ordered_json j;
    j["order_label"] = order_label;
    j["method"] = method;
    auto rows = nlohmann::ordered_json::array();
    for (const auto& row : m.a) {
        auto r = nlohmann::ordered_json::array();
        for (const auto& v : row) r.push_back(v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json(nullptr));
        rows.push_back(r);
    }
    j["matrix"] = rows;
    auto alone = nlohmann::ordered_json::array();
    for (const auto& v : m.alone) alone.push_back(v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json(nullptr));
    j["A"] = alone;
    j["CL"] = cl_metric(m);
    auto fg = nlohmann::ordered_json::array();
    for (std::size_t s = 2; s <= m.size(); ++s) {
        try {
            fg.push_back(fg_metric(m, s));
        } catch (const InputError&) {
            fg.push_back(nullptr);
        }
    }
    j["FG"] = fg;
    return j;
}

std::string fg_csv_rows(const std::string& order_label, const std::string& method, const AccuracyMatrix& m) {
    std::ostringstream out;
    for (std::size_t s = 2; s <= m.size(); ++s) {
        out << order_label << ',' << method << ',' << s << ',';
        try {
            char buf[64];
            std::snprintf(buf, sizeof buf, "%.6f", fg_metric(m, s));
            out << buf;
        } catch (const InputError&) {
        }
        out << '\n';
    }
    return out.str();
}

}  // namespace nlab
