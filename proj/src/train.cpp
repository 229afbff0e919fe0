// SPDX-License-Identifier: Apache-2.0
#include "neuronlab/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "neuronlab/parallel.hpp"
#include "neuronlab/rng.hpp"

namespace nlab {

void TrainHyperparams::validate() const {
    if (steps < 0) throw ConfigError("hyperparams: steps must be >= 0");
    if (batch_size < 1) throw ConfigError("hyperparams: batch_size must be >= 1");
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) throw ConfigError("hyperparams: learning_rate must be >= 0");
    if (!(grad_clip >= 0.0)) throw ConfigError("hyperparams: grad_clip must be >= 0");
}

void to_json(nlohmann::json& j, const TrainHyperparams& h) {
    j = nlohmann::json{{"steps", h.steps},
                       {"batch_size", h.batch_size},
                       {"learning_rate", h.learning_rate},
                       {"seed", h.seed},
                       {"optimizer", h.optimizer == OptimizerKind::sgd ? "sgd" : "adam"},
                       {"grad_clip", h.grad_clip}};
}

void from_json(const nlohmann::json& j, TrainHyperparams& h) {
    TrainHyperparams d;
    h.steps = j.value("steps", d.steps);
    h.batch_size = j.value("batch_size", d.batch_size);
    h.learning_rate = j.value("learning_rate", d.learning_rate);
    h.seed = j.value("seed", d.seed);
    auto opt = j.value("optimizer", std::string("sgd"));
    if (opt != "sgd" && opt != "adam") throw ConfigError("hyperparams: optimizer must be sgd or adam");
    h.optimizer = opt == "sgd" ? OptimizerKind::sgd : OptimizerKind::adam;
    h.grad_clip = j.value("grad_clip", d.grad_clip);
}

namespace {

struct Slot {
    std::string name;
    std::vector<char> column_mask;  // empty: every coordinate trainable
    Tensor m, v;                    // adam moments
};

std::vector<Slot> trainable_slots(const ModelState& model, const TrainableSet& trainable) {
    std::vector<Slot> slots;
    const auto& cfg = model.config();
    if (trainable.scope == TrainableSet::Scope::all_parameters) {
        for (const auto& [name, t] : model.params()) slots.push_back({name, {}, {}, {}});
        return slots;
    }
    for (int l = 0; l < cfg.num_layers; ++l) {
        auto w1 = trainable.columns.w1(l);
        if (std::any_of(w1.begin(), w1.end(), [](char c) { return c != 0; })) {
            slots.push_back({ModelState::w1_name(l), std::vector<char>(w1.begin(), w1.end()), {}, {}});
        }
        auto w2 = trainable.columns.w2(l);
        if (std::any_of(w2.begin(), w2.end(), [](char c) { return c != 0; })) {
            slots.push_back({ModelState::w2_name(l), std::vector<char>(w2.begin(), w2.end()), {}, {}});
        }
    }
    return slots;
}

constexpr std::size_t kPackSize = 8;

struct ExampleGrad {
    std::map<std::string, Tensor> grads;
    double loss_sum = 0.0;
    std::size_t tokens = 0;
};

std::size_t target_count(const EncodedExample& e) {
    return static_cast<std::size_t>(std::count_if(e.targets.begin(), e.targets.end(), [](int t) { return t >= 0; }));
}

}  // namespace

TrainResult train(const ModelState& init, const Dataset& data, const TrainableSet& trainable, const TrainHyperparams& hp) {
    hp.validate();
    if (data.empty()) throw InputError("train: empty dataset");
    if (trainable.scope == TrainableSet::Scope::ffn_columns && trainable.columns.empty()) {
        throw InputError("train: empty trainable column set");
    }
    std::vector<EncodedExample> encoded;
    encoded.reserve(data.size());
    for (const auto& ex : data) encoded.push_back(encode_example(ex));

    TrainResult result{init, {}};
    ModelState& model = result.model;
    auto slots = trainable_slots(model, trainable);
    std::set<std::string> tracked;
    for (const auto& s : slots) tracked.insert(s.name);
    if (hp.optimizer == OptimizerKind::adam) {
        for (auto& s : slots) {
            s.m = Tensor(model.param(s.name).shape(), 0.0);
            s.v = Tensor(model.param(s.name).shape(), 0.0);
        }
    }

    Rng rng(Rng::derive(hp.seed, 0x747261696eULL));
    std::vector<std::size_t> order(encoded.size());
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order);
    std::size_t cursor = 0;

    const double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
    for (int step = 0; step < hp.steps; ++step) {
        std::vector<std::size_t> batch(static_cast<std::size_t>(hp.batch_size));
        for (auto& b : batch) {
            if (cursor == order.size()) {
                rng.shuffle(order);
                cursor = 0;
            }
            b = order[cursor++];
        }

        // fixed-size packs keep the arithmetic independent of the worker count
        const std::size_t packs = (batch.size() + kPackSize - 1) / kPackSize;
        std::vector<ExampleGrad> parts(packs);
        try {
            parallel_for(packs, [&](std::size_t pi) {
                std::vector<std::span<const int>> seqs;
                std::vector<int> targets;
                for (std::size_t i = pi * kPackSize; i < std::min(batch.size(), (pi + 1) * kPackSize); ++i) {
                    const auto& e = encoded[batch[i]];
                    seqs.emplace_back(e.tokens);
                    targets.insert(targets.end(), e.targets.begin(), e.targets.end());
                    parts[pi].tokens += target_count(e);
                }
                ag::Tape tape;
                ForwardOptions fo;
                fo.track_params = true;
                fo.track_filter = [&](const std::string& n) { return tracked.contains(n); };
                auto g = build_forward_packed(tape, model, seqs, fo);
                ag::Var loss = ag::cross_entropy(g.logits, targets, ag::Reduction::sum);
                parts[pi].loss_sum = loss.value().item();
                parts[pi].grads = std::move(tape.backward(loss).params);
            });
        } catch (const NumericFault& f) {
            throw TrainingDiverged(f.op(), step, model);
        }

        double loss_sum = 0.0;
        std::size_t tokens = 0;
        for (const auto& p : parts) {
            loss_sum += p.loss_sum;
            tokens += p.tokens;
        }
        const double mean_loss = loss_sum / static_cast<double>(tokens);
        if (!std::isfinite(mean_loss)) throw TrainingDiverged("cross_entropy", step, model);
        result.loss_history.push_back(mean_loss);

        // reduce in batch order, then keep only trainable coordinates
        std::vector<Tensor> grads;
        double sq = 0.0;
        for (const auto& s : slots) {
            Tensor g = parts[0].grads.at(s.name);
            for (std::size_t i = 1; i < parts.size(); ++i) {
                const Tensor& gi = parts[i].grads.at(s.name);
                for (std::size_t k = 0; k < g.size(); ++k) g[k] += gi[k];
            }
            const std::size_t cols = g.cols();
            for (std::size_t k = 0; k < g.size(); ++k) {
                if (!s.column_mask.empty() && !s.column_mask[k % cols]) {
                    g[k] = 0.0;
                    continue;
                }
                g[k] /= static_cast<double>(tokens);
                sq += g[k] * g[k];
            }
            grads.push_back(std::move(g));
        }
        const double norm = std::sqrt(sq);
        const double clip = (hp.grad_clip > 0.0 && norm > hp.grad_clip) ? hp.grad_clip / norm : 1.0;

        const double bc1 = 1.0 - std::pow(beta1, step + 1);
        const double bc2 = 1.0 - std::pow(beta2, step + 1);
        for (std::size_t si = 0; si < slots.size(); ++si) {
            Slot& s = slots[si];
            Tensor& w = model.param(s.name);
            const Tensor& g = grads[si];
            const std::size_t cols = w.cols();
            for (std::size_t k = 0; k < w.size(); ++k) {
                if (!s.column_mask.empty() && !s.column_mask[k % cols]) continue;
                const double gk = g[k] * clip;
                if (hp.optimizer == OptimizerKind::sgd) {
                    w[k] -= hp.learning_rate * gk;
                } else {
                    s.m[k] = beta1 * s.m[k] + (1.0 - beta1) * gk;
                    s.v[k] = beta2 * s.v[k] + (1.0 - beta2) * gk * gk;
                    w[k] -= hp.learning_rate * (s.m[k] / bc1) / (std::sqrt(s.v[k] / bc2) + adam_eps);
                }
            }
            if (!w.all_finite()) throw TrainingDiverged("update:" + s.name, step, result.model);
        }
    }
    return result;
}

// -- evaluation ----------------------------------------------------------------

namespace {

int argmax_row(const Tensor& logits, std::size_t row) {
    const std::size_t cols = logits.cols();
    const double* r = logits.ptr() + row * cols;
    return static_cast<int>(std::max_element(r, r + cols) - r);
}

Tensor forward_logits(const ModelState& model, std::span<const int> tokens, const ColumnSet* deactivated) {
    ag::Tape tape;
    ForwardOptions fo;
    fo.deactivated = deactivated;
    return build_forward(tape, model, tokens, fo).logits.value();
}

}  // namespace

std::vector<int> greedy_decode(const ModelState& model, std::vector<int> prompt, const InferenceOptions& opts) {
    const auto& vocab = Vocabulary::synthetic();
    std::vector<int> out;
    const std::size_t limit = static_cast<std::size_t>(model.config().max_seq_len);
    for (int i = 0; i < opts.max_new_tokens && prompt.size() < limit; ++i) {
        Tensor logits = forward_logits(model, prompt, opts.deactivated);
        int next = argmax_row(logits, logits.rows() - 1);
        if (next == vocab.eos()) break;
        out.push_back(next);
        prompt.push_back(next);
    }
    return out;
}

double evaluate_task(const ModelState& model, const Dataset& test, TaskKind kind, const InferenceOptions& opts) {
    if (test.empty()) throw InputError("evaluate_task: empty evaluation set");
    const auto& vocab = Vocabulary::synthetic();
    std::vector<double> scores(test.size(), 0.0);
    parallel_for(test.size(), [&](std::size_t i) {
        EncodedExample e = encode_example(test[i]);
        if (kind == TaskKind::classification) {
            Tensor logits = forward_logits(model, e.prompt, opts.deactivated);
            int pred = argmax_row(logits, logits.rows() - 1);
            scores[i] = (e.answer.size() == 1 && pred == e.answer[0]) ? 1.0 : 0.0;
        } else {
            auto gen = greedy_decode(model, e.prompt, opts);
            if (gen.empty()) {
                scores[i] = 0.0;
            } else {
                std::vector<std::string> cand, ref;
                // ids past the vocabulary can be emitted when vocab_size exceeds it; they match nothing
                for (int t : gen) cand.push_back(t < vocab.size() ? vocab.word(t) : "<unk" + std::to_string(t) + ">");
                for (int t : e.answer) ref.push_back(vocab.word(t));
                scores[i] = rouge_l(cand, ref);
            }
        }
    });
    double total = 0.0;
    for (double s : scores) total += s;
    return total / static_cast<double>(test.size());
}

double dataset_loss(const ModelState& model, const Dataset& data, const ColumnSet* deactivated) {
    if (data.empty()) throw InputError("dataset_loss: empty dataset");
    std::vector<double> sums(data.size(), 0.0);
    std::vector<std::size_t> counts(data.size(), 0);
    parallel_for(data.size(), [&](std::size_t i) {
        EncodedExample e = encode_example(data[i]);
        ag::Tape tape;
        ForwardOptions fo;
        fo.deactivated = deactivated;
        auto g = build_forward(tape, model, e.tokens, fo);
        sums[i] = ag::cross_entropy(g.logits, e.targets, ag::Reduction::sum).value().item();
        counts[i] = target_count(e);
    });
    double total = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < data.size(); ++i) {
        total += sums[i];
        n += counts[i];
    }
    return total / static_cast<double>(n);
}

}  // namespace nlab
