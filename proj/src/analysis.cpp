// SPDX-License-Identifier: Apache-2.0
#include "neuronlab/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <set>
#include <sstream>

#include <boost/math/distributions/normal.hpp>
#include <boost/math/distributions/students_t.hpp>

#include "neuronlab/error.hpp"

namespace nlab {

double overlap_rate(const std::vector<NeuronId>& x, const std::vector<NeuronId>& y) {
    std::set<NeuronId> a(x.begin(), x.end()), b(y.begin(), y.end());
    if (a.empty() && b.empty()) throw InputError("overlap_rate: both sets are empty");
    std::size_t inter = 0;
    for (const auto& id : a) inter += b.contains(id) ? 1 : 0;
    const std::size_t uni = a.size() + b.size() - inter;
    return static_cast<double>(inter) / static_cast<double>(uni);
}

namespace {

// Mean of the W1 columns of `ids` at `layer`, or empty when there are none.
std::vector<double> mean_w1_column(const ModelState& model, const std::vector<NeuronId>& ids, int layer) {
    const Tensor& w1 = model.w1(layer);
    const std::size_t d = w1.rows();
    std::vector<double> sum(d, 0.0);
    std::set<int> cols;
    for (const auto& id : ids) {
        check_neuron(model.config(), id);
        if (id.layer == layer && id.tag == MatrixTag::W1) cols.insert(id.index);
    }
    if (cols.empty()) return {};
    // ascending column order makes the sum independent of set order
    for (int c : cols) {
        for (std::size_t r = 0; r < d; ++r) sum[r] += w1.at(r, static_cast<std::size_t>(c));
    }
    for (double& v : sum) v /= static_cast<double>(cols.size());
    return sum;
}

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if (na == 0.0 || nb == 0.0) throw UndefinedValue("cosine similarity of a zero-norm vector");
    return std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0);
}

}  // namespace

std::optional<double> layer_param_similarity(const ModelState& model, const std::vector<NeuronId>& a,
                                             const std::vector<NeuronId>& b, int layer) {
    if (layer < 0 || layer >= model.config().num_layers) throw InputError("layer " + std::to_string(layer) + " out of range");
    auto ma = mean_w1_column(model, a, layer);
    auto mb = mean_w1_column(model, b, layer);
    if (ma.empty() || mb.empty()) return std::nullopt;
    return cosine(ma, mb);
}

std::vector<std::optional<double>> similarity_profile(const ModelState& model, const std::vector<NeuronId>& a,
                                                      const std::vector<NeuronId>& b) {
    std::vector<std::optional<double>> out;
    for (int l = 0; l < model.config().num_layers; ++l) out.push_back(layer_param_similarity(model, a, b, l));
    return out;
}

std::optional<double> profile_mean(const std::vector<std::optional<double>>& profile) {
    double s = 0.0;
    int n = 0;
    for (const auto& v : profile) {
        if (v) {
            s += *v;
            ++n;
        }
    }
    if (n == 0) return std::nullopt;
    return s / n;
}

std::string_view method_name(CorrelationMethod m) noexcept { return m == CorrelationMethod::pearson ? "pearson" : "spearman"; }

namespace {

void check_pair(const std::vector<double>& xs, const std::vector<double>& ys) {
    if (xs.size() != ys.size()) throw InputError("correlation: sequences differ in length");
    if (xs.size() < 3) throw InputError("correlation: need at least 3 points");
    for (std::size_t i = 0; i < xs.size(); ++i) {
        if (!std::isfinite(xs[i]) || !std::isfinite(ys[i])) throw InputError("correlation: non-finite value");
    }
}

double pearson_r(const std::vector<double>& xs, const std::vector<double>& ys) {
    const double n = static_cast<double>(xs.size());
    const double mx = std::accumulate(xs.begin(), xs.end(), 0.0) / n;
    const double my = std::accumulate(ys.begin(), ys.end(), 0.0) / n;
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        sxy += (xs[i] - mx) * (ys[i] - my);
        sxx += (xs[i] - mx) * (xs[i] - mx);
        syy += (ys[i] - my) * (ys[i] - my);
    }
    if (sxx == 0.0 || syy == 0.0) throw UndefinedValue("correlation of a constant sequence");
    return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

}  // namespace

CorrelationResult pearson(const std::vector<double>& xs, const std::vector<double>& ys) {
    check_pair(xs, ys);
    CorrelationResult out;
    out.method = CorrelationMethod::pearson;
    out.r = pearson_r(xs, ys);
    const double df = static_cast<double>(xs.size()) - 2.0;
    if (std::abs(out.r) >= 1.0) {
        out.p = 0.0;
    } else {
        const double t = out.r * std::sqrt(df / (1.0 - out.r * out.r));
        boost::math::students_t dist(df);
        out.p = std::min(1.0, 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(t))));
    }
    return out;
}

std::vector<double> average_ranks(const std::vector<double>& xs) {
    std::vector<std::size_t> idx(xs.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return xs[a] < xs[b]; });
    std::vector<double> ranks(xs.size());
    std::size_t i = 0;
    while (i < idx.size()) {
        std::size_t j = i;
        while (j + 1 < idx.size() && xs[idx[j + 1]] == xs[idx[i]]) ++j;
        const double r = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
        for (std::size_t k = i; k <= j; ++k) ranks[idx[k]] = r;
        i = j + 1;
    }
    return ranks;
}

CorrelationResult spearman(const std::vector<double>& xs, const std::vector<double>& ys) {
    check_pair(xs, ys);
    const auto rx = average_ranks(xs);
    const auto ry = average_ranks(ys);
    CorrelationResult out;
    out.method = CorrelationMethod::spearman;
    out.r = pearson_r(rx, ry);
    const std::size_t n = xs.size();
    if (n <= 10) {
        // exact null distribution: every pairing of the y ranks with the x ranks
        std::vector<double> perm = ry;
        std::sort(perm.begin(), perm.end());
        const double observed = std::abs(out.r) - 1e-12;
        std::size_t hits = 0, total = 0;
        do {
            ++total;
            if (std::abs(pearson_r(rx, perm)) >= observed) ++hits;
        } while (std::next_permutation(perm.begin(), perm.end()));
        out.p = static_cast<double>(hits) / static_cast<double>(total);
    } else {
        const double z = std::abs(out.r) * std::sqrt(static_cast<double>(n) - 1.0);
        boost::math::normal dist;
        out.p = std::min(1.0, 2.0 * boost::math::cdf(boost::math::complement(dist, z)));
    }
    return out;
}

std::vector<TaskStudy> similarity_generalization_study(const StudyInput& in) {
    const std::size_t m = in.models.size();
    const std::size_t t = in.test_tasks.size();
    if (m == 0 || t == 0) throw InputError("similarity study: no models or no test tasks");
    if (in.trained_task.size() != m || in.sets.size() != m || in.scores.size() != m) {
        throw ContractViolation("similarity study: per-model inputs differ in length");
    }
    for (std::size_t i = 0; i < m; ++i) {
        if (in.sets[i].size() != t || in.scores[i].size() != t) {
            throw ContractViolation("similarity study: model " + std::to_string(i) + " does not cover every test task");
        }
        if (in.trained_task[i] >= t) throw ContractViolation("similarity study: trained task index out of range");
    }
    std::vector<TaskStudy> out;
    for (std::size_t j = 0; j < t; ++j) {
        TaskStudy s;
        s.test_task = in.test_tasks[j];
        const int layers = in.models[0].config().num_layers;
        std::vector<double> sum(static_cast<std::size_t>(layers), 0.0);
        std::vector<int> count(static_cast<std::size_t>(layers), 0);
        for (std::size_t i = 0; i < m; ++i) {
            const auto& own = in.sets[i][in.trained_task[i]].neurons;
            auto prof = similarity_profile(in.models[i], own, in.sets[i][j].neurons);
            for (std::size_t l = 0; l < prof.size(); ++l) {
                if (prof[l]) {
                    sum[l] += *prof[l];
                    ++count[l];
                }
            }
            s.similarities.push_back(profile_mean(prof));
            s.scores.push_back(in.scores[i][j]);
        }
        for (std::size_t l = 0; l < sum.size(); ++l) {
            s.profile.push_back(count[l] ? std::optional<double>(sum[l] / count[l]) : std::nullopt);
        }
        std::vector<double> xs, ys;
        for (std::size_t i = 0; i < m; ++i) {
            if (s.similarities[i]) {
                xs.push_back(*s.similarities[i]);
                ys.push_back(s.scores[i]);
            }
        }
        try {
            s.pearson = pearson(xs, ys);
            s.spearman = spearman(xs, ys);
        } catch (const UndefinedValue& e) {
            s.pearson.reset();
            s.spearman.reset();
            s.note = e.what();
        } catch (const InputError& e) {
            s.note = e.what();
        }
        out.push_back(std::move(s));
    }
    return out;
}

namespace {

std::string num(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return buf;
}

}  // namespace

std::string profile_csv(const std::vector<TaskStudy>& study) {
    std::ostringstream out;
    out << "layer,similarity,test_task\n";
    for (const auto& s : study) {
        for (std::size_t l = 0; l < s.profile.size(); ++l) {
            out << l << ',' << (s.profile[l] ? num(*s.profile[l]) : "") << ',' << s.test_task << '\n';
        }
    }
    return out.str();
}

nlohmann::ordered_json correlation_json(const std::vector<TaskStudy>& study) {
    auto arr = nlohmann::ordered_json::array();
    for (const auto& s : study) {
        for (const auto* c : {&s.pearson, &s.spearman}) {
            if (!*c) continue;
            nlohmann::ordered_json j;
            j["task"] = s.test_task;
            j["method"] = std::string(method_name((*c)->method));
            j["r"] = (*c)->r;
            j["p"] = (*c)->p;
            arr.push_back(j);
        }
        if (!s.pearson && !s.spearman) {
            nlohmann::ordered_json j;
            j["task"] = s.test_task;
            j["method"] = nullptr;
            j["r"] = nullptr;
            j["p"] = nullptr;
            j["note"] = s.note;
            arr.push_back(j);
        }
    }
    return arr;
}

}  // namespace nlab
