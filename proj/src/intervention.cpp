// SPDX-License-Identifier: Apache-2.0
#include "neuronlab/intervention.hpp"

#include <algorithm>
#include <cstdio>
#include <sstream>

#include "neuronlab/error.hpp"

namespace nlab {

std::string_view mode_name(InterventionMode m) noexcept {
    switch (m) {
        case InterventionMode::deactivate_activation: return "deactivate-activation";
        case InterventionMode::deactivate_parameter: return "deactivate-parameter";
        case InterventionMode::finetune_masked: return "finetune-masked";
    }
    return "?";
}

InterventionMode parse_mode(std::string_view name) {
    for (auto m : {InterventionMode::deactivate_activation, InterventionMode::deactivate_parameter,
                   InterventionMode::finetune_masked}) {
        if (name == mode_name(m)) return m;
    }
    throw ConfigError("unknown intervention mode \"" + std::string(name) + "\"");
}

InferenceOptions Deactivated::inference(int max_new_tokens) const {
    InferenceOptions o;
    o.deactivated = mask ? &*mask : nullptr;
    o.max_new_tokens = max_new_tokens;
    return o;
}

ModelState zero_columns(const ModelState& model, const ColumnSet& columns) {
    ModelState out = model;
    const ModelConfig& cfg = model.config();
    for (int l = 0; l < cfg.num_layers; ++l) {
        auto w1 = columns.w1(l);
        Tensor& a = out.w1(l);
        for (std::size_t r = 0; r < a.rows(); ++r) {
            for (std::size_t c = 0; c < a.cols(); ++c) {
                if (w1[c]) a.at(r, c) = 0.0;
            }
        }
        auto w2 = columns.w2(l);
        Tensor& b = out.w2(l);
        for (std::size_t r = 0; r < b.rows(); ++r) {
            for (std::size_t c = 0; c < b.cols(); ++c) {
                if (w2[c]) b.at(r, c) = 0.0;
            }
        }
    }
    return out;
}

Deactivated deactivate(const ModelState& model, const InterventionPlan& plan) {
    if (plan.mode == InterventionMode::finetune_masked) {
        throw ContractViolation("deactivate: plan mode is finetune-masked");
    }
    ColumnSet cols = plan.subset().columns(model.config());
    if (plan.mode == InterventionMode::deactivate_parameter) return {zero_columns(model, cols), std::nullopt};
    return {model, std::move(cols)};
}

TrainResult masked_finetune(const ModelState& model, const Dataset& data, const InterventionPlan& plan,
                            const TrainHyperparams& hp) {
    if (plan.mode != InterventionMode::finetune_masked) {
        throw ContractViolation("masked_finetune: plan mode is not finetune-masked");
    }
    return train(model, data, TrainableSet::ffn(plan.subset().columns(model.config())), hp);
}

namespace {

std::optional<double> mean_over(const ModelState& model, const std::vector<EvalTask>& tasks, TaskKind kind) {
    double total = 0.0;
    int n = 0;
    for (const auto& t : tasks) {
        if (t.kind != kind) continue;
        total += evaluate_task(model, t.test, t.kind);
        ++n;
    }
    if (n == 0) return std::nullopt;
    return total / n;
}

}  // namespace

std::vector<SweepRow> sweep_proportions(const ModelState& model, const Dataset& train_data, const TaskNeuronSet& ranking,
                                        const std::vector<double>& proportions, const TrainHyperparams& hp,
                                        const EvalTask& in_domain, const std::vector<EvalTask>& out_of_domain) {
    if (proportions.empty()) throw InputError("sweep: no proportions");
    for (std::size_t i = 0; i < proportions.size(); ++i) {
        double p = proportions[i];
        if (!(p > 0.0 && p <= 100.0)) throw InputError("sweep: proportion " + std::to_string(p) + " outside (0, 100]");
        if (i && proportions[i - 1] >= p) throw InputError("sweep: proportions must be strictly increasing");
    }
    std::vector<SweepRow> rows;
    for (double p : proportions) {
        InterventionPlan plan{ranking, InterventionMode::finetune_masked, p};
        ModelState tuned = masked_finetune(model, train_data, plan, hp).model;
        SweepRow row;
        row.proportion = p;
        row.seed = hp.seed;
        row.id_metric = evaluate_task(tuned, in_domain.test, in_domain.kind);
        row.ood_cls_metric = mean_over(tuned, out_of_domain, TaskKind::classification);
        row.ood_gen_metric = mean_over(tuned, out_of_domain, TaskKind::generation);
        rows.push_back(row);
    }
    return rows;
}

namespace {

std::string num(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return buf;
}

}  // namespace

std::string sweep_csv(const std::vector<SweepRow>& rows) {
    std::ostringstream out;
    out << "proportion,id_metric,ood_cls_metric,ood_gen_metric,seed\n";
    for (const auto& r : rows) {
        out << num(r.proportion) << ',' << num(r.id_metric) << ',' << (r.ood_cls_metric ? num(*r.ood_cls_metric) : "")
            << ',' << (r.ood_gen_metric ? num(*r.ood_gen_metric) : "") << ',' << r.seed << '\n';
    }
    return out.str();
}

}  // namespace nlab
