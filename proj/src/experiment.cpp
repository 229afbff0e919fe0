// SPDX-License-Identifier: Apache-2.0
#include "neuronlab/experiment.hpp"

#include <algorithm>
#include <cerrno>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include "neuronlab/analysis.hpp"
#include "neuronlab/checkpoint.hpp"
#include "neuronlab/error.hpp"
#include "neuronlab/rng.hpp"

namespace nlab {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

namespace {

TrainHyperparams adam(int steps) {
    TrainHyperparams h;
    h.steps = steps;
    h.batch_size = 16;
    h.learning_rate = 1e-3;
    h.optimizer = OptimizerKind::adam;
    return h;
}

std::string_view rule_name(OverlapRule r) {
    return r == OverlapRule::highest_relevance ? "highest_relevance" : "relevance_weighted";
}

OverlapRule parse_rule(std::string_view s) {
    if (s == "highest_relevance") return OverlapRule::highest_relevance;
    if (s == "relevance_weighted") return OverlapRule::relevance_weighted;
    throw ConfigError("unknown overlap rule '" + std::string(s) + "'");
}

const std::set<std::string> kMethods = {"ncft", "seqft", "wncft", "per-task-ft"};

void reject_unknown(const json& j, std::initializer_list<std::string_view> keys, const std::string& where) {
    if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
    for (const auto& [k, v] : j.items()) {
        if (std::find(keys.begin(), keys.end(), k) == keys.end()) {
            throw ConfigError("unknown key '" + k + "' in " + where);
        }
    }
}

template <typename T>
void take(const json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

/// Defaults overlaid with whatever keys the user gave.
template <typename T>
T overlay(const T& defaults, const json& j, const std::string& where) {
    if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
    json base = defaults;
    for (const auto& [k, v] : j.items()) {
        if (!base.contains(k)) throw ConfigError("unknown key '" + k + "' in " + where);
        base[k] = v;
    }
    return base.get<T>();
}

void check_task(const std::string& name, const char* where) {
    try {
        parse_task_name(name).resolved();
    } catch (const InputError& e) {
        throw ConfigError(std::string(where) + ": " + e.what());
    }
}

std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return buf;
}

std::string timestamp() {
    auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

void write_text(const fs::path& path, const std::string& text) {
    std::error_code ec;
    if (path.has_parent_path()) fs::create_directories(path.parent_path(), ec);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FileError("cannot write " + path.string());
    out << text;
    if (!out) throw FileError("write failed: " + path.string());
}

json read_json(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw FileError("cannot read " + path.string());
    try {
        return json::parse(in);
    } catch (const json::parse_error& e) {
        throw SchemaError(path.string() + ": " + e.what());
    }
}

double mean(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

Dataset head(const Dataset& d, std::size_t n) { return Dataset(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(std::min(n, d.size()))); }

// -- per-run context ---------------------------------------------------------------

class Run {
public:
    Run(Command cmd, const ExperimentConfig& cfg, const RunOptions& opts) : cmd_(cmd), cfg_(cfg), opts_(opts) {
        out_ = cfg.output_dir;
        report_path_ = out_ / (std::string(command_name(cmd)) + ".json");
        if (fs::exists(report_path_) && !opts.force) {
            throw ConfigError(report_path_.string() + " already exists; pass --force to overwrite");
        }
    }

    const ExperimentConfig& cfg() const { return cfg_; }
    const fs::path& out() const { return out_; }

    void log(const std::string& msg) const {
        if (opts_.verbose) std::cerr << "[" << command_name(cmd_) << "] " << msg << std::endl;
    }

    const ModelState& base() {
        if (!base_) base_ = ensure_base_model(cfg_, opts_.verbose);
        return *base_;
    }

    TaskData data(const std::string& task, std::uint64_t seed) const { return experiment_data(cfg_, task, seed); }

    fs::path set_path(const std::string& task, std::uint64_t seed, const char* suffix) const {
        return out_ / "sets" / (task + ".s" + std::to_string(seed) + suffix);
    }

    /// Loads a set written by `identify`, checking it was built from this config's probe data.
    TaskNeuronSet load_set(const std::string& task, std::uint64_t seed, bool ranking) const {
        auto path = set_path(task, seed, ranking ? ".ranking.json" : ".json");
        if (!fs::exists(path)) {
            throw FileError("missing " + path.string() + "; run `identify` with this config first");
        }
        auto set = load_neuron_set(path);
        auto probe = head(data(task, seed).train, cfg_.probe);
        if (set.dataset_id != dataset_id(probe) || set.total_neurons != total_neurons(cfg_.model)) {
            throw ConfigError(path.string() + " was identified under a different config; rerun `identify`");
        }
        return set;
    }

    TrainHyperparams hp(std::uint64_t seed) const {
        auto h = cfg_.hyperparams;
        h.seed = seed;
        return h;
    }

    InferenceOptions plain() const { return {nullptr, cfg_.max_new_tokens}; }

    ordered_json header() const {
        ordered_json r;
        r["command"] = command_name(cmd_);
        r["generated_at"] = timestamp();
        r["config"] = config_to_json(cfg_);
        return r;
    }

    ordered_json finish(ordered_json report) const {
        write_text(report_path_, report.dump(2) + "\n");
        return report;
    }

private:
    Command cmd_;
    const ExperimentConfig& cfg_;
    RunOptions opts_;
    fs::path out_;
    fs::path report_path_;
    std::optional<ModelState> base_;
};

std::uint64_t random_seed(std::uint64_t seed, std::size_t task_index) { return Rng::derive(seed, task_index + 1); }

std::string histogram_csv(const RelevanceTable& t) {
    constexpr int kBins = 20;
    double hi = *std::max_element(t.scores.begin(), t.scores.end());
    std::vector<std::size_t> counts(kBins, 0);
    for (double s : t.scores) {
        int b = hi > 0.0 ? static_cast<int>(s / hi * kBins) : 0;
        ++counts[static_cast<std::size_t>(std::clamp(b, 0, kBins - 1))];
    }
    std::ostringstream out;
    out << "bin_start,bin_end,count\n";
    for (int b = 0; b < kBins; ++b) {
        out << fmt(hi * b / kBins) << ',' << fmt(hi * (b + 1) / kBins) << ',' << counts[static_cast<std::size_t>(b)] << '\n';
    }
    return out.str();
}

std::string pair_kind(TaskKind a, TaskKind b) {
    auto k = [](TaskKind x) { return x == TaskKind::classification ? std::string("cls") : std::string("gen"); };
    return k(a) + "-" + k(b);
}

// -- commands -------------------------------------------------------------------

ordered_json cmd_identify(Run& run) {
    const auto& cfg = run.cfg();
    const ModelState& base = run.base();
    auto report = run.header();
    auto sets = ordered_json::array();
    auto overlap_rows = ordered_json::array();
    std::ostringstream overlap_csv;
    overlap_csv << "seed,task_a,task_b,pair_kind,proportion,overlap\n";
    bool monotone_same_kind = true;
    std::size_t set_size = 0;
    fs::create_directories(run.out() / "sets");

    for (auto seed : cfg.seeds) {
        std::vector<TaskNeuronSet> rankings;
        std::vector<TaskKind> kinds;
        for (const auto& task : cfg.tasks) {
            run.log("relevance " + task + " seed " + std::to_string(seed));
            auto td = run.data(task, seed);
            auto table = relevance_scores(base, head(td.train, cfg.probe), cfg.aggregation);
            auto set = select_top_k(table, cfg.k_percent, cfg.per_layer);
            auto ranking = select_top_k(table, 100.0);
            save_neuron_set(set, run.set_path(task, seed, ".json"));
            save_neuron_set(ranking, run.set_path(task, seed, ".ranking.json"));
            write_text(run.set_path(task, seed, ".hist.csv"), histogram_csv(table));
            set_size = set.size();
            ordered_json e;
            e["task"] = task;
            e["seed"] = seed;
            e["size"] = set.size();
            e["path"] = fs::relative(run.set_path(task, seed, ".json"), run.out()).generic_string();
            sets.push_back(e);
            rankings.push_back(std::move(ranking));
            kinds.push_back(td.spec.kind());
        }
        for (std::size_t i = 0; i < rankings.size(); ++i) {
            for (std::size_t j = i + 1; j < rankings.size(); ++j) {
                const std::string kind = pair_kind(kinds[i], kinds[j]);
                ordered_json row;
                row["seed"] = seed;
                row["task_a"] = cfg.tasks[i];
                row["task_b"] = cfg.tasks[j];
                row["pair_kind"] = kind;
                auto values = ordered_json::array();
                double prev = -1.0;
                bool monotone = true;
                for (double p : cfg.proportions) {
                    double o = overlap_rate(rankings[i].prefix(p).neurons, rankings[j].prefix(p).neurons);
                    values.push_back(o);
                    overlap_csv << seed << ',' << cfg.tasks[i] << ',' << cfg.tasks[j] << ',' << kind << ',' << fmt(p)
                                << ',' << fmt(o) << '\n';
                    if (o < prev) monotone = false;
                    prev = o;
                }
                row["overlap"] = values;
                row["non_decreasing"] = monotone;
                if (kinds[i] == kinds[j] && !monotone) monotone_same_kind = false;
                overlap_rows.push_back(row);
            }
        }
    }
    write_text(run.out() / "overlap.csv", overlap_csv.str());

    report["base_checkpoint"] = cfg.pretrain.checkpoint.empty() ? std::string("base.ckpt") : cfg.pretrain.checkpoint;
    report["sets"] = sets;
    report["overlap"] = overlap_rows;
    ordered_json summary;
    summary["set_size"] = set_size;
    summary["total_neurons"] = total_neurons(cfg.model);
    summary["same_kind_overlap_non_decreasing"] = monotone_same_kind;
    report["summary"] = summary;
    return run.finish(report);
}

struct TriRow {
    std::string task;
    std::uint64_t seed;
    double original, random, targeted;
};

/// Rows, per-task means over seeds, and an overall mean block.
ordered_json tri_report(const std::vector<TriRow>& rows, const std::vector<std::string>& tasks, const char* random_key,
                        const char* task_key, const ordered_json& head_json, const fs::path& csv_path) {
    ordered_json report = head_json;
    auto arr = ordered_json::array();
    std::ostringstream csv;
    csv << "task,seed,original," << random_key << ',' << task_key << '\n';
    for (const auto& r : rows) {
        ordered_json j;
        j["task"] = r.task;
        j["seed"] = r.seed;
        j["original"] = r.original;
        j[random_key] = r.random;
        j[task_key] = r.targeted;
        arr.push_back(j);
        csv << r.task << ',' << r.seed << ',' << fmt(r.original) << ',' << fmt(r.random) << ',' << fmt(r.targeted) << '\n';
    }
    auto means = ordered_json::array();
    std::vector<double> o_all, r_all, t_all;
    for (const auto& task : tasks) {
        std::vector<double> o, r, t;
        for (const auto& row : rows) {
            if (row.task != task) continue;
            o.push_back(row.original);
            r.push_back(row.random);
            t.push_back(row.targeted);
        }
        ordered_json j;
        j["task"] = task;
        j["original"] = mean(o);
        j[random_key] = mean(r);
        j[task_key] = mean(t);
        means.push_back(j);
        csv << task << ",mean," << fmt(mean(o)) << ',' << fmt(mean(r)) << ',' << fmt(mean(t)) << '\n';
        o_all.push_back(mean(o));
        r_all.push_back(mean(r));
        t_all.push_back(mean(t));
    }
    report["rows"] = arr;
    report["task_means"] = means;
    ordered_json summary;
    summary["original"] = mean(o_all);
    summary[random_key] = mean(r_all);
    summary[task_key] = mean(t_all);
    report["summary"] = summary;
    write_text(csv_path, csv.str());
    return report;
}

ordered_json cmd_deactivate(Run& run) {
    const auto& cfg = run.cfg();
    std::vector<TriRow> rows;
    // load every set before any compute so a missing artifact fails fast
    for (auto seed : cfg.seeds)
        for (const auto& task : cfg.tasks) run.load_set(task, seed, false);
    const ModelState& base = run.base();
    for (auto seed : cfg.seeds) {
        for (std::size_t i = 0; i < cfg.tasks.size(); ++i) {
            const auto& task = cfg.tasks[i];
            run.log(task + " seed " + std::to_string(seed));
            auto td = run.data(task, seed);
            auto set = run.load_set(task, seed, false);
            auto rnd = random_neuron_set(cfg.model, set.size(), random_seed(seed, i));
            auto kind = td.spec.kind();
            double original = evaluate_task(base, td.test, kind, run.plain());
            auto dt = deactivate(base, {set, cfg.deactivation, 100.0});
            auto dr = deactivate(base, {rnd, cfg.deactivation, 100.0});
            double t = evaluate_task(dt.model, td.test, kind, dt.inference(cfg.max_new_tokens));
            double r = evaluate_task(dr.model, td.test, kind, dr.inference(cfg.max_new_tokens));
            rows.push_back({task, seed, original, r, t});
        }
    }
    auto report = tri_report(rows, cfg.tasks, "deactivate_random", "deactivate_task", run.header(),
                             run.out() / "deactivate.csv");
    auto& s = report["summary"];
    s["drop_random"] = s["original"].get<double>() - s["deactivate_random"].get<double>();
    s["drop_task"] = s["original"].get<double>() - s["deactivate_task"].get<double>();
    return run.finish(report);
}

ordered_json cmd_finetune(Run& run) {
    const auto& cfg = run.cfg();
    std::vector<TriRow> rows;
    for (auto seed : cfg.seeds)
        for (const auto& task : cfg.tasks) run.load_set(task, seed, false);
    const ModelState& base = run.base();
    for (auto seed : cfg.seeds) {
        for (std::size_t i = 0; i < cfg.tasks.size(); ++i) {
            const auto& task = cfg.tasks[i];
            run.log(task + " seed " + std::to_string(seed));
            auto td = run.data(task, seed);
            auto set = run.load_set(task, seed, false);
            auto rnd = random_neuron_set(cfg.model, set.size(), random_seed(seed, i));
            auto kind = td.spec.kind();
            double original = evaluate_task(base, td.test, kind, run.plain());
            auto mt = masked_finetune(base, td.train, {set, InterventionMode::finetune_masked, 100.0}, run.hp(seed));
            auto mr = masked_finetune(base, td.train, {rnd, InterventionMode::finetune_masked, 100.0}, run.hp(seed));
            rows.push_back({task, seed, original, evaluate_task(mr.model, td.test, kind, run.plain()),
                            evaluate_task(mt.model, td.test, kind, run.plain())});
        }
    }
    auto report = tri_report(rows, cfg.tasks, "train_random", "train_task", run.header(), run.out() / "finetune.csv");
    auto& s = report["summary"];
    s["gap"] = s["train_task"].get<double>() - s["train_random"].get<double>();
    return run.finish(report);
}

ordered_json cmd_sweep(Run& run) {
    const auto& cfg = run.cfg();
    for (auto seed : cfg.seeds)
        for (const auto& task : cfg.tasks) run.load_set(task, seed, true);
    const ModelState& base = run.base();
    auto report = run.header();
    auto all = ordered_json::array();
    std::map<double, std::vector<double>> id_by_p;
    for (auto seed : cfg.seeds) {
        std::vector<TaskData> suites;
        for (const auto& task : cfg.tasks) suites.push_back(run.data(task, seed));
        for (std::size_t i = 0; i < cfg.tasks.size(); ++i) {
            run.log(cfg.tasks[i] + " seed " + std::to_string(seed));
            EvalTask id{cfg.tasks[i], suites[i].spec.kind(), suites[i].test};
            std::vector<EvalTask> ood;
            for (std::size_t j = 0; j < cfg.tasks.size(); ++j) {
                if (j != i) ood.push_back({cfg.tasks[j], suites[j].spec.kind(), suites[j].test});
            }
            auto hp = cfg.sweep_hyperparams;
            hp.seed = seed;
            auto rows = sweep_proportions(base, suites[i].train, run.load_set(cfg.tasks[i], seed, true), cfg.proportions,
                                          hp, id, ood);
            write_text(run.out() / "sweep" / (cfg.tasks[i] + ".s" + std::to_string(seed) + ".csv"), sweep_csv(rows));
            for (const auto& r : rows) {
                ordered_json j;
                j["task"] = cfg.tasks[i];
                j["seed"] = seed;
                j["proportion"] = r.proportion;
                j["id_metric"] = r.id_metric;
                j["ood_cls_metric"] = r.ood_cls_metric ? ordered_json(*r.ood_cls_metric) : ordered_json(nullptr);
                j["ood_gen_metric"] = r.ood_gen_metric ? ordered_json(*r.ood_gen_metric) : ordered_json(nullptr);
                all.push_back(j);
                id_by_p[r.proportion].push_back(r.id_metric);
            }
        }
    }
    report["rows"] = all;
    auto means = ordered_json::array();
    for (double p : cfg.proportions) {
        ordered_json j;
        j["proportion"] = p;
        j["id_metric"] = mean(id_by_p[p]);
        means.push_back(j);
    }
    report["summary"] = {{"mean_by_proportion", means}};
    return run.finish(report);
}

ordered_json cmd_similarity(Run& run) {
    const auto& cfg = run.cfg();
    if (cfg.tasks.size() < 2) throw ConfigError("similarity needs at least two tasks");
    const ModelState& base = run.base();
    auto report = run.header();
    auto per_seed = ordered_json::array();
    for (auto seed : cfg.seeds) {
        std::vector<TaskData> suites;
        for (const auto& task : cfg.tasks) suites.push_back(run.data(task, seed));
        StudyInput in;
        in.test_tasks = cfg.tasks;
        for (std::size_t i = 0; i < cfg.tasks.size(); ++i) {
            run.log("fine-tune on " + cfg.tasks[i] + " seed " + std::to_string(seed));
            ModelState m = train(base, suites[i].train, TrainableSet::everything(), run.hp(seed)).model;
            std::vector<TaskNeuronSet> sets;
            std::vector<double> scores;
            for (std::size_t j = 0; j < cfg.tasks.size(); ++j) {
                auto table = relevance_scores(m, head(suites[j].train, cfg.probe), cfg.aggregation);
                sets.push_back(select_top_k(table, cfg.k_percent, cfg.per_layer));
                scores.push_back(evaluate_task(m, suites[j].test, suites[j].spec.kind(), run.plain()));
            }
            in.models.push_back(std::move(m));
            in.trained_task.push_back(i);
            in.sets.push_back(std::move(sets));
            in.scores.push_back(std::move(scores));
        }
        auto study = similarity_generalization_study(in);
        const std::string stem = "similarity/profile.s" + std::to_string(seed) + ".csv";
        write_text(run.out() / stem, profile_csv(study));
        auto corr = correlation_json(study);
        write_text(run.out() / ("similarity/correlation.s" + std::to_string(seed) + ".json"), corr.dump(2) + "\n");

        ordered_json s;
        s["seed"] = seed;
        s["profile_csv"] = stem;
        auto tasks = ordered_json::array();
        for (const auto& t : study) {
            ordered_json j;
            j["test_task"] = t.test_task;
            auto sims = ordered_json::array();
            for (const auto& v : t.similarities) sims.push_back(v ? ordered_json(*v) : ordered_json(nullptr));
            j["similarities"] = sims;
            j["scores"] = t.scores;
            j["note"] = t.note;
            tasks.push_back(j);
        }
        s["tasks"] = tasks;
        s["correlations"] = corr;
        per_seed.push_back(s);
    }
    report["seeds"] = per_seed;
    report["summary"] = {{"seeds", cfg.seeds.size()}, {"tasks", cfg.tasks.size()}};
    return run.finish(report);
}

ordered_json cmd_continual(Run& run) {
    const auto& cfg = run.cfg();
    const auto& cc = cfg.continual;
    if (cc.sequence.size() < 2 || cc.methods.empty()) {
        throw ConfigError("continual needs a sequence of at least two tasks and one method");
    }
    const bool wncft = std::count(cc.methods.begin(), cc.methods.end(), "wncft") > 0;
    const bool ncft = wncft || std::count(cc.methods.begin(), cc.methods.end(), "ncft") > 0;
    const bool seqft = std::count(cc.methods.begin(), cc.methods.end(), "seqft") > 0;

    for (auto seed : cfg.seeds)
        for (const auto& task : cc.sequence) run.load_set(task, seed, false);
    const ModelState& base = run.base();

    auto report = run.header();
    auto runs = ordered_json::array();
    std::map<std::string, std::vector<double>> cl, fg_final;
    for (auto seed : cfg.seeds) {
        std::vector<SequenceTask> tasks;
        std::vector<TaskVector> vectors;
        for (std::size_t i = 0; i < cc.sequence.size(); ++i) {
            auto td = run.data(cc.sequence[i], seed);
            tasks.push_back({cc.sequence[i], td.spec.kind(), td.train, td.test, run.load_set(cc.sequence[i], seed, false)});
            if (wncft) {
                vectors.push_back(task_vector(base, td.train, cc.task_vector_samples, Rng::derive(seed, 100 + i),
                                              td.train.size() < cc.task_vector_samples));
            }
        }
        // A_i does not depend on the order, so it is trained once per seed
        run.log("per-task fine-tuning seed " + std::to_string(seed));
        auto alone = per_task_ft(base, {"canonical", tasks}, run.hp(seed), cfg.max_new_tokens);

        std::ostringstream fg_csv;
        fg_csv << "order_label,method,stage,fg\n";
        for (std::size_t o = 0; o < cc.orders.size(); ++o) {
            const std::string label = "order" + std::to_string(o + 1);
            TaskSequence seq{label, {}};
            std::vector<TaskVector> tv;
            AccuracyMatrix blank(cc.sequence.size());
            for (std::size_t pos = 0; pos < cc.orders[o].size(); ++pos) {
                auto idx = static_cast<std::size_t>(cc.orders[o][pos]);
                seq.tasks.push_back(tasks[idx]);
                if (wncft) tv.push_back(vectors[idx]);
                blank.alone[pos] = alone[idx];
            }
            auto emit = [&](const std::string& method, AccuracyMatrix m, const ordered_json& extra) {
                m.alone = blank.alone;
                auto j = continual_report(label, method, m);
                j["seed"] = seed;
                for (const auto& [k, v] : extra.items()) j[k] = v;
                runs.push_back(j);
                fg_csv << fg_csv_rows(label, method, m);
                cl[method].push_back(j["CL"].get<double>());
                if (!j["FG"].empty() && !j["FG"].back().is_null()) fg_final[method].push_back(j["FG"].back().get<double>());
            };
            if (ncft) {
                run.log(label + " ncft seed " + std::to_string(seed));
                ContinualOptions opts;
                if (wncft) opts.task_vectors = tv;
                opts.overlap_rule = cc.overlap_rule;
                opts.max_new_tokens = cfg.max_new_tokens;
                auto r = ncft_train(base, seq, run.hp(seed), opts);
                ordered_json extra = ordered_json::object();
                extra["warnings"] = r.warnings;
                if (std::count(cc.methods.begin(), cc.methods.end(), "ncft")) emit("ncft", r.matrix, extra);
                if (wncft) {
                    extra["shrinkage"] = r.shrinkage;
                    emit("wncft", *r.weighted, extra);
                }
            }
            if (seqft) {
                run.log(label + " seqft seed " + std::to_string(seed));
                ContinualOptions opts;
                opts.max_new_tokens = cfg.max_new_tokens;
                emit("seqft", seqft_train(base, seq, run.hp(seed), opts).matrix, ordered_json::object());
            }
            if (std::count(cc.methods.begin(), cc.methods.end(), "per-task-ft")) {
                ordered_json j;
                j["order_label"] = label;
                j["method"] = "per-task-ft";
                auto a = ordered_json::array();
                for (const auto& v : blank.alone) a.push_back(*v);
                j["A"] = a;
                j["seed"] = seed;
                runs.push_back(j);
            }
        }
        write_text(run.out() / "continual" / ("fg.s" + std::to_string(seed) + ".csv"), fg_csv.str());
    }
    report["runs"] = runs;
    ordered_json summary = ordered_json::object();
    for (const auto& method : cc.methods) {
        if (method == "per-task-ft") continue;
        ordered_json j;
        j["CL"] = mean(cl[method]);
        j["final_FG"] = fg_final[method].empty() ? ordered_json(nullptr) : ordered_json(mean(fg_final[method]));
        summary[method] = j;
    }
    report["summary"] = summary;
    return run.finish(report);
}

ordered_json cmd_report(Run& run) {
    auto report = run.header();
    ordered_json sections = ordered_json::object();
    for (auto c : {Command::identify, Command::deactivate, Command::finetune, Command::sweep, Command::similarity,
                   Command::continual}) {
        auto path = run.out() / (std::string(command_name(c)) + ".json");
        if (!fs::exists(path)) continue;
        std::ifstream in(path);
        ordered_json j;
        try {
            j = ordered_json::parse(in);
        } catch (const ordered_json::parse_error& e) {
            throw SchemaError(path.string() + ": " + e.what());
        }
        sections[std::string(command_name(c))] = j.contains("summary") ? j["summary"] : ordered_json(nullptr);
    }
    if (sections.empty()) {
        throw FileError("no reports under " + run.out().string() + "; run identify, deactivate, finetune, sweep, "
                        "similarity or continual first");
    }
    report["sections"] = sections;
    return run.finish(report);
}

}  // namespace

// -- config ----------------------------------------------------------------------

ExperimentConfig ExperimentConfig::defaults() {
    ExperimentConfig c;
    for (const char* f : {"sentiment", "spot", "lead", "copy", "reverse", "map"}) {
        c.pretrain.tasks.push_back(std::string(f) + "_b");
        c.tasks.push_back(std::string(f) + "_a");
    }
    c.pretrain.hyperparams = adam(1500);
    c.hyperparams = adam(150);
    c.sweep_hyperparams = adam(50);
    c.continual.sequence = {"sentiment_a", "spot_a", "copy_a", "reverse_a"};
    c.continual.orders = {{0, 1, 2, 3}, {3, 2, 1, 0}, {1, 3, 0, 2}};
    c.continual.methods = {"ncft", "seqft", "wncft", "per-task-ft"};
    return c;
}

void ExperimentConfig::validate() const {
    model.validate();
    if (model.vocab_size < Vocabulary::synthetic().size()) {
        throw ConfigError("model.vocab_size must be at least " + std::to_string(Vocabulary::synthetic().size()));
    }
    if (pretrain.tasks.empty()) throw ConfigError("pretrain.tasks is empty");
    for (const auto& t : pretrain.tasks) check_task(t, "pretrain.tasks");
    if (pretrain.n_train == 0) throw ConfigError("pretrain.n_train must be positive");
    try {
        pretrain.hyperparams.validate();
        hyperparams.validate();
        sweep_hyperparams.validate();
    } catch (const InputError& e) {
        throw ConfigError(e.what());
    }
    if (tasks.empty()) throw ConfigError("tasks is empty");
    std::set<std::string> seen;
    for (const auto& t : tasks) {
        check_task(t, "tasks");
        if (!seen.insert(t).second) throw ConfigError("task '" + t + "' listed twice");
    }
    if (n_train == 0 || n_test == 0) throw ConfigError("n_train and n_test must be positive");
    if (probe == 0 || probe > n_train) throw ConfigError("probe must be in [1, n_train]");
    if (!(k_percent > 0.0 && k_percent <= 100.0)) throw ConfigError("k_percent must be in (0, 100]");
    if (proportions.empty()) throw ConfigError("proportions is empty");
    for (std::size_t i = 0; i < proportions.size(); ++i) {
        if (!(proportions[i] > 0.0 && proportions[i] <= 100.0)) throw ConfigError("proportions must lie in (0, 100]");
        if (i > 0 && proportions[i] <= proportions[i - 1]) throw ConfigError("proportions must be strictly increasing");
    }
    if (seeds.empty()) throw ConfigError("seeds is empty");
    if (std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() != seeds.size()) {
        throw ConfigError("seeds must be distinct");
    }
    if (max_new_tokens < 1) throw ConfigError("max_new_tokens must be positive");
    if (output_dir.empty()) throw ConfigError("output_dir is empty");

    const auto& cc = continual;
    for (const auto& m : cc.methods) {
        if (!kMethods.contains(m)) throw ConfigError("unknown continual method '" + m + "'");
    }
    for (const auto& t : cc.sequence) {
        if (!seen.contains(t)) throw ConfigError("continual task '" + t + "' is not in tasks");
    }
    if (std::set<std::string>(cc.sequence.begin(), cc.sequence.end()).size() != cc.sequence.size()) {
        throw ConfigError("continual.sequence repeats a task");
    }
    for (const auto& order : cc.orders) {
        std::vector<int> sorted = order;
        std::sort(sorted.begin(), sorted.end());
        bool ok = sorted.size() == cc.sequence.size();
        for (std::size_t i = 0; ok && i < sorted.size(); ++i) ok = sorted[i] == static_cast<int>(i);
        if (!ok) throw ConfigError("continual.orders entries must be permutations of the sequence indices");
    }
    if (!cc.methods.empty() && cc.orders.empty()) throw ConfigError("continual.orders is empty");
    if (cc.task_vector_samples == 0) throw ConfigError("continual.task_vector_samples must be positive");
}

json config_to_json(const ExperimentConfig& c) {
    json j;
    j["model"] = c.model;
    j["pretrain"] = {{"tasks", c.pretrain.tasks},
                     {"n_train", c.pretrain.n_train},
                     {"data_seed", c.pretrain.data_seed},
                     {"hyperparams", c.pretrain.hyperparams},
                     {"checkpoint", c.pretrain.checkpoint}};
    j["tasks"] = c.tasks;
    j["n_train"] = c.n_train;
    j["n_test"] = c.n_test;
    j["probe"] = c.probe;
    j["k_percent"] = c.k_percent;
    j["proportions"] = c.proportions;
    j["hyperparams"] = c.hyperparams;
    j["sweep_hyperparams"] = c.sweep_hyperparams;
    j["seeds"] = c.seeds;
    j["aggregation"] = aggregation_name(c.aggregation);
    j["per_layer"] = c.per_layer;
    j["deactivation"] = mode_name(c.deactivation);
    j["continual"] = {{"sequence", c.continual.sequence},
                      {"orders", c.continual.orders},
                      {"methods", c.continual.methods},
                      {"task_vector_samples", c.continual.task_vector_samples},
                      {"overlap_rule", rule_name(c.continual.overlap_rule)}};
    j["max_new_tokens"] = c.max_new_tokens;
    j["output_dir"] = c.output_dir;
    return j;
}

ExperimentConfig config_from_json(const json& j) {
    ExperimentConfig c = ExperimentConfig::defaults();
    try {
        reject_unknown(j,
                       {"model", "pretrain", "tasks", "n_train", "n_test", "probe", "k_percent", "proportions",
                        "hyperparams", "sweep_hyperparams", "seeds", "aggregation", "per_layer", "deactivation",
                        "continual", "max_new_tokens", "output_dir"},
                       "config");
        if (j.contains("model")) c.model = overlay(c.model, j["model"], "model");
        if (j.contains("pretrain")) {
            const auto& p = j["pretrain"];
            reject_unknown(p, {"tasks", "n_train", "data_seed", "hyperparams", "checkpoint"}, "pretrain");
            take(p, "tasks", c.pretrain.tasks);
            take(p, "n_train", c.pretrain.n_train);
            take(p, "data_seed", c.pretrain.data_seed);
            take(p, "checkpoint", c.pretrain.checkpoint);
            if (p.contains("hyperparams")) {
                c.pretrain.hyperparams = overlay(c.pretrain.hyperparams, p["hyperparams"], "pretrain.hyperparams");
            }
        }
        take(j, "tasks", c.tasks);
        take(j, "n_train", c.n_train);
        take(j, "n_test", c.n_test);
        take(j, "probe", c.probe);
        take(j, "k_percent", c.k_percent);
        take(j, "proportions", c.proportions);
        if (j.contains("hyperparams")) c.hyperparams = overlay(c.hyperparams, j["hyperparams"], "hyperparams");
        if (j.contains("sweep_hyperparams")) {
            c.sweep_hyperparams = overlay(c.sweep_hyperparams, j["sweep_hyperparams"], "sweep_hyperparams");
        }
        take(j, "seeds", c.seeds);
        if (j.contains("aggregation")) c.aggregation = parse_aggregation(j["aggregation"].get<std::string>());
        take(j, "per_layer", c.per_layer);
        if (j.contains("deactivation")) {
            c.deactivation = parse_mode(j["deactivation"].get<std::string>());
            if (c.deactivation == InterventionMode::finetune_masked) {
                throw ConfigError("deactivation must be a deactivate_* mode");
            }
        }
        if (j.contains("continual")) {
            const auto& cc = j["continual"];
            reject_unknown(cc, {"sequence", "orders", "methods", "task_vector_samples", "overlap_rule"}, "continual");
            take(cc, "sequence", c.continual.sequence);
            take(cc, "orders", c.continual.orders);
            take(cc, "methods", c.continual.methods);
            take(cc, "task_vector_samples", c.continual.task_vector_samples);
            if (cc.contains("overlap_rule")) c.continual.overlap_rule = parse_rule(cc["overlap_rule"].get<std::string>());
        }
        take(j, "max_new_tokens", c.max_new_tokens);
        take(j, "output_dir", c.output_dir);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    return c;
}

ExperimentConfig load_config(const fs::path& path) {
    json j;
    try {
        j = read_json(path);
    } catch (const SchemaError& e) {
        throw ConfigError(e.what());
    }
    if (j.is_object() && j.contains("command") && j.contains("config")) return config_from_json(j["config"]);
    return config_from_json(j);
}

void apply_environment(ExperimentConfig& c) {
    if (const char* out = std::getenv("NLAB_OUT"); out && *out) c.output_dir = out;
    if (const char* seed = std::getenv("NLAB_SEED"); seed && *seed) {
        char* end = nullptr;
        errno = 0;
        unsigned long long v = std::strtoull(seed, &end, 10);
        if (errno != 0 || *end != '\0' || *seed == '-') throw ConfigError("NLAB_SEED must be a non-negative integer");
        c.seeds = {static_cast<std::uint64_t>(v)};
    }
}

std::string_view command_name(Command c) noexcept {
    switch (c) {
        case Command::identify: return "identify";
        case Command::deactivate: return "deactivate";
        case Command::finetune: return "finetune";
        case Command::sweep: return "sweep";
        case Command::similarity: return "similarity";
        case Command::continual: return "continual";
        case Command::report: return "report";
    }
    return "?";
}

Command parse_command(std::string_view name) {
    for (auto c : {Command::identify, Command::deactivate, Command::finetune, Command::sweep, Command::similarity,
                   Command::continual, Command::report}) {
        if (command_name(c) == name) return c;
    }
    throw ConfigError("unknown command '" + std::string(name) + "'");
}

// -- base model --------------------------------------------------------------------

ModelState ensure_base_model(const ExperimentConfig& config, bool verbose) {
    const fs::path ckpt = config.pretrain.checkpoint.empty() ? fs::path(config.output_dir) / "base.ckpt"
                                                             : fs::path(config.pretrain.checkpoint);
    fs::path sidecar = ckpt;
    sidecar += ".json";
    json recipe;
    recipe["model"] = config.model;
    recipe["tasks"] = config.pretrain.tasks;
    recipe["n_train"] = config.pretrain.n_train;
    recipe["data_seed"] = config.pretrain.data_seed;
    recipe["hyperparams"] = config.pretrain.hyperparams;

    if (fs::exists(ckpt)) {
        if (fs::exists(sidecar) && read_json(sidecar) != recipe) {
            throw ConfigError(ckpt.string() + " was pretrained under a different recipe; remove it or change the path");
        }
        ModelState m = load_checkpoint(ckpt);
        if (!(m.config() == config.model)) throw ConfigError(ckpt.string() + " does not match the model config");
        return m;
    }
    if (verbose) std::cerr << "[pretrain] building " << ckpt << std::endl;
    Dataset mix;
    for (const auto& t : config.pretrain.tasks) {
        // the held-out split only keeps the train draw identical to a standalone suite
        auto td = generate_task_suite(parse_task_name(t, config.pretrain.data_seed), config.pretrain.n_train, 100);
        mix.insert(mix.end(), td.train.begin(), td.train.end());
    }
    ModelState m = train(ModelState::initialize(config.model), mix, TrainableSet::everything(),
                         config.pretrain.hyperparams).model;
    std::error_code ec;
    if (ckpt.has_parent_path()) fs::create_directories(ckpt.parent_path(), ec);
    save_checkpoint(m, ckpt);
    write_text(sidecar, recipe.dump(2) + "\n");
    return m;
}

TaskData experiment_data(const ExperimentConfig& config, const std::string& task, std::uint64_t seed) {
    return generate_task_suite(parse_task_name(task, seed), config.n_train, config.n_test);
}

ordered_json run_command(Command cmd, const ExperimentConfig& config, const RunOptions& opts) {
    config.validate();
    Run run(cmd, config, opts);
    switch (cmd) {
        case Command::identify: return cmd_identify(run);
        case Command::deactivate: return cmd_deactivate(run);
        case Command::finetune: return cmd_finetune(run);
        case Command::sweep: return cmd_sweep(run);
        case Command::similarity: return cmd_similarity(run);
        case Command::continual: return cmd_continual(run);
        case Command::report: return cmd_report(run);
    }
    throw ContractViolation("unhandled command");
}

std::string report_without_timestamp(const ordered_json& report) {
    ordered_json copy = report;
    copy.erase("generated_at");
    return copy.dump(2);
}

}  // namespace nlab
