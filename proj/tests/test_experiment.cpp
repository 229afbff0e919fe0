// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "neuronlab/error.hpp"
#include "neuronlab/experiment.hpp"

using namespace nlab;
namespace fs = std::filesystem;

namespace {

ExperimentConfig small(const std::string& dir) {
    auto j = nlohmann::json::parse(R"({
        "model": {"num_layers": 2, "d_model": 16, "d_ff": 32, "num_heads": 2, "vocab_size": 64, "max_seq_len": 32},
        "pretrain": {"tasks": ["spot_b"], "n_train": 32, "hyperparams": {"steps": 5}},
        "tasks": ["spot_a", "copy_a"], "n_train": 24, "n_test": 4, "probe": 8,
        "hyperparams": {"steps": 3}, "sweep_hyperparams": {"steps": 2}, "seeds": [1, 2],
        "continual": {"sequence": ["spot_a", "copy_a"], "orders": [[0, 1]]}
    })");
    auto c = config_from_json(j);
    c.output_dir = (fs::temp_directory_path() / dir).string();
    fs::remove_all(c.output_dir);
    return c;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p);
    std::stringstream s;
    s << in.rdbuf();
    return s.str();
}

}  // namespace

TEST_CASE("config defaults, round trip and validation") {
    auto d = ExperimentConfig::defaults();
    CHECK(d.k_percent == 10.0);
    CHECK(d.proportions == std::vector<double>{10, 30, 50, 70, 100});
    d.validate();
    auto back = config_from_json(config_to_json(d));
    CHECK(config_to_json(back) == config_to_json(d));

    auto partial = config_from_json(nlohmann::json::parse(R"({"hyperparams": {"steps": 7}})"));
    CHECK(partial.hyperparams.steps == 7);
    CHECK(partial.hyperparams.optimizer == d.hyperparams.optimizer);

    CHECK_THROWS_AS(config_from_json(nlohmann::json::parse(R"({"colour": 1})")), ConfigError);
    CHECK_THROWS_AS(config_from_json(nlohmann::json::parse(R"({"model": {"depth": 3}})")), ConfigError);
    CHECK_THROWS_AS(config_from_json(nlohmann::json::parse(R"({"seeds": "one"})")), ConfigError);

    auto bad = d;
    bad.seeds.clear();
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = d;
    bad.proportions = {50, 10};
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = d;
    bad.tasks.push_back("juggle_a");
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = d;
    bad.continual.orders = {{0, 1, 1, 2}};
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = d;
    bad.continual.methods = {"replay"};
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    CHECK(parse_command("sweep") == Command::sweep);
    CHECK_THROWS_AS(parse_command("plot"), ConfigError);
}

TEST_CASE("commands compose through files") {
    auto cfg = small("nlab_exp_pipeline");
    CHECK_THROWS_AS(run_command(Command::deactivate, cfg), FileError);
    CHECK_THROWS_AS(run_command(Command::report, cfg), FileError);

    auto id = run_command(Command::identify, cfg);
    CHECK(id["config"] == config_to_json(cfg));
    CHECK(id.contains("generated_at"));
    CHECK(fs::exists(fs::path(cfg.output_dir) / "sets" / "copy_a.s2.ranking.json"));
    CHECK_THROWS_AS(run_command(Command::identify, cfg), ConfigError);

    // identical config, forced rerun: identical report apart from the timestamp
    RunOptions force;
    force.force = true;
    const auto set_file = fs::path(cfg.output_dir) / "sets" / "spot_a.s1.json";
    const std::string first_set = slurp(set_file);
    auto again = run_command(Command::identify, cfg, force);
    CHECK(report_without_timestamp(again) == report_without_timestamp(id));
    CHECK(slurp(set_file) == first_set);

    auto de = run_command(Command::deactivate, cfg);
    REQUIRE(de["rows"].size() == 4);
    for (const auto& key : {"original", "deactivate_random", "deactivate_task"}) CHECK(de["rows"][0].contains(key));
    CHECK(de["task_means"].size() == 2);
    const auto base = ensure_base_model(cfg);
    auto td = experiment_data(cfg, "spot_a", 1);
    CHECK(de["rows"][0]["original"].get<double>() ==
          evaluate_task(base, td.test, td.spec.kind(), {nullptr, cfg.max_new_tokens}));

    auto one = cfg;
    one.proportions = {100};
    one.seeds = {1};
    run_command(Command::sweep, one);
    auto csv = slurp(fs::path(cfg.output_dir) / "sweep" / "spot_a.s1.csv");
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 2);

    auto pt = cfg;
    pt.continual.methods = {"per-task-ft"};
    auto cont = run_command(Command::continual, pt);
    for (const auto& r : cont["runs"]) {
        CHECK(r["method"] == "per-task-ft");
        CHECK(r.contains("A"));
        CHECK_FALSE(r.contains("FG"));
    }
    CHECK(slurp(fs::path(cfg.output_dir) / "continual" / "fg.s1.csv") == "order_label,method,stage,fg\n");

    auto rep = run_command(Command::report, cfg);
    CHECK(rep["sections"].contains("deactivate"));
    CHECK(rep["sections"].contains("sweep"));

    auto stale = cfg;
    stale.probe = 4;
    CHECK_THROWS_AS(run_command(Command::finetune, stale), ConfigError);
    fs::remove_all(cfg.output_dir);
}

TEST_CASE("embedded config loads back from a report") {
    auto cfg = small("nlab_exp_reload");
    run_command(Command::identify, cfg);
    auto loaded = load_config(fs::path(cfg.output_dir) / "identify.json");
    CHECK(config_to_json(loaded) == config_to_json(cfg));
    CHECK_THROWS_AS(load_config(fs::path(cfg.output_dir) / "absent.json"), FileError);
    fs::remove_all(cfg.output_dir);
}
