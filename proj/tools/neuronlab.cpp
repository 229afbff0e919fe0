// SPDX-License-Identifier: Apache-2.0
// Command-line front end: neuronlab <command> [--config PATH] [--out DIR] [--seed INT] [--force]

#include <iostream>
#include <optional>
#include <utility>
#include <string>

#include <CLI11.hpp>

#include "neuronlab/error.hpp"
#include "neuronlab/experiment.hpp"

namespace {

constexpr int kConfigError = 2;
constexpr int kNumericFault = 3;
constexpr int kMissingArtifact = 4;

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Task-specific neuron experiments on synthetic task suites"};
    app.require_subcommand(1, 1);

    std::string config_path;
    std::string out_dir;
    std::optional<std::uint64_t> seed;
    bool force = false;
    bool quiet = false;

    const std::pair<const char*, const char*> commands[] = {
        {"identify", "score neurons and write task-specific sets"},
        {"deactivate", "zero task vs random sets and evaluate"},
        {"finetune", "train only task vs random sets"},
        {"sweep", "train top-p% prefixes of the ranking"},
        {"similarity", "correlate task-vector similarity with transfer"},
        {"continual", "run continual-learning methods over task orders"},
        {"report", "aggregate the summaries of existing reports"},
    };
    for (const auto& [name, help] : commands) {
        auto* sub = app.add_subcommand(name, help);
        sub->add_option("--config", config_path, "experiment config, or any report embedding one");
        sub->add_option("--out", out_dir, "output directory (overrides config and NLAB_OUT)");
        sub->add_option("--seed", seed, "run a single seed (overrides config and NLAB_SEED)");
        sub->add_flag("--force", force, "overwrite an existing report");
        sub->add_flag("--quiet", quiet, "no progress lines");
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int rc = app.exit(e);
        return rc == 0 ? 0 : kConfigError;
    }

    try {
        const auto cmd = nlab::parse_command(app.get_subcommands().front()->get_name());
        auto config = config_path.empty() ? nlab::ExperimentConfig::defaults() : nlab::load_config(config_path);
        nlab::apply_environment(config);
        if (!out_dir.empty()) config.output_dir = out_dir;
        if (seed) config.seeds = {*seed};

        nlab::RunOptions opts;
        opts.force = force;
        opts.verbose = !quiet;
        auto report = nlab::run_command(cmd, config, opts);
        std::cout << config.output_dir << "/" << nlab::command_name(cmd) << ".json\n";
        if (report.contains("summary")) std::cout << report["summary"].dump(2) << "\n";
        return 0;
    } catch (const nlab::NumericFault& e) {
        std::cerr << "numeric fault in " << e.op() << ": " << e.what() << "\n";
        return kNumericFault;
    } catch (const nlab::FileError& e) {
        std::cerr << "missing artifact: " << e.what() << "\n";
        return kMissingArtifact;
    } catch (const nlab::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kConfigError;
    } catch (const nlab::InputError& e) {
        std::cerr << "input error: " << e.what() << "\n";
        return kConfigError;
    } catch (const nlab::SchemaError& e) {
        std::cerr << "schema error: " << e.what() << "\n";
        return kConfigError;
    } catch (const nlab::ParseError& e) {
        std::cerr << "parse error: " << e.what() << "\n";
        return kConfigError;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
