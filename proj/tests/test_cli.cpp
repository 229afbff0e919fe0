// SPDX-License-Identifier: Apache-2.0
// Exit codes of the command-line tool. The binary path comes from NLAB_CLI.
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <sys/wait.h>

namespace fs = std::filesystem;

namespace {

const fs::path kDir = fs::temp_directory_path() / "nlab_cli_test";

int run(const std::string& args) {
    const char* cli = std::getenv("NLAB_CLI");
    REQUIRE(cli != nullptr);
    std::string line = std::string("\"") + cli + "\" " + args + " > /dev/null 2>&1";
    int status = std::system(line.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

fs::path write_config(const std::string& name, const std::string& body) {
    fs::create_directories(kDir);
    auto p = kDir / name;
    std::ofstream(p) << body;
    return p;
}

const char* kTiny = R"({
  "model": {"num_layers": 2, "d_model": 16, "d_ff": 32, "num_heads": 2, "vocab_size": 64, "max_seq_len": 32},
  "pretrain": {"tasks": ["spot_b"], "n_train": 32, "hyperparams": {"steps": 3}},
  "tasks": ["spot_a"], "n_train": 16, "n_test": 4, "probe": 8, "seeds": [1],
  "continual": {"sequence": [], "orders": [], "methods": []}
})";

}  // namespace

TEST_CASE("exit codes") {
    fs::remove_all(kDir);
    auto cfg = write_config("tiny.json", kTiny);
    const std::string out = " --out \"" + (kDir / "out").string() + "\"";
    const std::string base = " --config \"" + cfg.string() + "\"" + out + " --quiet";

    CHECK(run("deactivate" + base) == 4);
    CHECK(run("report" + base) == 4);
    CHECK(run("identify" + base) == 0);
    CHECK(run("identify" + base) == 2);
    CHECK(run("identify" + base + " --force") == 0);
    CHECK(run("deactivate" + base + " --seed 1") == 0);
    CHECK(run("identify" + base + " --seed minus") == 2);
    CHECK(run("plot" + base) == 2);
    CHECK(run("identify --config \"" + write_config("bad.json", R"({"colour": "red"})").string() + "\"" + out) == 2);
    CHECK(run("identify --config \"" + write_config("broken.json", "{").string() + "\"" + out) == 2);

    auto diverge = write_config("diverge.json", R"({
      "model": {"num_layers": 2, "d_model": 16, "d_ff": 32, "num_heads": 2, "vocab_size": 64, "max_seq_len": 32},
      "pretrain": {"tasks": ["spot_b"], "n_train": 32,
                   "hyperparams": {"steps": 3, "optimizer": "sgd", "learning_rate": 1e308, "grad_clip": 0}},
      "tasks": ["spot_a"], "n_train": 16, "n_test": 4, "probe": 8, "seeds": [1],
      "continual": {"sequence": [], "orders": [], "methods": []}
    })");
    CHECK(run("identify --config \"" + diverge.string() + "\" --out \"" + (kDir / "div").string() + "\" --quiet") == 3);
    fs::remove_all(kDir);
}
