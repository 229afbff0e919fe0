// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <random>
#include <set>

#include "neuronlab/error.hpp"
#include "neuronlab/tasks.hpp"

using namespace nlab;

namespace {

const std::vector<std::string> kAll = {"sentiment", "spot", "lead", "copy", "reverse", "map"};

std::filesystem::path temp_file(const std::string& name) { return std::filesystem::temp_directory_path() / name; }

// Textbook O(nm) LCS table, written out independently of the library.
double rouge_oracle(const std::vector<std::string>& c, const std::vector<std::string>& r) {
    std::vector<std::vector<int>> t(c.size() + 1, std::vector<int>(r.size() + 1, 0));
    for (std::size_t i = 1; i <= c.size(); ++i)
        for (std::size_t j = 1; j <= r.size(); ++j)
            t[i][j] = c[i - 1] == r[j - 1] ? t[i - 1][j - 1] + 1 : std::max(t[i - 1][j], t[i][j - 1]);
    double l = t[c.size()][r.size()];
    if (l == 0) return 0.0;
    double p = l / c.size(), rc = l / r.size();
    return 2 * p * rc / (p + rc);
}

}  // namespace

TEST_CASE("suites are deterministic and train/test disjoint") {
    for (const auto& f : kAll) {
        for (const char* v : {"_a", "_b"}) {
            auto spec = parse_task_name(f + v, 17);
            auto a = generate_task_suite(spec, 300, 100);
            auto b = generate_task_suite(spec, 300, 100);
            CHECK(a.train == b.train);
            CHECK(a.test == b.test);
            std::set<std::string> tr;
            for (const auto& e : a.train) tr.insert(e.input);
            for (const auto& e : a.test) CHECK_FALSE(tr.contains(e.input));
            for (const auto& e : a.train) {
                CHECK(e.task == f + v);
                CHECK_FALSE(split_words(e.target).empty());
            }
        }
    }
}

TEST_CASE("classification labels are balanced within 5%") {
    for (const char* f : {"sentiment_a", "spot_a", "lead_b"}) {
        auto d = generate_task_suite(parse_task_name(f, 3), 1200, 10);
        std::map<std::string, int> counts;
        for (const auto& e : d.train) ++counts[e.target];
        REQUIRE(counts.size() == 2);
        for (const auto& [label, n] : counts) CHECK(std::abs(n / 1200.0 - 0.5) <= 0.05);
    }
}

TEST_CASE("families behave as described") {
    const auto& vocab = Vocabulary::synthetic();
    auto rev = generate_task_suite(parse_task_name("reverse_a", 1), 50, 5);
    for (const auto& e : rev.train) {
        auto in = split_words(e.input);
        std::vector<std::string> words(in.begin() + 1, in.end());
        std::reverse(words.begin(), words.end());
        CHECK(split_words(e.target) == words);
    }
    auto cp = generate_task_suite(parse_task_name("copy_b", 1), 50, 5);
    for (const auto& e : cp.train) {
        auto in = split_words(e.input);
        CHECK(split_words(e.target) == std::vector<std::string>(in.begin() + 1, in.end()));
    }
    auto spot = generate_task_suite(parse_task_name("spot_a", 1), 100, 5);
    const auto& sl = vocab.slice(TaskFamily::keyword_spot, 0);
    std::set<std::string> triggers(sl.begin(), sl.begin() + 3);
    for (const auto& e : spot.train) {
        bool has = false;
        for (const auto& w : split_words(e.input)) has |= triggers.contains(w);
        CHECK(e.target == (has ? "yes" : "no"));
    }
}

TEST_CASE("a and b variants use disjoint content words") {
    const auto& vocab = Vocabulary::synthetic();
    for (const auto& f : kAll) {
        auto fam = parse_family(f);
        const auto& a = vocab.slice(fam, 0);
        const auto& b = vocab.slice(fam, 1);
        std::set<std::string> sa(a.begin(), a.end());
        for (const auto& w : b) CHECK_FALSE(sa.contains(w));
    }
    CHECK(vocab.size() <= 256);
}

TEST_CASE("tokenizer round trip and unknown words") {
    const auto& vocab = Vocabulary::synthetic();
    auto d = generate_task_suite(parse_task_name("map_a", 9), 40, 5);
    for (const auto& e : d.train) {
        CHECK(vocab.detokenize(vocab.tokenize(e.input)) == e.input);
        CHECK(vocab.detokenize(vocab.tokenize(e.target)) == e.target);
    }
    CHECK_THROWS_AS(vocab.tokenize("zebra"), InputError);
    auto enc = encode_example(d.train[0]);
    CHECK(enc.tokens.size() == enc.targets.size());
    CHECK(enc.tokens[0] == vocab.bos());
    CHECK(enc.targets.back() == vocab.eos());
    CHECK(enc.targets[enc.prompt.size() - 1] == enc.answer[0]);
}

TEST_CASE("TaskSpec validation") {
    CHECK_THROWS_AS(parse_task_name("sentiment_c"), InputError);
    CHECK_THROWS_AS(parse_task_name("sentiment"), InputError);
    CHECK_THROWS_AS(parse_task_name("nothing_a"), InputError);
    auto s = parse_task_name("copy_a");
    s.max_len = 40;
    CHECK_THROWS_AS(s.resolved(), InputError);
    s = parse_task_name("spot_a");
    s.slice_words = 2;
    CHECK_THROWS_AS(s.resolved(), InputError);
    CHECK_THROWS_AS(generate_task_suite(parse_task_name("copy_a"), 0, 1), InputError);
    auto narrow = parse_task_name("copy_a");
    narrow.slice_words = 2;
    narrow.min_len = narrow.max_len = 3;
    CHECK_THROWS_AS(generate_task_suite(narrow, 50, 50), InputError);
    nlohmann::json j = parse_task_name("lead_b", 4);
    CHECK(j.get<TaskSpec>() == parse_task_name("lead_b", 4));
}

TEST_CASE("accuracy examples") {
    std::vector<std::string> l = {"yes", "no", "yes", "no"};
    CHECK(accuracy(l, l) == 1.0);
    std::vector<std::string> w = {"no", "yes", "no", "yes"};
    CHECK(accuracy(w, l) == 0.0);
    std::vector<std::string> p = {"yes", "no", "yes", "yes"};
    CHECK(accuracy(p, l) == 0.75);
    std::vector<std::string> shorter = {"yes"};
    CHECK_THROWS_AS(accuracy(shorter, l), ContractViolation);
}

TEST_CASE("rouge_l examples and properties") {
    CHECK(rouge_l("a b c", "a b c") == 1.0);
    CHECK(rouge_l("a b", "c d") == 0.0);
    CHECK(rouge_l("the cat", "the cat sat") == doctest::Approx(0.8).epsilon(1e-12));
    CHECK_THROWS_AS(rouge_l("", "a"), InputError);
    CHECK_THROWS_AS(rouge_l("a", "  "), InputError);

    std::mt19937_64 rng(4);
    const std::vector<std::string> alpha = {"a", "b", "c", "d"};
    for (int it = 0; it < 200; ++it) {
        auto draw = [&](std::size_t n) {
            std::vector<std::string> v;
            for (std::size_t i = 0; i < n; ++i) v.push_back(alpha[rng() % alpha.size()]);
            return v;
        };
        auto c = draw(1 + rng() % 6), r = draw(1 + rng() % 6);
        double f = rouge_l(c, r);
        CHECK(f == doctest::Approx(rouge_oracle(c, r)).epsilon(1e-12));
        CHECK(f >= 0.0);
        CHECK(f <= 1.0);
        CHECK((f == 1.0) == (c == r));
        if (c.size() == r.size()) CHECK(f == doctest::Approx(rouge_l(r, c)).epsilon(1e-12));
    }
}

TEST_CASE("jsonl round trip and errors") {
    auto d = generate_task_suite(parse_task_name("sentiment_a", 2), 20, 3);
    auto path = temp_file("nlab_test.jsonl");
    save_jsonl(d.train, path);
    CHECK(load_jsonl(path) == d.train);
    std::ifstream in(path);
    std::string first;
    std::getline(in, first);
    CHECK(first.rfind("{\"input\":", 0) == 0);

    {
        std::ofstream out(path);
        out << R"({"input":"x","target":"y","task":"t"})" << "\n" << R"({"input":"x",)" << "\n";
    }
    try {
        load_jsonl(path);
        FAIL("expected a parse error");
    } catch (const ParseError& e) {
        CHECK(e.line() == 2);
    }
    {
        std::ofstream out(path);
        out << R"({"input":"x","task":"t"})" << "\n";
    }
    CHECK_THROWS_AS(load_jsonl(path), SchemaError);
    { std::ofstream out(path); }
    CHECK(load_jsonl(path).empty());
    std::filesystem::remove(path);
    CHECK_THROWS_AS(load_jsonl(path), FileError);
}
