// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "neuronlab/attribution.hpp"
#include "neuronlab/error.hpp"
#include "neuronlab/rng.hpp"
#include "support/fixtures.hpp"

using namespace nlab;
using testing::tiny_task_config;

namespace {

RelevanceTable table_of(std::vector<double> scores) {
    RelevanceTable t;
    t.config.num_layers = 1;
    t.config.d_ff = static_cast<int>(scores.size());
    t.config.w1_only = true;
    t.scores = std::move(scores);
    return t;
}

Dataset probe_data() { return testing::head(generate_task_suite(parse_task_name("sentiment_a", 4), 24, 4).train, 24); }

}  // namespace

TEST_CASE("scalar toy: first-order score 2, exact delta 3") {
    ag::Tape tape;
    ag::Var omega = ag::scale(tape.constant(Tensor::scalar(1.0)), 1.0);
    tape.tap(omega, "omega");
    ag::Var diff = ag::add(omega, tape.constant(Tensor::scalar(-2.0)));
    auto rec = tape.backward(ag::mul(diff, diff));
    double score = std::abs(rec.tap("omega").item() * omega.value().item());
    CHECK(score == 2.0);
    auto loss = [](double w) { return (w - 2) * (w - 2); };
    CHECK(std::abs(loss(0.0) - loss(1.0)) == 3.0);
}

TEST_CASE("dead neurons score zero and have zero exact delta") {
    auto cfg = tiny_task_config();
    auto m = ModelState::initialize(cfg);
    for (std::size_t r = 0; r < m.w1(0).rows(); ++r) m.w1(0).at(r, 3) = 0.0;
    for (std::size_t r = 0; r < m.w2(1).rows(); ++r) m.w2(1).at(r, 5) = 0.0;
    auto data = probe_data();
    auto t = relevance_scores(m, data);
    CHECK(t.score({0, MatrixTag::W1, 3}) == 0.0);
    CHECK(t.score({1, MatrixTag::W2, 5}) == 0.0);
    CHECK(exact_loss_delta(m, data, {0, MatrixTag::W1, 3}) == 0.0);
    for (double s : t.scores) CHECK(s >= 0.0);
    CHECK(t.scores.size() == total_neurons(cfg));
}

TEST_CASE("scores do not depend on dataset order") {
    auto m = ModelState::initialize(tiny_task_config());
    auto data = probe_data();
    auto a = relevance_scores(m, data);
    Rng rng(3);
    rng.shuffle(data);
    auto b = relevance_scores(m, data);
    CHECK(a.scores == b.scores);
    CHECK(a.dataset_id == b.dataset_id);
    CHECK_THROWS_AS(relevance_scores(m, Dataset{}), InputError);
}

TEST_CASE("sum aggregation is mean scaled by the token count, with identical ranking") {
    auto m = ModelState::initialize(tiny_task_config());
    auto data = probe_data();
    auto mean = relevance_scores(m, data, Aggregation::mean);
    auto sum = relevance_scores(m, data, Aggregation::sum);
    REQUIRE(mean.token_count > 0);
    CHECK(sum.token_count == mean.token_count);
    for (std::size_t i = 0; i < mean.scores.size(); ++i) {
        CHECK(sum.scores[i] == doctest::Approx(mean.scores[i] * mean.token_count).epsilon(1e-12));
    }
    CHECK(select_top_k(mean, 100).neurons == select_top_k(sum, 100).neurons);
}

TEST_CASE("score bounds the directional derivative of scaling a W2 column") {
    // Scaling W2 column c by (1+e) scales that neuron's output by (1+e) at every token,
    // so d loss / d e = sum_t g_t w_t, which the absolute-value score bounds from above.
    auto cfg = tiny_task_config();
    auto m = ModelState::initialize(cfg);
    Dataset one = testing::head(probe_data(), 1);
    auto t = relevance_scores(m, one, Aggregation::sum);
    auto summed_loss = [&](double e, int layer, int c) {
        ModelState s = m;
        for (std::size_t r = 0; r < s.w2(layer).rows(); ++r) s.w2(layer).at(r, c) *= 1.0 + e;
        return dataset_loss(s, one) * static_cast<double>(t.token_count);
    };
    for (int layer = 0; layer < 2; ++layer) {
        for (int c = 0; c < 16; c += 5) {
            const double h = 1e-5;
            double fd = (summed_loss(h, layer, c) - summed_loss(-h, layer, c)) / (2 * h);
            CHECK(std::abs(fd) <= t.score({layer, MatrixTag::W2, c}) * (1 + 1e-6) + 1e-9);
        }
    }
}

TEST_CASE("select_top_k size rule, ties and errors") {
    auto t = table_of({0.9, 0.5, 0.1});
    auto s = select_top_k(t, 34);
    REQUIRE(s.size() == 1);
    CHECK(s.neurons[0].index == 0);
    CHECK(select_top_k(t, 100).size() == 3);
    CHECK(select_top_k(t, 0.1).size() == 1);
    CHECK_THROWS_AS(select_top_k(t, 0), InputError);
    CHECK_THROWS_AS(select_top_k(t, 100.5), InputError);

    auto tie = table_of({0.2, 0.7, 0.7, 0.1});
    auto top = select_top_k(tie, 25);
    REQUIRE(top.size() == 1);
    CHECK(top.neurons[0].index == 1);

    auto cfg = tiny_task_config();
    auto real = relevance_scores(ModelState::initialize(cfg), probe_data());
    auto ten = select_top_k(real, 10);
    CHECK(ten.size() == static_cast<std::size_t>(std::llround(0.1 * total_neurons(cfg))));
    auto full = full_ranking(real);
    CHECK(std::equal(ten.neurons.begin(), ten.neurons.end(), full.begin()));
    for (std::size_t i = 1; i < ten.size(); ++i) CHECK(ten.scores[i - 1] >= ten.scores[i]);

    auto per = select_top_k(real, 10, true);
    std::map<int, int> per_layer;
    for (const auto& id : per.neurons) ++per_layer[id.layer];
    for (const auto& [l, n] : per_layer) CHECK(n == std::llround(0.1 * neurons_per_layer(cfg)));
}

TEST_CASE("prefix rule") {
    auto cfg = tiny_task_config();
    auto full = select_top_k(relevance_scores(ModelState::initialize(cfg), probe_data()), 100);
    std::size_t prev = 0;
    for (double p : {10.0, 30.0, 50.0, 70.0, 100.0}) {
        auto sub = full.prefix(p);
        CHECK(sub.size() == static_cast<std::size_t>(std::ceil(p / 100 * full.size())));
        CHECK(std::equal(sub.neurons.begin(), sub.neurons.end(), full.neurons.begin()));
        CHECK(sub.size() >= prev);
        prev = sub.size();
    }
    CHECK(full.prefix(0.001).size() == 1);
    CHECK_THROWS_AS(full.prefix(0), InputError);
}

TEST_CASE("random neuron sets") {
    auto cfg = tiny_task_config();
    auto a = random_neuron_set(cfg, 10, 7);
    auto b = random_neuron_set(cfg, 10, 7);
    CHECK(a.neurons == b.neurons);
    CHECK(std::set<NeuronId>(a.neurons.begin(), a.neurons.end()).size() == 10);
    CHECK(random_neuron_set(cfg, 10, 8).neurons != a.neurons);
    CHECK(random_neuron_set(cfg, total_neurons(cfg), 1).size() == total_neurons(cfg));
    CHECK_THROWS_AS(random_neuron_set(cfg, 0, 1), InputError);
}

TEST_CASE("neuron set json round trip and schema errors") {
    auto cfg = tiny_task_config();
    auto set = select_top_k(relevance_scores(ModelState::initialize(cfg), probe_data()), 10);
    auto j = neuron_set_to_json(set);
    CHECK(j.begin().key() == "k_percent");
    auto back = neuron_set_from_json(j);
    CHECK(back.neurons == set.neurons);
    CHECK(back.scores == set.scores);
    CHECK(back.total_neurons == set.total_neurons);

    auto path = std::filesystem::temp_directory_path() / "nlab_set.json";
    save_neuron_set(set, path);
    CHECK(load_neuron_set(path).neurons == set.neurons);

    auto dup = j;
    dup["neurons"][1] = dup["neurons"][0];
    CHECK_THROWS_AS(neuron_set_from_json(dup), SchemaError);
    auto shortj = j;
    shortj["scores"].erase(0);
    CHECK_THROWS_AS(neuron_set_from_json(shortj), SchemaError);
    auto badtag = j;
    badtag["neurons"][0][1] = "W3";
    CHECK_THROWS(neuron_set_from_json(badtag));
    {
        std::ofstream out(path);
        out << "{not json";
    }
    CHECK_THROWS_AS(load_neuron_set(path), SchemaError);
    std::filesystem::remove(path);
    CHECK_THROWS_AS(load_neuron_set(path), FileError);
}

TEST_CASE("aggregation names") {
    CHECK(parse_aggregation("sum") == Aggregation::sum);
    CHECK(aggregation_name(Aggregation::mean) == "mean");
    CHECK_THROWS_AS(parse_aggregation("median"), ConfigError);
}
