// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "neuronlab/checkpoint.hpp"
#include "neuronlab/error.hpp"
#include "neuronlab/model.hpp"
#include "neuronlab/rng.hpp"

using namespace nlab;

namespace {

ModelConfig tiny(int layers = 2, int d = 8, int d_ff = 16, int heads = 2) {
    ModelConfig c;
    c.num_layers = layers;
    c.d_model = d;
    c.d_ff = d_ff;
    c.num_heads = heads;
    c.vocab_size = 12;
    c.max_seq_len = 8;
    c.seed = 5;
    return c;
}

using Mat = std::vector<std::vector<double>>;

Mat to_mat(const Tensor& t) {
    Mat m(t.rows(), std::vector<double>(t.cols()));
    for (std::size_t r = 0; r < t.rows(); ++r)
        for (std::size_t c = 0; c < t.cols(); ++c) m[r][c] = t.at(r, c);
    return m;
}

Mat mm(const Mat& a, const Mat& b) {
    Mat o(a.size(), std::vector<double>(b[0].size(), 0.0));
    for (std::size_t i = 0; i < a.size(); ++i)
        for (std::size_t k = 0; k < b.size(); ++k)
            for (std::size_t j = 0; j < b[0].size(); ++j) o[i][j] += a[i][k] * b[k][j];
    return o;
}

Mat ln(const Mat& x, const Tensor& g, const Tensor& b) {
    Mat o = x;
    for (std::size_t r = 0; r < x.size(); ++r) {
        double mean = 0, var = 0;
        for (double v : x[r]) mean += v;
        mean /= x[r].size();
        for (double v : x[r]) var += (v - mean) * (v - mean);
        var /= x[r].size();
        for (std::size_t c = 0; c < x[r].size(); ++c) o[r][c] = (x[r][c] - mean) / std::sqrt(var + 1e-5) * g[c] + b[c];
    }
    return o;
}

// Straight-line single-layer single-head forward pass.
Mat reference_logits(const ModelState& m, const std::vector<int>& toks) {
    const auto& cfg = m.config();
    const std::size_t T = toks.size(), d = static_cast<std::size_t>(cfg.d_model);
    Mat x(T, std::vector<double>(d));
    for (std::size_t t = 0; t < T; ++t)
        for (std::size_t c = 0; c < d; ++c)
            x[t][c] = m.param("embed.token").at(toks[t], c) + m.param("embed.position").at(t, c);
    Mat a = ln(x, m.param("layer0.ln1.gain"), m.param("layer0.ln1.bias"));
    Mat q = mm(a, to_mat(m.param("layer0.attn.q"))), k = mm(a, to_mat(m.param("layer0.attn.k")));
    Mat v = mm(a, to_mat(m.param("layer0.attn.v")));
    Mat att(T, std::vector<double>(d, 0.0));
    for (std::size_t i = 0; i < T; ++i) {
        std::vector<double> s(i + 1);
        double mx = -1e300, z = 0;
        for (std::size_t j = 0; j <= i; ++j) {
            double dot = 0;
            for (std::size_t c = 0; c < d; ++c) dot += q[i][c] * k[j][c];
            s[j] = dot / std::sqrt(static_cast<double>(d));
            mx = std::max(mx, s[j]);
        }
        for (auto& e : s) z += (e = std::exp(e - mx));
        for (std::size_t j = 0; j <= i; ++j)
            for (std::size_t c = 0; c < d; ++c) att[i][c] += s[j] / z * v[j][c];
    }
    Mat o = mm(att, to_mat(m.param("layer0.attn.o")));
    for (std::size_t t = 0; t < T; ++t)
        for (std::size_t c = 0; c < d; ++c) x[t][c] += o[t][c];
    Mat h = mm(ln(x, m.param("layer0.ln2.gain"), m.param("layer0.ln2.bias")), to_mat(m.param("layer0.ffn.w1")));
    for (auto& row : h)
        for (auto& e : row) e = ag::activate(cfg.activation, e);
    Mat f = mm(h, to_mat(m.param("layer0.ffn.w2")));
    for (std::size_t t = 0; t < T; ++t)
        for (std::size_t c = 0; c < d; ++c) x[t][c] += f[t][c];
    return mm(ln(x, m.param("final_ln.gain"), m.param("final_ln.bias")), to_mat(m.param("unembed")));
}

}  // namespace

TEST_CASE("ffn_forward hand example") {
    Tensor w1 = Tensor::matrix({{1, 0}, {-1, 1}});
    Tensor w2 = Tensor::matrix({{1, 1}, {0, 1}});
    std::vector<double> h = {1, 2};
    auto out = ffn_forward(h, w1, w2, ag::Activation::relu);
    CHECK(out == std::vector<double>{0, 2});

    CHECK(ffn_forward(h, Tensor({2, 2}), w2, ag::Activation::gelu) == std::vector<double>{0, 0});
    Tensor eye = Tensor::matrix({{1, 0}, {0, 1}});
    Tensor pos = Tensor::matrix({{1, 2}, {0, 1}});
    CHECK(ffn_forward(h, pos, eye, ag::Activation::relu) == std::vector<double>{1, 4});
    CHECK_THROWS_AS(ffn_forward(std::vector<double>{1, 2, 3}, w1, w2, ag::Activation::relu), ContractViolation);
}

TEST_CASE("cross entropy examples") {
    Tensor uniform({1, 7}, 0.3);
    std::vector<int> t0 = {2};
    CHECK(cross_entropy_loss(uniform, t0) == doctest::Approx(std::log(7.0)).epsilon(1e-12));

    Tensor two = Tensor::matrix({{std::log(3.0), 0.0}});
    std::vector<int> z = {0};
    CHECK(cross_entropy_loss(two, z) == doctest::Approx(-std::log(0.75)).epsilon(1e-12));

    Tensor m5 = Tensor::matrix({{5, 0, 0}}), m10 = Tensor::matrix({{10, 0, 0}});
    CHECK(cross_entropy_loss(m10, z) < cross_entropy_loss(m5, z));
    CHECK(cross_entropy_loss(m10, z) >= 0.0);
    std::vector<int> two_targets = {0, 1};
    CHECK_THROWS_AS(cross_entropy_loss(m5, two_targets), ContractViolation);
}

TEST_CASE("forward matches a straight-line single-layer reference") {
    auto cfg = tiny(1, 8, 16, 1);
    auto m = ModelState::initialize(cfg);
    std::vector<int> toks = {1, 4, 7, 3, 9};
    auto tr = forward_with_trace(m, toks);
    Mat ref = reference_logits(m, toks);
    double worst = 0;
    for (std::size_t t = 0; t < toks.size(); ++t)
        for (std::size_t v = 0; v < ref[t].size(); ++v) worst = std::max(worst, std::abs(ref[t][v] - tr.logits.at(t, v)));
    CHECK(worst < 1e-12);
}

TEST_CASE("forward input validation and determinism") {
    auto m = ModelState::initialize(tiny());
    CHECK_THROWS_AS(forward_with_trace(m, std::vector<int>{}), InputError);
    CHECK_THROWS_AS(forward_with_trace(m, std::vector<int>{1, 12}), InputError);
    CHECK_THROWS_AS(forward_with_trace(m, std::vector<int>(9, 1)), InputError);
    std::vector<int> toks = {1, 2, 3};
    auto a = forward_with_trace(m, toks);
    auto b = forward_with_trace(m, toks);
    CHECK(a.logits.bit_equal(b.logits));
    for (std::size_t l = 0; l < a.activations.size(); ++l) CHECK(a.activations[l].bit_equal(b.activations[l]));
}

TEST_CASE("causality: later tokens do not change earlier logits") {
    auto m = ModelState::initialize(tiny());
    auto a = forward_with_trace(m, std::vector<int>{1, 2, 3, 4});
    auto b = forward_with_trace(m, std::vector<int>{1, 2, 9, 0, 5});
    for (std::size_t t = 0; t < 2; ++t)
        for (std::size_t v = 0; v < a.logits.cols(); ++v) CHECK(a.logits.at(t, v) == b.logits.at(t, v));
}

TEST_CASE("packed forward equals separate passes") {
    auto m = ModelState::initialize(tiny());
    std::vector<int> s1 = {1, 2, 3}, s2 = {4, 5, 6, 7};
    ag::Tape tape;
    auto g = build_forward_packed(tape, m, {s1, s2});
    auto a = forward_with_trace(m, s1), b = forward_with_trace(m, s2);
    for (std::size_t v = 0; v < a.logits.cols(); ++v) {
        CHECK(g.logits.value().at(1, v) == doctest::Approx(a.logits.at(1, v)).epsilon(1e-12));
        CHECK(g.logits.value().at(5, v) == doctest::Approx(b.logits.at(2, v)).epsilon(1e-12));
    }
}

TEST_CASE("zeroing a W1 column equals clamping its activation") {
    auto cfg = tiny();
    auto m = ModelState::initialize(cfg);
    std::vector<int> toks = {3, 1, 4, 1, 5};
    NeuronId id{1, MatrixTag::W1, 6};
    ModelState z = m;
    for (std::size_t r = 0; r < z.w1(1).rows(); ++r) z.w1(1).at(r, 6) = 0.0;
    auto cols = ColumnSet::of(cfg, std::vector<NeuronId>{id});
    auto a = forward_with_trace(z, toks);
    auto b = forward_with_trace(m, toks, &cols);
    CHECK(a.logits.bit_equal(b.logits));
    CHECK(b.omega(id, 2) == 0.0);
}

TEST_CASE("W2 neuron outputs are traced activations times the W2 column") {
    auto cfg = tiny(1);
    auto m = ModelState::initialize(cfg);
    std::vector<int> toks = {2, 7, 1};
    ag::Tape tape;
    auto g = build_forward(tape, m, toks);
    auto tr = forward_with_trace(m, toks);
    for (std::size_t t = 0; t < toks.size(); ++t) {
        double s = 0;
        for (std::size_t j = 0; j < m.w1(0).cols(); ++j) s += tr.activations[0].at(t, j) * m.w2(0).at(j, 0);
        CHECK(tr.omega({0, MatrixTag::W2, 0}, t) == doctest::Approx(s).epsilon(1e-12));
    }
    CHECK(g.logits.value().bit_equal(tr.logits));
}

TEST_CASE("neuron inventory and flat indexing") {
    auto cfg = tiny();
    CHECK(total_neurons(cfg) == 2u * (16 + 8));
    auto all = all_neurons(cfg);
    for (std::size_t i = 0; i < all.size(); ++i) {
        CHECK(flat_index(cfg, all[i]) == i);
        CHECK(neuron_at(cfg, i) == all[i]);
        if (i) CHECK(all[i - 1] < all[i]);
    }
    CHECK_THROWS_AS(check_neuron(cfg, {2, MatrixTag::W1, 0}), InputError);
    CHECK_THROWS_AS(check_neuron(cfg, {0, MatrixTag::W2, 8}), InputError);
    cfg.w1_only = true;
    CHECK(total_neurons(cfg) == 32u);
    CHECK_THROWS_AS(check_neuron(cfg, {0, MatrixTag::W2, 0}), InputError);
}

TEST_CASE("config validation") {
    ModelConfig c = tiny();
    c.num_heads = 3;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = tiny();
    c.d_ff = 0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    nlohmann::json j = tiny();
    CHECK(j.get<ModelConfig>() == tiny());
}

TEST_CASE("checkpoint round trip is bit exact") {
    auto m = ModelState::initialize(tiny());
    auto path = std::filesystem::temp_directory_path() / "nlab_test_ckpt.bin";
    save_checkpoint(m, path);
    auto back = load_checkpoint(path);
    CHECK(back.bit_equal(m));
    CHECK(back.config() == m.config());
    std::filesystem::remove(path);
    CHECK_THROWS_AS(load_checkpoint(path), FileError);
}
