// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <random>

#include "neuronlab/autograd.hpp"
#include "neuronlab/error.hpp"
#include "neuronlab/finite_diff.hpp"
#include "support/random_graphs.hpp"

using namespace nlab;
using namespace nlab::ag;

TEST_CASE("tensor rejects non-finite data and bad shapes") {
    CHECK_THROWS_AS(Tensor({2}, std::vector<double>{1.0, NAN}), NumericFault);
    CHECK_THROWS_AS(Tensor({2, 2}, std::vector<double>{1.0, 2.0}), ContractViolation);
    CHECK_THROWS_AS(Tensor({0, 2}), ContractViolation);
    CHECK(Tensor::scalar(4.0).item() == 4.0);
}

TEST_CASE("x squared at 3 has derivative 6") {
    Tensor x = Tensor::scalar(3.0);
    Tape tape;
    Var v = tape.parameter("x", x);
    auto rec = tape.backward(mul(v, v));
    CHECK(rec.param("x").item() == 6.0);
}

TEST_CASE("constant function has zero derivative") {
    Tensor x = Tensor::scalar(3.0);
    Tape tape;
    tape.parameter("x", x);
    Var c = tape.constant(Tensor::scalar(7.0));
    Var loss = scale(c, 1.0);
    auto rec = tape.backward(loss);
    CHECK(rec.param("x").item() == 0.0);
}

TEST_CASE("matmul-then-sum gradient matches central differences") {
    std::mt19937_64 rng(11);
    std::vector<Tensor> p = {testing::random_tensor(rng, {4, 4}, 1.0), testing::random_tensor(rng, {4, 4}, 1.0)};
    auto f = [](const std::vector<Tensor>& q) {
        Tape t;
        return sum(matmul(t.constant(q[0]), t.constant(q[1]))).value().item();
    };
    Tape tape;
    Var a = tape.parameter("a", p[0]);
    Var b = tape.parameter("b", p[1]);
    auto rec = tape.backward(sum(matmul(a, b)));
    auto fd = finite_diff_grad(f, p, 1e-5);
    CHECK(max_relative_error({rec.param("a"), rec.param("b")}, fd.grads) < 1e-6);
}

TEST_CASE("finite differences: polynomial, bilinear and kink") {
    auto square = [](const std::vector<Tensor>& q) { return q[0][0] * q[0][0]; };
    auto r = finite_diff_grad(square, {Tensor::scalar(3.0)}, 1e-4);
    CHECK(r.grads[0][0] == doctest::Approx(6.0).epsilon(1e-6));
    CHECK(r.non_smooth.empty());

    auto bilinear = [](const std::vector<Tensor>& q) { return q[0][0] * q[1][0]; };
    r = finite_diff_grad(bilinear, {Tensor::scalar(2.0), Tensor::scalar(5.0)}, 1e-4);
    CHECK(std::abs(r.grads[0][0] - 5.0) < 1e-6);
    CHECK(std::abs(r.grads[1][0] - 2.0) < 1e-6);

    auto absval = [](const std::vector<Tensor>& q) { return std::abs(q[0][0]); };
    r = finite_diff_grad(absval, {Tensor::scalar(0.0)}, 1e-4);
    CHECK(r.grads[0][0] == 0.0);
    REQUIRE(r.non_smooth.size() == 1);

    CHECK_THROWS_AS(finite_diff_grad(square, {Tensor::scalar(1.0)}, 0.0), InputError);
    CHECK_THROWS_AS(finite_diff_grad(square, {Tensor::scalar(1.0)}, -1e-3), InputError);
}

TEST_CASE("backward requires a scalar loss") {
    Tensor x = Tensor::matrix({{1.0, 2.0}});
    Tape tape;
    Var v = tape.parameter("x", x);
    CHECK_THROWS_AS(tape.backward(scale(v, 2.0)), ContractViolation);
}

TEST_CASE("non-finite forward value names the op") {
    Tensor big = Tensor::matrix({{700.0, 1.0}});
    Tape tape;
    Var v = tape.parameter("x", big);
    Var e = scale(v, 1e200);
    try {
        mul(e, e);
        FAIL("expected a numeric fault");
    } catch (const NumericFault& f) {
        CHECK(f.op() == "mul");
    }
}

TEST_CASE("rectifier uses subgradient zero at the kink") {
    CHECK(activate_grad(Activation::relu, 0.0) == 0.0);
    CHECK(activate_grad(Activation::relu, 1e-12) == 1.0);
    for (auto a : {Activation::relu, Activation::silu, Activation::gelu}) {
        CHECK(activate(a, 0.0) == 0.0);
    }
}

TEST_CASE("softmax rows sum to one and causal rows ignore the future") {
    Tensor x = Tensor::matrix({{1.0, 2.0, 3.0}, {0.5, -1.0, 2.0}, {0.0, 0.0, 0.0}});
    Tape tape;
    Var s = softmax_rows(tape.constant(x), true);
    const Tensor& y = s.value();
    CHECK(y.at(0, 0) == 1.0);
    CHECK(y.at(0, 1) == 0.0);
    CHECK(y.at(1, 2) == 0.0);
    CHECK(y.at(2, 0) + y.at(2, 1) + y.at(2, 2) == doctest::Approx(1.0));
}

TEST_CASE("backward is bit-deterministic") {
    std::mt19937_64 rng(5);
    auto g = testing::make_random_graph(rng, 0);
    auto run = [&] {
        Tape t;
        return t.backward(g.build(t, g.params));
    };
    auto a = run();
    auto b = run();
    for (const auto& [k, v] : a.params) CHECK(v.bit_equal(b.params.at(k)));
}

TEST_CASE("gradient of a sum is the sum of gradients") {
    std::mt19937_64 rng(9);
    for (int trial = 0; trial < 10; ++trial) {
        auto g1 = testing::make_random_graph(rng, trial);
        auto g2 = g1;
        g2.variant = trial + 1;
        Tape t1, t2, both;
        auto r1 = t1.backward(g1.build(t1, g1.params));
        auto r2 = t2.backward(g2.build(t2, g1.params));
        std::vector<Var> leaves;
        for (std::size_t i = 0; i < g1.params.size(); ++i) leaves.push_back(both.parameter(testing::param_names[i], g1.params[i]));
        auto r12 = both.backward(add(g1.build_from(leaves), g2.build_from(leaves)));
        for (const auto& [k, v] : r12.params) {
            const Tensor& a = r1.params.at(k);
            const Tensor& b = r2.params.at(k);
            for (std::size_t i = 0; i < v.size(); ++i) {
                CHECK(v[i] == doctest::Approx(a[i] + b[i]).epsilon(1e-12).scale(1.0));
            }
        }
    }
}

TEST_CASE("random graphs: backward agrees with central differences") {
    std::mt19937_64 rng(2024);
    int checked = 0;
    for (int trial = 0; trial < 40; ++trial) {
        auto g = testing::make_random_graph(rng, trial);
        Tape tape;
        double min_pre = 0.0;
        Var loss = g.build(tape, g.params, &min_pre);
        if (g.act == Activation::relu && min_pre < 1e-3) continue;
        auto rec = tape.backward(loss);
        std::vector<Tensor> analytic;
        for (const char* k : {"table", "w", "bias", "gamma", "beta"}) analytic.push_back(rec.param(k));
        auto fd = finite_diff_grad([&](const std::vector<Tensor>& q) { return g.loss(q); }, g.params, 1e-5);
        CHECK(max_relative_error(analytic, fd.grads) < 1e-4);
        ++checked;
    }
    CHECK(checked >= 20);
}
