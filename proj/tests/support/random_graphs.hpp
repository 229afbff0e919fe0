// SPDX-License-Identifier: Apache-2.0
#pragma once

// Random small computations over the full op set, for checking backward
// against central finite differences.

#include <cmath>
#include <random>
#include <vector>

#include "neuronlab/autograd.hpp"
#include "neuronlab/finite_diff.hpp"

namespace nlab::testing {

inline constexpr const char* param_names[] = {"table", "w", "bias", "gamma", "beta"};

struct RandomGraph {
    std::vector<Tensor> params;
    std::vector<Tensor> constants;
    std::vector<int> ids;
    std::vector<int> targets;
    ag::Activation act = ag::Activation::gelu;
    bool causal = false;
    int variant = 0;
    std::size_t rows = 0;

    /// Records the computation for `p` on `tape` and returns the scalar loss.
    /// Also reports the smallest |pre-activation| seen, so callers can skip
    /// inputs that sit within epsilon of a rectifier kink.
    ag::Var build(ag::Tape& tape, const std::vector<Tensor>& p, double* min_abs_preact = nullptr) const {
        std::vector<ag::Var> leaves;
        for (std::size_t i = 0; i < p.size(); ++i) leaves.push_back(tape.parameter(param_names[i], p[i]));
        return build_from(leaves, min_abs_preact);
    }

    ag::Var build_from(const std::vector<ag::Var>& leaves, double* min_abs_preact = nullptr) const {
        using namespace ag;
        Tape& tape = leaves[0].tape();
        Var table = leaves[0], w = leaves[1], bias = leaves[2], gamma = leaves[3], beta = leaves[4];
        Var x = embedding(table, ids);                  // rows x 4
        Var h = add(matmul(x, w), bias);                // rows x 6
        if (min_abs_preact) {
            double m = INFINITY;
            for (double v : h.value().data()) m = std::min(m, std::abs(v));
            *min_abs_preact = m;
        }
        Var a = activation(h, act);
        Var n = layer_norm(a, gamma, beta);
        Var left = slice_cols(n, 0, 3);
        Var right = slice_cols(n, 3, 3);
        Var parts[] = {right, left};
        Var swapped = concat_cols(parts);
        Var mixed = mul(swapped, tape.constant(constants[0]));
        switch (variant % 3) {
            case 0: {
                Var scores = matmul(mixed, transpose(mixed));  // rows x rows
                Var attn = softmax_rows(scale(scores, 0.5), causal);
                Var ctx = matmul(attn, mixed);
                return cross_entropy(ctx, targets);
            }
            case 1: return sum(mul(mixed, mixed));
            default: return cross_entropy(add(mixed, swapped), targets, Reduction::sum);
        }
    }

    double loss(const std::vector<Tensor>& p) const {
        ag::Tape tape;
        return build(tape, p).value().item();
    }
};

inline Tensor random_tensor(std::mt19937_64& rng, std::vector<std::size_t> shape, double scale) {
    Tensor t(std::move(shape));
    std::uniform_real_distribution<double> u(-scale, scale);
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = u(rng);
    return t;
}

inline RandomGraph make_random_graph(std::mt19937_64& rng, int variant) {
    RandomGraph g;
    g.variant = variant;
    g.rows = 2 + rng() % 4;
    g.act = static_cast<ag::Activation>(rng() % 3);
    g.causal = (rng() % 2) == 0;
    std::size_t vocab = 5;
    g.params.push_back(random_tensor(rng, {vocab, 4}, 1.0));
    g.params.push_back(random_tensor(rng, {4, 6}, 1.0));
    g.params.push_back(random_tensor(rng, {1, 6}, 0.5));
    g.params.push_back(random_tensor(rng, {1, 6}, 1.5));
    g.params.push_back(random_tensor(rng, {1, 6}, 0.5));
    g.constants.push_back(random_tensor(rng, {g.rows, 6}, 1.0));
    for (std::size_t r = 0; r < g.rows; ++r) {
        g.ids.push_back(static_cast<int>(rng() % vocab));
        g.targets.push_back(r == 0 ? -1 : static_cast<int>(rng() % 6));
    }
    return g;
}

}  // namespace nlab::testing
