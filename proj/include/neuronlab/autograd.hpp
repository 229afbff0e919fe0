// SPDX-License-Identifier: Apache-2.0
#pragma once

// Tape-based reverse-mode differentiation over rank-2 tensors.
//
// A Tape records every op applied to its Vars. `backward(loss)` walks the
// recording in reverse and returns gradients for every parameter leaf and
// every tapped intermediate node. Values on a tape are never mutated after
// they are recorded; a tape belongs to one thread at a time.

#include <cstddef>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "neuronlab/tensor.hpp"

namespace nlab::ag {

/// Elementwise nonlinearities. All satisfy f(0) = 0.
enum class Activation { relu, silu, gelu };

double activate(Activation act, double x) noexcept;
/// Derivative; the rectifier uses subgradient 0 at its kink.
double activate_grad(Activation act, double x) noexcept;
std::string_view activation_name(Activation act) noexcept;
Activation parse_activation(std::string_view name);

class Tape;

class Var {
public:
    Var() = default;

    const Tensor& value() const;
    Tape& tape() const { return *tape_; }
    std::size_t id() const noexcept { return id_; }
    bool valid() const noexcept { return tape_ != nullptr; }

private:
    friend class Tape;
    Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

    Tape* tape_ = nullptr;
    std::size_t id_ = 0;
};

struct GradientRecord {
    /// d loss / d parameter, keyed by the name given to `Tape::parameter`.
    std::map<std::string, Tensor> params;
    /// d loss / d tapped node, keyed by the name given to `Tape::tap`.
    std::map<std::string, Tensor> taps;

    const Tensor& param(const std::string& key) const;
    const Tensor& tap(const std::string& key) const;
};

class Tape {
public:
    using BackwardFn = std::function<void(Tape&, std::size_t self)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    /// Leaf owned by the tape; no gradient.
    Var constant(Tensor value);
    /// Non-owning leaf; `value` must outlive the tape. No gradient.
    Var constant_ref(const Tensor& value);
    /// Non-owning leaf whose gradient is reported under `key`.
    Var parameter(std::string key, const Tensor& value);
    /// Export the gradient of an intermediate node under `key`. Only ops recorded
    /// after the tap propagate into it.
    void tap(Var v, std::string key);

    /// Reverse sweep from a scalar loss.
    GradientRecord backward(Var loss);

    std::size_t size() const noexcept { return nodes_.size(); }

    // -- op authoring interface ------------------------------------------
    Var record(std::string_view op, Tensor value, std::vector<std::size_t> parents, BackwardFn fn);
    const Tensor& value(std::size_t id) const;
    bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
    /// Gradient accumulator for node `id`, zero-initialised on first use.
    Tensor& grad(std::size_t id);
    std::string_view op_name(std::size_t id) const { return nodes_[id].op; }

private:
    struct Node {
        std::string_view op;
        Tensor owned;
        const Tensor* external = nullptr;
        std::vector<std::size_t> parents;
        BackwardFn backward;
        bool requires_grad = false;
        bool has_grad = false;
        Tensor grad;
    };

    Var push(Node node);

    std::vector<Node> nodes_;
    std::map<std::string, std::size_t> params_;
    std::map<std::string, std::size_t> taps_;
    bool swept_ = false;
};

enum class Reduction { mean, sum };

// -- supported op set ---------------------------------------------------
Var matmul(Var a, Var b);
/// Same-shape add, or broadcast of a [1 x n] row over every row of `a`.
Var add(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double factor);
Var sum(Var a);
Var transpose(Var a);
Var activation(Var a, Activation act);
/// Row-wise softmax; with `causal`, entry (i, j) for j > i is excluded.
Var softmax_rows(Var a, bool causal = false);
/// Row r attends to columns [first_col[r], r]; packs several causal sequences into one matrix.
Var softmax_segments(Var a, std::vector<std::size_t> first_col);
Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5);
/// Rows of `table` selected by `ids`.
Var embedding(Var table, std::span<const int> ids);
/// Softmax cross-entropy over rows of `logits`; target -1 marks an ignored row.
Var cross_entropy(Var logits, std::span<const int> targets, Reduction reduction = Reduction::mean);
Var slice_cols(Var a, std::size_t start, std::size_t count);
Var concat_cols(std::span<const Var> parts);
/// Columns flagged in `zeroed` are replaced by exact 0.0; their gradient is cut.
Var zero_cols(Var a, std::span<const char> zeroed);

}  // namespace nlab::ag
