// SPDX-License-Identifier: Apache-2.0
#include "neuronlab/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include <Eigen/Core>

#include "neuronlab/error.hpp"

namespace nlab::ag {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMatrix>;
using MutMap = Eigen::Map<RowMatrix>;

namespace {

ConstMap as_matrix(const Tensor& t) { return ConstMap(t.ptr(), t.rows(), t.cols()); }
MutMap as_matrix(Tensor& t) { return MutMap(t.ptr(), t.rows(), t.cols()); }

double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }
double normal_pdf(double x) { return std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi); }
double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

void require_matrix(const Tensor& t, const char* op) {
    if (t.rank() != 2) {
        throw ContractViolation(std::string(op) + ": expected a rank-2 tensor, got " + t.shape_string());
    }
}

Tensor same_shape_like(const Tensor& t) { return Tensor(t.shape(), 0.0); }

}  // namespace

double activate(Activation act, double x) noexcept {
    switch (act) {
        case Activation::relu: return x > 0.0 ? x : 0.0;
        case Activation::silu: return x * sigmoid(x);
        case Activation::gelu: return x * normal_cdf(x);
    }
    return 0.0;
}

double activate_grad(Activation act, double x) noexcept {
    switch (act) {
        case Activation::relu: return x > 0.0 ? 1.0 : 0.0;
        case Activation::silu: {
            double s = sigmoid(x);
            return s + x * s * (1.0 - s);
        }
        case Activation::gelu: return normal_cdf(x) + x * normal_pdf(x);
    }
    return 0.0;
}

std::string_view activation_name(Activation act) noexcept {
    switch (act) {
        case Activation::relu: return "relu";
        case Activation::silu: return "silu";
        case Activation::gelu: return "gelu";
    }
    return "?";
}

Activation parse_activation(std::string_view name) {
    if (name == "relu") return Activation::relu;
    if (name == "silu") return Activation::silu;
    if (name == "gelu") return Activation::gelu;
    throw InputError("unknown activation '" + std::string(name) + "' (expected relu|silu|gelu)");
}

// -- Var / GradientRecord ------------------------------------------------

const Tensor& Var::value() const { return tape_->value(id_); }

const Tensor& GradientRecord::param(const std::string& key) const {
    auto it = params.find(key);
    if (it == params.end()) throw ContractViolation("no gradient recorded for parameter '" + key + "'");
    return it->second;
}

const Tensor& GradientRecord::tap(const std::string& key) const {
    auto it = taps.find(key);
    if (it == taps.end()) throw ContractViolation("no gradient recorded for tap '" + key + "'");
    return it->second;
}

// -- Tape ----------------------------------------------------------------

Var Tape::push(Node node) {
    nodes_.push_back(std::move(node));
    return Var(this, nodes_.size() - 1);
}

Var Tape::constant(Tensor value) {
    value.require_finite("constant");
    Node n;
    n.op = "constant";
    n.owned = std::move(value);
    return push(std::move(n));
}

Var Tape::constant_ref(const Tensor& value) {
    value.require_finite("constant");
    Node n;
    n.op = "constant";
    n.external = &value;
    return push(std::move(n));
}

Var Tape::parameter(std::string key, const Tensor& value) {
    value.require_finite("parameter");
    if (params_.contains(key)) {
        throw ContractViolation("parameter '" + key + "' registered twice on one tape");
    }
    Node n;
    n.op = "parameter";
    n.external = &value;
    n.requires_grad = true;
    Var v = push(std::move(n));
    params_.emplace(std::move(key), v.id());
    return v;
}

void Tape::tap(Var v, std::string key) {
    if (v.tape_ != this) throw ContractViolation("tap: variable belongs to another tape");
    // ops recorded after this point propagate gradient back to the tapped value
    nodes_[v.id()].requires_grad = true;
    taps_[std::move(key)] = v.id();
}

const Tensor& Tape::value(std::size_t id) const {
    const Node& n = nodes_[id];
    return n.external ? *n.external : n.owned;
}

Tensor& Tape::grad(std::size_t id) {
    Node& n = nodes_[id];
    if (!n.has_grad) {
        n.grad = same_shape_like(value(id));
        n.has_grad = true;
    }
    return n.grad;
}

Var Tape::record(std::string_view op, Tensor value, std::vector<std::size_t> parents, BackwardFn fn) {
    value.require_finite(std::string(op));
    Node n;
    n.op = op;
    n.owned = std::move(value);
    for (auto p : parents) {
        n.requires_grad = n.requires_grad || nodes_.at(p).requires_grad;
    }
    n.parents = std::move(parents);
    if (n.requires_grad) n.backward = std::move(fn);
    return push(std::move(n));
}

GradientRecord Tape::backward(Var loss) {
    if (loss.tape_ != this) throw ContractViolation("backward: loss belongs to another tape");
    if (swept_) throw ContractViolation("backward: tape already swept");
    const Tensor& lv = value(loss.id());
    if (lv.size() != 1) {
        throw ContractViolation("backward: loss must be a scalar, got shape " + lv.shape_string());
    }
    swept_ = true;
    grad(loss.id()).fill(1.0);
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
        Node& n = nodes_[i];
        if (!n.has_grad) continue;
        // every consumer has run by now, so the gradient is complete
        if (!n.grad.all_finite()) {
            throw NumericFault(std::string(n.op), "non-finite gradient reaching op '" + std::string(n.op) + "'");
        }
        if (n.backward) n.backward(*this, i);
    }
    GradientRecord rec;
    for (const auto& [key, id] : params_) {
        rec.params.emplace(key, nodes_[id].has_grad ? std::move(nodes_[id].grad) : same_shape_like(value(id)));
    }
    for (const auto& [key, id] : taps_) {
        rec.taps.emplace(key, nodes_[id].has_grad ? Tensor(nodes_[id].grad) : same_shape_like(value(id)));
    }
    return rec;
}

// -- ops -----------------------------------------------------------------

Var matmul(Var a, Var b) {
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    require_matrix(av, "matmul");
    require_matrix(bv, "matmul");
    if (av.cols() != bv.rows()) {
        throw ContractViolation("matmul: inner extents differ " + av.shape_string() + " x " + bv.shape_string());
    }
    Tensor out({av.rows(), bv.cols()});
    as_matrix(out).noalias() = as_matrix(av) * as_matrix(bv);
    std::size_t ia = a.id(), ib = b.id();
    return a.tape().record("matmul", std::move(out), {ia, ib}, [ia, ib](Tape& t, std::size_t self) {
        const Tensor& g = t.grad(self);
        if (t.requires_grad(ia)) {
            as_matrix(t.grad(ia)).noalias() += as_matrix(g) * as_matrix(t.value(ib)).transpose();
        }
        if (t.requires_grad(ib)) {
            as_matrix(t.grad(ib)).noalias() += as_matrix(t.value(ia)).transpose() * as_matrix(g);
        }
    });
}

Var add(Var a, Var b) {
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    bool broadcast = !av.same_shape(bv);
    if (broadcast && !(av.rank() == 2 && bv.rank() == 2 && bv.rows() == 1 && bv.cols() == av.cols())) {
        throw ContractViolation("add: incompatible shapes " + av.shape_string() + " + " + bv.shape_string());
    }
    Tensor out = av;
    std::size_t cols = av.cols();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += broadcast ? bv[i % cols] : bv[i];
    std::size_t ia = a.id(), ib = b.id();
    return a.tape().record("add", std::move(out), {ia, ib}, [ia, ib, broadcast, cols](Tape& t, std::size_t self) {
        const Tensor& g = t.grad(self);
        if (t.requires_grad(ia)) {
            Tensor& ga = t.grad(ia);
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
        if (t.requires_grad(ib)) {
            Tensor& gb = t.grad(ib);
            for (std::size_t i = 0; i < g.size(); ++i) gb[broadcast ? i % cols : i] += g[i];
        }
    });
}

Var mul(Var a, Var b) {
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (!av.same_shape(bv)) {
        throw ContractViolation("mul: incompatible shapes " + av.shape_string() + " * " + bv.shape_string());
    }
    Tensor out = av;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
    std::size_t ia = a.id(), ib = b.id();
    return a.tape().record("mul", std::move(out), {ia, ib}, [ia, ib](Tape& t, std::size_t self) {
        const Tensor& g = t.grad(self);
        if (t.requires_grad(ia)) {
            Tensor& ga = t.grad(ia);
            const Tensor& bv = t.value(ib);
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
        }
        if (t.requires_grad(ib)) {
            Tensor& gb = t.grad(ib);
            const Tensor& av = t.value(ia);
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
        }
    });
}

Var scale(Var a, double factor) {
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= factor;
    std::size_t ia = a.id();
    return a.tape().record("scale", std::move(out), {ia}, [ia, factor](Tape& t, std::size_t self) {
        const Tensor& g = t.grad(self);
        Tensor& ga = t.grad(ia);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * factor;
    });
}

Var sum(Var a) {
    const Tensor& av = a.value();
    double s = 0.0;
    for (double v : av.data()) s += v;
    std::size_t ia = a.id();
    return a.tape().record("sum", Tensor::scalar(s), {ia}, [ia](Tape& t, std::size_t self) {
        double g = t.grad(self).item();
        Tensor& ga = t.grad(ia);
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g;
    });
}

Var transpose(Var a) {
    const Tensor& av = a.value();
    require_matrix(av, "transpose");
    Tensor out({av.cols(), av.rows()});
    as_matrix(out) = as_matrix(av).transpose();
    std::size_t ia = a.id();
    return a.tape().record("transpose", std::move(out), {ia}, [ia](Tape& t, std::size_t self) {
        as_matrix(t.grad(ia)) += as_matrix(t.grad(self)).transpose();
    });
}

Var activation(Var a, Activation act) {
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = activate(act, out[i]);
    std::size_t ia = a.id();
    return a.tape().record("activation", std::move(out), {ia}, [ia, act](Tape& t, std::size_t self) {
        const Tensor& g = t.grad(self);
        const Tensor& x = t.value(ia);
        Tensor& ga = t.grad(ia);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * activate_grad(act, x[i]);
    });
}

namespace {

// Softmax of row r over columns [lo[r], hi[r]); everything outside is exactly 0.
Var masked_softmax(Var a, std::vector<std::size_t> lo, std::vector<std::size_t> hi) {
    const Tensor& av = a.value();
    std::size_t rows = av.rows(), cols = av.cols();
    Tensor out({rows, cols});
    for (std::size_t r = 0; r < rows; ++r) {
        const double* x = av.ptr() + r * cols;
        double* y = out.ptr() + r * cols;
        double mx = x[lo[r]];
        for (std::size_t c = lo[r] + 1; c < hi[r]; ++c) mx = std::max(mx, x[c]);
        double z = 0.0;
        for (std::size_t c = lo[r]; c < hi[r]; ++c) {
            y[c] = std::exp(x[c] - mx);
            z += y[c];
        }
        for (std::size_t c = lo[r]; c < hi[r]; ++c) y[c] /= z;
    }
    std::size_t ia = a.id();
    return a.tape().record("softmax", std::move(out), {ia},
                           [ia, cols, lo = std::move(lo), hi = std::move(hi)](Tape& t, std::size_t self) {
                               const Tensor& g = t.grad(self);
                               const Tensor& y = t.value(self);
                               Tensor& ga = t.grad(ia);
                               for (std::size_t r = 0; r < lo.size(); ++r) {
                                   const double* yr = y.ptr() + r * cols;
                                   const double* gr = g.ptr() + r * cols;
                                   double dot = 0.0;
                                   for (std::size_t c = lo[r]; c < hi[r]; ++c) dot += yr[c] * gr[c];
                                   double* out = ga.ptr() + r * cols;
                                   for (std::size_t c = lo[r]; c < hi[r]; ++c) out[c] += yr[c] * (gr[c] - dot);
                               }
                           });
}

}  // namespace

Var softmax_rows(Var a, bool causal) {
    const Tensor& av = a.value();
    require_matrix(av, "softmax");
    std::size_t rows = av.rows(), cols = av.cols();
    std::vector<std::size_t> lo(rows, 0), hi(rows, cols);
    if (causal) {
        for (std::size_t r = 0; r < rows; ++r) hi[r] = std::min(cols, r + 1);
    }
    return masked_softmax(a, std::move(lo), std::move(hi));
}

Var softmax_segments(Var a, std::vector<std::size_t> first_col) {
    const Tensor& av = a.value();
    require_matrix(av, "softmax");
    std::size_t rows = av.rows(), cols = av.cols();
    if (first_col.size() != rows || rows != cols) {
        throw ContractViolation("softmax_segments: need a square matrix and one start per row");
    }
    std::vector<std::size_t> hi(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        if (first_col[r] > r) throw ContractViolation("softmax_segments: segment start after its row");
        hi[r] = r + 1;
    }
    return masked_softmax(a, std::move(first_col), std::move(hi));
}

Var layer_norm(Var x, Var gamma, Var beta, double eps) {
    const Tensor& xv = x.value();
    const Tensor& gv = gamma.value();
    const Tensor& bv = beta.value();
    require_matrix(xv, "layer_norm");
    std::size_t rows = xv.rows(), cols = xv.cols();
    if (gv.size() != cols || bv.size() != cols) {
        throw ContractViolation("layer_norm: gain/bias length must equal " + std::to_string(cols));
    }
    Tensor out({rows, cols});
    // normalised activations and inverse std are needed by the backward pass
    Tensor xhat({rows, cols});
    std::vector<double> inv_std(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = xv.ptr() + r * cols;
        double mean = 0.0;
        for (std::size_t c = 0; c < cols; ++c) mean += xr[c];
        mean /= static_cast<double>(cols);
        double var = 0.0;
        for (std::size_t c = 0; c < cols; ++c) var += (xr[c] - mean) * (xr[c] - mean);
        var /= static_cast<double>(cols);
        double is = 1.0 / std::sqrt(var + eps);
        inv_std[r] = is;
        for (std::size_t c = 0; c < cols; ++c) {
            double h = (xr[c] - mean) * is;
            xhat.at(r, c) = h;
            out.at(r, c) = h * gv[c] + bv[c];
        }
    }
    std::size_t ix = x.id(), ig = gamma.id(), ib = beta.id();
    return x.tape().record(
        "layer_norm", std::move(out), {ix, ig, ib},
        [ix, ig, ib, rows, cols, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape& t, std::size_t self) {
            const Tensor& g = t.grad(self);
            const Tensor& gv = t.value(ig);
            if (t.requires_grad(ig) || t.requires_grad(ib)) {
                Tensor* gg = t.requires_grad(ig) ? &t.grad(ig) : nullptr;
                Tensor* gb = t.requires_grad(ib) ? &t.grad(ib) : nullptr;
                for (std::size_t r = 0; r < rows; ++r) {
                    for (std::size_t c = 0; c < cols; ++c) {
                        if (gg) (*gg)[c] += g.at(r, c) * xhat.at(r, c);
                        if (gb) (*gb)[c] += g.at(r, c);
                    }
                }
            }
            if (!t.requires_grad(ix)) return;
            Tensor& gx = t.grad(ix);
            double n = static_cast<double>(cols);
            for (std::size_t r = 0; r < rows; ++r) {
                double sum_dh = 0.0, sum_dh_h = 0.0;
                for (std::size_t c = 0; c < cols; ++c) {
                    double dh = g.at(r, c) * gv[c];
                    sum_dh += dh;
                    sum_dh_h += dh * xhat.at(r, c);
                }
                for (std::size_t c = 0; c < cols; ++c) {
                    double dh = g.at(r, c) * gv[c];
                    gx.at(r, c) += inv_std[r] * (dh - sum_dh / n - xhat.at(r, c) * sum_dh_h / n);
                }
            }
        });
}

Var embedding(Var table, std::span<const int> ids) {
    const Tensor& tv = table.value();
    require_matrix(tv, "embedding");
    std::size_t d = tv.cols();
    if (ids.empty()) throw ContractViolation("embedding: empty id list");
    Tensor out({ids.size(), d});
    for (std::size_t r = 0; r < ids.size(); ++r) {
        if (ids[r] < 0 || static_cast<std::size_t>(ids[r]) >= tv.rows()) {
            throw InputError("embedding: id " + std::to_string(ids[r]) + " outside table of " +
                             std::to_string(tv.rows()) + " rows");
        }
        std::copy_n(tv.ptr() + static_cast<std::size_t>(ids[r]) * d, d, out.ptr() + r * d);
    }
    std::size_t it = table.id();
    std::vector<int> idv(ids.begin(), ids.end());
    return table.tape().record("embedding", std::move(out), {it}, [it, d, idv = std::move(idv)](Tape& t, std::size_t self) {
        const Tensor& g = t.grad(self);
        Tensor& gt = t.grad(it);
        for (std::size_t r = 0; r < idv.size(); ++r) {
            double* dst = gt.ptr() + static_cast<std::size_t>(idv[r]) * d;
            const double* src = g.ptr() + r * d;
            for (std::size_t c = 0; c < d; ++c) dst[c] += src[c];
        }
    });
}

Var cross_entropy(Var logits, std::span<const int> targets, Reduction reduction) {
    const Tensor& lv = logits.value();
    require_matrix(lv, "cross_entropy");
    if (targets.size() != lv.rows()) {
        throw ContractViolation("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                                std::to_string(lv.rows()) + " logit rows");
    }
    std::size_t rows = lv.rows(), cols = lv.cols();
    Tensor probs({rows, cols});
    double total = 0.0;
    std::size_t counted = 0;
    for (std::size_t r = 0; r < rows; ++r) {
        if (targets[r] < 0) continue;
        if (static_cast<std::size_t>(targets[r]) >= cols) {
            throw InputError("cross_entropy: target " + std::to_string(targets[r]) + " outside " +
                             std::to_string(cols) + " classes");
        }
        const double* x = lv.ptr() + r * cols;
        double* p = probs.ptr() + r * cols;
        double mx = *std::max_element(x, x + cols);
        double z = 0.0;
        for (std::size_t c = 0; c < cols; ++c) {
            p[c] = std::exp(x[c] - mx);
            z += p[c];
        }
        for (std::size_t c = 0; c < cols; ++c) p[c] /= z;
        total += -(x[targets[r]] - mx - std::log(z));
        ++counted;
    }
    if (counted == 0) throw InputError("cross_entropy: no target positions");
    double norm = reduction == Reduction::mean ? 1.0 / static_cast<double>(counted) : 1.0;
    std::size_t il = logits.id();
    std::vector<int> tv(targets.begin(), targets.end());
    return logits.tape().record(
        "cross_entropy", Tensor::scalar(total * norm), {il},
        [il, rows, cols, norm, tv = std::move(tv), probs = std::move(probs)](Tape& t, std::size_t self) {
            double g = t.grad(self).item() * norm;
            Tensor& gl = t.grad(il);
            for (std::size_t r = 0; r < rows; ++r) {
                if (tv[r] < 0) continue;
                const double* p = probs.ptr() + r * cols;
                double* out = gl.ptr() + r * cols;
                for (std::size_t c = 0; c < cols; ++c) out[c] += g * p[c];
                out[tv[r]] -= g;
            }
        });
}

Var slice_cols(Var a, std::size_t start, std::size_t count) {
    const Tensor& av = a.value();
    require_matrix(av, "slice_cols");
    if (count == 0 || start + count > av.cols()) throw ContractViolation("slice_cols: range out of bounds");
    std::size_t rows = av.rows(), cols = av.cols();
    Tensor out({rows, count});
    for (std::size_t r = 0; r < rows; ++r) std::copy_n(av.ptr() + r * cols + start, count, out.ptr() + r * count);
    std::size_t ia = a.id();
    return a.tape().record("slice_cols", std::move(out), {ia}, [ia, start, count, rows, cols](Tape& t, std::size_t self) {
        const Tensor& g = t.grad(self);
        Tensor& ga = t.grad(ia);
        for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t c = 0; c < count; ++c) ga[r * cols + start + c] += g[r * count + c];
        }
    });
}

Var concat_cols(std::span<const Var> parts) {
    if (parts.empty()) throw ContractViolation("concat_cols: no inputs");
    std::size_t rows = parts[0].value().rows();
    std::size_t total = 0;
    std::vector<std::size_t> ids, widths;
    for (const Var& p : parts) {
        require_matrix(p.value(), "concat_cols");
        if (p.value().rows() != rows) throw ContractViolation("concat_cols: row counts differ");
        total += p.value().cols();
        ids.push_back(p.id());
        widths.push_back(p.value().cols());
    }
    Tensor out({rows, total});
    std::size_t off = 0;
    for (const Var& p : parts) {
        const Tensor& pv = p.value();
        for (std::size_t r = 0; r < rows; ++r) std::copy_n(pv.ptr() + r * pv.cols(), pv.cols(), out.ptr() + r * total + off);
        off += pv.cols();
    }
    return parts[0].tape().record("concat_cols", std::move(out), ids, [ids, widths, rows, total](Tape& t, std::size_t self) {
        const Tensor& g = t.grad(self);
        std::size_t off = 0;
        for (std::size_t k = 0; k < ids.size(); ++k) {
            if (t.requires_grad(ids[k])) {
                Tensor& gp = t.grad(ids[k]);
                for (std::size_t r = 0; r < rows; ++r) {
                    for (std::size_t c = 0; c < widths[k]; ++c) gp[r * widths[k] + c] += g[r * total + off + c];
                }
            }
            off += widths[k];
        }
    });
}

Var zero_cols(Var a, std::span<const char> zeroed) {
    const Tensor& av = a.value();
    require_matrix(av, "zero_cols");
    std::size_t rows = av.rows(), cols = av.cols();
    if (zeroed.size() != cols) throw ContractViolation("zero_cols: mask length differs from column count");
    Tensor out = av;
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) {
            if (zeroed[c]) out[r * cols + c] = 0.0;
        }
    }
    std::size_t ia = a.id();
    std::vector<char> mask(zeroed.begin(), zeroed.end());
    return a.tape().record("zero_cols", std::move(out), {ia}, [ia, rows, cols, mask = std::move(mask)](Tape& t, std::size_t self) {
        const Tensor& g = t.grad(self);
        Tensor& ga = t.grad(ia);
        for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t c = 0; c < cols; ++c) {
                if (!mask[c]) ga[r * cols + c] += g[r * cols + c];
            }
        }
    });
}

}  // namespace nlab::ag
