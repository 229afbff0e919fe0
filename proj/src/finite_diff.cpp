// SPDX-License-Identifier: Apache-2.0
#include "neuronlab/finite_diff.hpp"

#include <algorithm>
#include <cmath>

#include "neuronlab/error.hpp"

namespace nlab {

FiniteDiffResult finite_diff_grad(const ScalarFunction& fn, std::vector<Tensor> params, double epsilon) {
    if (!(epsilon > 0.0)) {
        throw InputError("finite_diff_grad: epsilon must be > 0");
    }
    FiniteDiffResult out;
    const double f0 = fn(params);
    // One-sided slopes of a smooth function differ by about |f''| * eps; a kink
    // makes them differ by the jump in slope, which does not shrink with eps.
    const double kink_tol = std::sqrt(epsilon);
    for (std::size_t p = 0; p < params.size(); ++p) {
        Tensor g(params[p].shape(), 0.0);
        for (std::size_t i = 0; i < params[p].size(); ++i) {
            const double orig = params[p][i];
            params[p][i] = orig + epsilon;
            const double fp = fn(params);
            params[p][i] = orig - epsilon;
            const double fm = fn(params);
            params[p][i] = orig;
            if (!std::isfinite(fp) || !std::isfinite(fm)) {
                throw NumericFault("finite_diff_grad");
            }
            const double central = (fp - fm) / (2.0 * epsilon);
            const double forward = (fp - f0) / epsilon;
            const double backward = (f0 - fm) / epsilon;
            if (std::abs(forward - backward) > kink_tol * (1.0 + std::abs(central))) {
                out.non_smooth.push_back({p, i});
            }
            g[i] = central;
        }
        out.grads.push_back(std::move(g));
    }
    return out;
}

double max_relative_error(const std::vector<Tensor>& a, const std::vector<Tensor>& b) {
    if (a.size() != b.size()) throw ContractViolation("max_relative_error: tensor counts differ");
    double worst = 0.0;
    for (std::size_t p = 0; p < a.size(); ++p) {
        if (!a[p].same_shape(b[p])) throw ContractViolation("max_relative_error: shapes differ");
        for (std::size_t i = 0; i < a[p].size(); ++i) {
            double scale = std::max({1.0, std::abs(a[p][i]), std::abs(b[p][i])});
            worst = std::max(worst, std::abs(a[p][i] - b[p][i]) / scale);
        }
    }
    return worst;
}

}  // namespace nlab
