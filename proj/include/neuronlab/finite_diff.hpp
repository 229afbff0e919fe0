// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <functional>
#include <vector>

#include "neuronlab/tensor.hpp"

namespace nlab {

/// Coordinate of one parameter entry: (parameter slot, flat element index).
struct Coordinate {
    std::size_t param = 0;
    std::size_t index = 0;
};

struct FiniteDiffResult {
    /// Central-difference estimate, one tensor per parameter.
    std::vector<Tensor> grads;
    /// Coordinates where the one-sided slopes disagree, i.e. the function
    /// looks non-smooth within epsilon. Their central estimate is still reported.
    std::vector<Coordinate> non_smooth;
};

using ScalarFunction = std::function<double(const std::vector<Tensor>&)>;

/// Central differences (f(x+e) - f(x-e)) / 2e for every coordinate of every parameter.
/// Throws InputError when epsilon <= 0.
FiniteDiffResult finite_diff_grad(const ScalarFunction& fn, std::vector<Tensor> params, double epsilon);

/// max |a - b| / max(1, |a|, |b|) over all coordinates; shapes must agree.
double max_relative_error(const std::vector<Tensor>& a, const std::vector<Tensor>& b);

}  // namespace nlab
