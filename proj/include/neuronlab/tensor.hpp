// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace nlab {

/// Dense row-major tensor of doubles. Rank 0 (scalar), 1 or 2.
///
/// Construction rejects NaN/Inf. Mutable access exists for weight updates;
/// callers that write through `data()` are expected to keep values finite
/// (see `require_finite`).
class Tensor {
public:
    Tensor() : shape_{}, data_(1, 0.0) {}
    explicit Tensor(std::vector<std::size_t> shape, double fill = 0.0);
    Tensor(std::vector<std::size_t> shape, std::vector<double> data);

    static Tensor scalar(double v);
    static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> data);
    static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);
    static Tensor row(std::vector<double> data);

    const std::vector<std::size_t>& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t size() const noexcept { return data_.size(); }
    /// Rows of a rank-2 tensor; 1 for rank 0/1.
    std::size_t rows() const noexcept;
    /// Columns of a rank-2 tensor; extent for rank 1; 1 for scalars.
    std::size_t cols() const noexcept;

    std::span<const double> data() const noexcept { return data_; }
    std::span<double> data() noexcept { return data_; }
    const double* ptr() const noexcept { return data_.data(); }
    double* ptr() noexcept { return data_.data(); }

    double& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
    double at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }
    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }
    /// Value of a single-element tensor.
    double item() const;

    bool same_shape(const Tensor& other) const noexcept { return shape_ == other.shape_; }
    bool all_finite() const noexcept;
    /// Throws NumericFault naming `op` when any value is NaN/Inf.
    void require_finite(const std::string& op) const;
    void fill(double v);

    /// Exact bit-level equality (shape and payload).
    bool bit_equal(const Tensor& other) const noexcept;

    std::string shape_string() const;

private:
    std::vector<std::size_t> shape_;
    std::vector<double> data_;
};

}  // namespace nlab
