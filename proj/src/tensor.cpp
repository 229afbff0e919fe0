// SPDX-License-Identifier: Apache-2.0
#include "neuronlab/tensor.hpp"

#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <numeric>

#include "neuronlab/error.hpp"

namespace nlab {

namespace {

std::size_t extent_product(const std::vector<std::size_t>& shape) {
    if (shape.size() > 2) {
        throw ContractViolation("tensor rank > 2 is not supported");
    }
    std::size_t n = 1;
    for (auto e : shape) {
        if (e == 0) {
            throw ContractViolation("tensor extents must be positive");
        }
        n *= e;
    }
    return n;
}

}  // namespace

Tensor::Tensor(std::vector<std::size_t> shape, double fill)
    : shape_(std::move(shape)), data_(extent_product(shape_), fill) {
    if (!std::isfinite(fill)) {
        throw NumericFault("construct");
    }
}

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != extent_product(shape_)) {
        throw ContractViolation("tensor data length " + std::to_string(data_.size()) +
                                " does not match shape " + shape_string());
    }
    require_finite("construct");
}

Tensor Tensor::scalar(double v) { return Tensor({}, std::vector<double>{v}); }

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> data) {
    return Tensor({rows, cols}, std::move(data));
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
    std::size_t r = rows.size();
    std::size_t c = r ? rows.begin()->size() : 0;
    std::vector<double> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
        if (row.size() != c) {
            throw ContractViolation("ragged matrix literal");
        }
        data.insert(data.end(), row.begin(), row.end());
    }
    return Tensor({r, c}, std::move(data));
}

Tensor Tensor::row(std::vector<double> data) {
    std::size_t n = data.size();
    return Tensor({1, n}, std::move(data));
}

std::size_t Tensor::rows() const noexcept { return shape_.size() == 2 ? shape_[0] : 1; }

std::size_t Tensor::cols() const noexcept {
    if (shape_.empty()) return 1;
    return shape_.back();
}

double Tensor::item() const {
    if (data_.size() != 1) {
        throw ContractViolation("item() on tensor of shape " + shape_string());
    }
    return data_[0];
}

bool Tensor::all_finite() const noexcept {
    // exponent bits all set means inf or nan; integer form vectorizes
    constexpr std::uint64_t exp_mask = 0x7ff0000000000000ULL;
    std::uint64_t bad = 0;
    const std::size_t n = data_.size();
    const double* p = data_.data();
    for (std::size_t i = 0; i < n; ++i) {
        std::uint64_t bits;
        std::memcpy(&bits, p + i, sizeof bits);
        bad |= static_cast<std::uint64_t>((bits & exp_mask) == exp_mask);
    }
    return bad == 0;
}

void Tensor::require_finite(const std::string& op) const {
    if (!all_finite()) {
        throw NumericFault(op);
    }
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

bool Tensor::bit_equal(const Tensor& other) const noexcept {
    return shape_ == other.shape_ &&
           std::memcmp(data_.data(), other.data_.data(), data_.size() * sizeof(double)) == 0;
}

std::string Tensor::shape_string() const {
    std::string s = "[";
    for (std::size_t i = 0; i < shape_.size(); ++i) {
        if (i) s += "x";
        s += std::to_string(shape_[i]);
    }
    return s + "]";
}

}  // namespace nlab
