// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace adapter_forge {

/// Dense row-major fp32 matrix. Small by design: adapters are at most a few
/// thousand wide, and every consumer here only needs products and concatenation.
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols) : rows_(rows), cols_(cols), data_(rows * cols, 0.0f) {}
    Matrix(std::size_t rows, std::size_t cols, std::vector<float> data);

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    float& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    float operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    std::span<float> values() noexcept { return data_; }
    std::span<const float> values() const noexcept { return data_; }

    friend bool operator==(const Matrix&, const Matrix&) = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<float> data_;
};

/// scale * (lhs x rhs), accumulated in double and rounded once to fp32.
Matrix scaled_product(const Matrix& lhs, const Matrix& rhs, double scale);

/// Side-by-side concatenation; all parts must share a row count.
Matrix hconcat(std::span<const Matrix> parts);

/// Stacked concatenation; all parts must share a column count.
Matrix vconcat(std::span<const Matrix> parts);

Matrix scaled(const Matrix& m, double factor);

float max_abs(const Matrix& m);

/// Largest element-wise |a - b|; shapes must agree.
float max_abs_diff(const Matrix& a, const Matrix& b);

double frobenius_norm(const Matrix& m);

}  // namespace adapter_forge
