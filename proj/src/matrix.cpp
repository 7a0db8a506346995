// SPDX-License-Identifier: Apache-2.0

#include "adapter_forge/matrix.hpp"

#include <algorithm>
#include <cmath>
#include <fmt/format.h>

#include "adapter_forge/error.hpp"

namespace adapter_forge {

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<float> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
        throw AdapterError(ErrorCode::DimensionMismatch,
                           fmt::format("{} values cannot fill a {}x{} matrix", data_.size(), rows_, cols_));
    }
}

Matrix scaled_product(const Matrix& lhs, const Matrix& rhs, double scale) {
    if (lhs.cols() != rhs.rows()) {
        throw AdapterError(ErrorCode::DimensionMismatch,
                           fmt::format("cannot multiply {}x{} by {}x{}", lhs.rows(), lhs.cols(), rhs.rows(),
                                       rhs.cols()));
    }
    const std::size_t n = lhs.rows();
    const std::size_t inner = lhs.cols();
    const std::size_t m = rhs.cols();
    std::vector<double> acc(m);
    Matrix out(n, m);
    for (std::size_t i = 0; i < n; ++i) {
        std::fill(acc.begin(), acc.end(), 0.0);
        for (std::size_t k = 0; k < inner; ++k) {
            const double a = lhs(i, k);
            if (a == 0.0) continue;
            for (std::size_t j = 0; j < m; ++j) acc[j] += a * rhs(k, j);
        }
        for (std::size_t j = 0; j < m; ++j) out(i, j) = static_cast<float>(scale * acc[j]);
    }
    return out;
}

Matrix hconcat(std::span<const Matrix> parts) {
    if (parts.empty()) return {};
    const std::size_t rows = parts.front().rows();
    std::size_t cols = 0;
    for (const auto& p : parts) {
        if (p.rows() != rows) {
            throw AdapterError(ErrorCode::DimensionMismatch,
                               fmt::format("hconcat row mismatch: {} vs {}", p.rows(), rows));
        }
        cols += p.cols();
    }
    Matrix out(rows, cols);
    std::size_t offset = 0;
    for (const auto& p : parts) {
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < p.cols(); ++c) out(r, offset + c) = p(r, c);
        offset += p.cols();
    }
    return out;
}

Matrix vconcat(std::span<const Matrix> parts) {
    if (parts.empty()) return {};
    const std::size_t cols = parts.front().cols();
    std::vector<float> data;
    std::size_t rows = 0;
    for (const auto& p : parts) {
        if (p.cols() != cols) {
            throw AdapterError(ErrorCode::DimensionMismatch,
                               fmt::format("vconcat column mismatch: {} vs {}", p.cols(), cols));
        }
        data.insert(data.end(), p.values().begin(), p.values().end());
        rows += p.rows();
    }
    return Matrix(rows, cols, std::move(data));
}

Matrix scaled(const Matrix& m, double factor) {
    Matrix out = m;
    for (float& v : out.values()) v = static_cast<float>(factor * static_cast<double>(v));
    return out;
}

float max_abs(const Matrix& m) {
    float best = 0.0f;
    for (float v : m.values()) best = std::max(best, std::abs(v));
    return best;
}

float max_abs_diff(const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw AdapterError(ErrorCode::ShapeMismatch, fmt::format("cannot compare {}x{} with {}x{}", a.rows(),
                                                                 a.cols(), b.rows(), b.cols()));
    }
    float best = 0.0f;
    for (std::size_t i = 0; i < a.size(); ++i) best = std::max(best, std::abs(a.values()[i] - b.values()[i]));
    return best;
}

double frobenius_norm(const Matrix& m) {
    double sum = 0.0;
    for (float v : m.values()) sum += static_cast<double>(v) * v;
    return std::sqrt(sum);
}

}  // namespace adapter_forge
