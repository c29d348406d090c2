// Copyright (c) 2026 the moda authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <limits>
#include <string>
#include <vector>

#include "moda/errors.hpp"

namespace moda {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

// Dense row-major float64 matrix. Immutable by convention once handed to an
// operation; all ops below are pure functions returning fresh values.
// Entries are finite except in additive attention masks, where -inf marks a
// fully blocked position.
class Matrix {
  public:
    Matrix() = default;

    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

    Matrix(std::initializer_list<std::initializer_list<double>> init) {
        rows_ = init.size();
        cols_ = rows_ ? init.begin()->size() : 0;
        data_.reserve(rows_ * cols_);
        for (const auto& row : init) {
            if (row.size() != cols_)
                throw ShapeMismatch("ragged initializer list");
            data_.insert(data_.end(), row.begin(), row.end());
        }
    }

    static Matrix identity(std::size_t n) {
        Matrix m(n, n);
        for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
        return m;
    }

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }

    double& operator()(std::size_t i, std::size_t j) { return data_[i * cols_ + j]; }
    double operator()(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }

    std::vector<double>& data() { return data_; }
    const std::vector<double>& data() const { return data_; }

    bool same_shape(const Matrix& other) const {
        return rows_ == other.rows_ && cols_ == other.cols_;
    }

    bool all_finite() const {
        for (double v : data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

    // Rows [begin, begin+count) as a copy.
    Matrix slice_rows(std::size_t begin, std::size_t count) const {
        if (begin + count > rows_)
            throw ShapeMismatch("row slice out of range");
        Matrix out(count, cols_);
        for (std::size_t i = 0; i < count; ++i)
            for (std::size_t j = 0; j < cols_; ++j)
                out(i, j) = (*this)(begin + i, j);
        return out;
    }

  private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

inline std::string shape_str(const Matrix& m) {
    return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

// Exact dense product, ikj loop order. Shapes are checked here and nowhere
// relies on implicit broadcasting.
inline Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows())
        throw ShapeMismatch("matmul: " + shape_str(a) + " * " + shape_str(b));
    Matrix out(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        for (std::size_t k = 0; k < a.cols(); ++k) {
            const double aik = a(i, k);
            if (aik == 0.0) continue;
            for (std::size_t j = 0; j < b.cols(); ++j)
                out(i, j) += aik * b(k, j);
        }
    }
    return out;
}

inline Matrix transpose(const Matrix& a) {
    Matrix out(a.cols(), a.rows());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j)
            out(j, i) = a(i, j);
    return out;
}

inline Matrix add(const Matrix& a, const Matrix& b) {
    if (!a.same_shape(b))
        throw ShapeMismatch("add: " + shape_str(a) + " vs " + shape_str(b));
    Matrix out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] += b.data()[i];
    return out;
}

inline Matrix sub(const Matrix& a, const Matrix& b) {
    if (!a.same_shape(b))
        throw ShapeMismatch("sub: " + shape_str(a) + " vs " + shape_str(b));
    Matrix out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] -= b.data()[i];
    return out;
}

inline Matrix scale(const Matrix& a, double s) {
    Matrix out = a;
    for (double& v : out.data()) v *= s;
    return out;
}

// Horizontal concatenation [a | b].
inline Matrix hcat(const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows())
        throw ShapeMismatch("hcat: " + shape_str(a) + " vs " + shape_str(b));
    Matrix out(a.rows(), a.cols() + b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        for (std::size_t j = 0; j < a.cols(); ++j) out(i, j) = a(i, j);
        for (std::size_t j = 0; j < b.cols(); ++j) out(i, a.cols() + j) = b(i, j);
    }
    return out;
}

inline double frobenius_norm(const Matrix& a) {
    if (!a.all_finite())
        throw NonFiniteEntry("frobenius_norm: non-finite entry");
    double acc = 0.0;
    for (double v : a.data()) acc += v * v;
    return std::sqrt(acc);
}

// Row-wise softmax of scores / temperature. The row maximum is subtracted
// before exponentiating; -inf inputs map to exactly 0. A row with no finite
// entry has no distribution to normalize and is rejected.
inline Matrix row_softmax(const Matrix& scores, double temperature) {
    if (!(temperature > 0.0))
        throw std::invalid_argument("row_softmax: temperature must be > 0");
    Matrix out(scores.rows(), scores.cols());
    for (std::size_t i = 0; i < scores.rows(); ++i) {
        double mx = kNegInf;
        for (std::size_t j = 0; j < scores.cols(); ++j)
            mx = std::max(mx, scores(i, j));
        if (mx == kNegInf)
            throw AllMaskedRow("row_softmax: row " + std::to_string(i) + " fully masked");
        double sum = 0.0;
        for (std::size_t j = 0; j < scores.cols(); ++j) {
            const double s = scores(i, j);
            const double e = (s == kNegInf) ? 0.0 : std::exp((s - mx) / temperature);
            out(i, j) = e;
            sum += e;
        }
        for (std::size_t j = 0; j < scores.cols(); ++j) out(i, j) /= sum;
    }
    return out;
}

}  // namespace moda
