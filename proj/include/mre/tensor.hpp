#pragma once

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "mre/error.hpp"

namespace mre {

// Dense row-major matrix. Vectors are 1×n matrices or plain std::vector.
template <typename T>
class Matrix {
public:
    using value_type = T;

    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, T fill = T{0})
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
    Matrix(std::size_t rows, std::size_t cols, std::vector<T> data)
        : rows_(rows), cols_(cols), data_(std::move(data)) {
        if (data_.size() != rows_ * cols_)
            throw ShapeError("matrix data size " + std::to_string(data_.size()) +
                             " does not match " + std::to_string(rows_) + "x" +
                             std::to_string(cols_));
    }

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    T& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    const T& operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    std::span<T> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
    std::span<const T> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

    std::vector<T>& data() noexcept { return data_; }
    const std::vector<T>& data() const noexcept { return data_; }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    Matrix& operator+=(const Matrix& o) {
        require_same_shape(o, "+=");
        for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
        return *this;
    }

    bool operator==(const Matrix& o) const = default;

    std::string shape_str() const { return std::to_string(rows_) + "x" + std::to_string(cols_); }

    template <typename U>
    Matrix<U> cast() const {
        Matrix<U> out(rows_, cols_);
        for (std::size_t i = 0; i < data_.size(); ++i) out.data()[i] = static_cast<U>(data_[i]);
        return out;
    }

private:
    void require_same_shape(const Matrix& o, const char* op) const {
        if (rows_ != o.rows_ || cols_ != o.cols_)
            throw ShapeError(std::string("operands of ") + op + " differ: " + shape_str() +
                             " vs " + o.shape_str());
    }

    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<T> data_;
};

namespace detail {
// Operand shapes are given as (rows, cols) pairs and formatted only on failure.
inline void check_inner(std::size_t a, std::size_t b, std::size_t lr, std::size_t lc, std::size_t rr,
                        std::size_t rc, const char* op) {
    if (a != b)
        throw ShapeError(std::string(op) + ": incompatible operands " + std::to_string(lr) + "x" +
                         std::to_string(lc) + " and " + std::to_string(rr) + "x" + std::to_string(rc));
}
} // namespace detail

// A · B
template <typename T>
Matrix<T> matmul(const Matrix<T>& a, const Matrix<T>& b) {
    detail::check_inner(a.cols(), b.rows(), a.rows(), a.cols(), b.rows(), b.cols(), "matmul");
    Matrix<T> out(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        T* o = &out(i, 0);
        for (std::size_t k = 0; k < a.cols(); ++k) {
            const T aik = a(i, k);
            const T* br = &b(k, 0);
            for (std::size_t j = 0; j < b.cols(); ++j) o[j] += aik * br[j];
        }
    }
    return out;
}

// Aᵀ · B
template <typename T>
Matrix<T> matmul_tn(const Matrix<T>& a, const Matrix<T>& b) {
    detail::check_inner(a.rows(), b.rows(), a.rows(), a.cols(), b.rows(), b.cols(), "matmul_tn");
    Matrix<T> out(a.cols(), b.cols());
    for (std::size_t k = 0; k < a.rows(); ++k) {
        const T* ar = &a(k, 0);
        const T* br = &b(k, 0);
        for (std::size_t i = 0; i < a.cols(); ++i) {
            const T aki = ar[i];
            T* o = &out(i, 0);
            for (std::size_t j = 0; j < b.cols(); ++j) o[j] += aki * br[j];
        }
    }
    return out;
}

// A · Bᵀ
template <typename T>
Matrix<T> matmul_nt(const Matrix<T>& a, const Matrix<T>& b) {
    detail::check_inner(a.cols(), b.cols(), a.rows(), a.cols(), b.rows(), b.cols(), "matmul_nt");
    Matrix<T> out(a.rows(), b.rows());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        const T* ar = &a(i, 0);
        for (std::size_t j = 0; j < b.rows(); ++j) {
            const T* br = &b(j, 0);
            T acc{0};
            for (std::size_t k = 0; k < a.cols(); ++k) acc += ar[k] * br[k];
            out(i, j) = acc;
        }
    }
    return out;
}

// Adds a bias row to every row.
template <typename T>
void add_row_bias(Matrix<T>& m, std::span<const T> bias) {
    detail::check_inner(m.cols(), bias.size(), m.rows(), m.cols(), 1, bias.size(), "add_row_bias");
    for (std::size_t i = 0; i < m.rows(); ++i)
        for (std::size_t j = 0; j < m.cols(); ++j) m(i, j) += bias[j];
}

template <typename T>
std::vector<T> column_sums(const Matrix<T>& m) {
    std::vector<T> out(m.cols(), T{0});
    for (std::size_t i = 0; i < m.rows(); ++i)
        for (std::size_t j = 0; j < m.cols(); ++j) out[j] += m(i, j);
    return out;
}

// Stacks `top` above `bottom`.
template <typename T>
Matrix<T> vstack(const Matrix<T>& top, const Matrix<T>& bottom) {
    if (top.rows() && bottom.rows())
        detail::check_inner(top.cols(), bottom.cols(), top.rows(), top.cols(), bottom.rows(), bottom.cols(), "vstack");
    const std::size_t cols = top.rows() ? top.cols() : bottom.cols();
    Matrix<T> out(top.rows() + bottom.rows(), cols);
    std::copy(top.data().begin(), top.data().end(), out.data().begin());
    std::copy(bottom.data().begin(), bottom.data().end(),
              out.data().begin() + static_cast<std::ptrdiff_t>(top.size()));
    return out;
}

// Rows [begin, end).
template <typename T>
Matrix<T> slice_rows(const Matrix<T>& m, std::size_t begin, std::size_t end) {
    Matrix<T> out(end - begin, m.cols());
    std::copy(m.data().begin() + static_cast<std::ptrdiff_t>(begin * m.cols()),
              m.data().begin() + static_cast<std::ptrdiff_t>(end * m.cols()), out.data().begin());
    return out;
}

template <typename T>
Matrix<T> identity(std::size_t n) {
    Matrix<T> out(n, n);
    for (std::size_t i = 0; i < n; ++i) out(i, i) = T{1};
    return out;
}

// Vector-matrix product v · W for a row vector v.
template <typename T>
std::vector<T> vecmat(std::span<const T> v, const Matrix<T>& w) {
    detail::check_inner(v.size(), w.rows(), 1, v.size(), w.rows(), w.cols(), "vecmat");
    std::vector<T> out(w.cols(), T{0});
    for (std::size_t k = 0; k < w.rows(); ++k) {
        const T vk = v[k];
        for (std::size_t j = 0; j < w.cols(); ++j) out[j] += vk * w(k, j);
    }
    return out;
}

// Numerically stable in-place softmax; entries with active[i] == false get
// exactly zero weight and never contribute to the normaliser.
template <typename T>
void softmax_inplace(std::span<T> x, std::span<const unsigned char> active = {}) {
    const bool masked = !active.empty();
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t i = 0; i < x.size(); ++i)
        if (!masked || active[i]) mx = std::max(mx, x[i]);
    T sum{0};
    for (std::size_t i = 0; i < x.size(); ++i) {
        if (masked && !active[i]) {
            x[i] = T{0};
            continue;
        }
        x[i] = std::exp(x[i] - mx);
        sum += x[i];
    }
    for (auto& v : x) v /= sum;
}

} // namespace mre
