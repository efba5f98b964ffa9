// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "kvedit/errors.hpp"

namespace kvedit {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << 'x';
        os << s[i];
    }
    os << ']';
    return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>{});
}

/// Dense row-major tensor. The scalar type selects the working precision:
/// `float` for normal runs, `double` for verification runs.
///
/// Zero-length dimensions are allowed so that an empty set of rows (for
/// example a cache entry with no background tokens) is still a well-formed
/// value.
template <class T>
class Tensor {
public:
    using value_type = T;

    Tensor() = default;

    explicit Tensor(Shape shape, T fill = T(0)) : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

    Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
        if (shape_numel(shape_) != data_.size())
            throw ShapeError("tensor: shape " + shape_str(shape_) + " does not match " +
                             std::to_string(data_.size()) + " values");
    }

    static Tensor matrix(std::size_t rows, std::size_t cols, T fill = T(0)) { return Tensor({rows, cols}, fill); }

    static Tensor from_rows(std::initializer_list<std::initializer_list<T>> rows) {
        std::size_t r = rows.size();
        std::size_t c = r ? rows.begin()->size() : 0;
        std::vector<T> data;
        data.reserve(r * c);
        for (const auto& row : rows) {
            if (row.size() != c) throw ShapeError("tensor: ragged row list");
            data.insert(data.end(), row.begin(), row.end());
        }
        return Tensor({r, c}, std::move(data));
    }

    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    std::size_t rows() const {
        require_rank(2, "rows");
        return shape_[0];
    }
    std::size_t cols() const {
        require_rank(2, "cols");
        return shape_[1];
    }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }
    std::vector<T>& values() { return data_; }
    const std::vector<T>& values() const { return data_; }

    T& operator[](std::size_t i) { return data_[i]; }
    const T& operator[](std::size_t i) const { return data_[i]; }

    T& at(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
    const T& at(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }

    std::span<T> row(std::size_t r) {
        std::size_t w = shape_.back();
        return {data_.data() + r * w, w};
    }
    std::span<const T> row(std::size_t r) const {
        std::size_t w = shape_.back();
        return {data_.data() + r * w, w};
    }

    Tensor reshaped(Shape s) const {
        if (shape_numel(s) != data_.size())
            throw ShapeError("reshape: " + shape_str(shape_) + " -> " + shape_str(s));
        return Tensor(std::move(s), data_);
    }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    template <class U>
    Tensor<U> cast() const {
        std::vector<U> out(data_.begin(), data_.end());
        return Tensor<U>(shape_, std::move(out));
    }

    bool all_finite() const {
        return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
    }

    friend bool operator==(const Tensor& a, const Tensor& b) { return a.shape_ == b.shape_ && a.data_ == b.data_; }

private:
    void require_rank(std::size_t r, const char* what) const {
        if (shape_.size() != r)
            throw ShapeError(std::string("tensor.") + what + ": expected rank " + std::to_string(r) + ", got " +
                             shape_str(shape_));
    }

    Shape shape_;
    std::vector<T> data_;
};

namespace detail {

template <class T>
void require_matrix(const Tensor<T>& a, const char* op) {
    if (a.rank() != 2) throw ShapeError(std::string(op) + ": expected a matrix, got " + shape_str(a.shape()));
}

template <class T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

} // namespace detail

/// out += a * b, with a [m x k], b [k x n], out [m x n].
///
/// Every output element accumulates its k products in the same order no
/// matter how many rows are processed together, so a row of the product
/// does not depend on which other rows are present.
template <class T>
void matmul_acc(const Tensor<T>& a, const Tensor<T>& b, Tensor<T>& out) {
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    if (b.rows() != k || out.rows() != m || out.cols() != n)
        throw ShapeError("matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()) + " -> " +
                         shape_str(out.shape()));
    const T* pa = a.data();
    const T* pb = b.data();
    T* po = out.data();
    std::size_t i = 0;
    for (; i + 4 <= m; i += 4) {
        T* __restrict o0 = po + i * n;
        T* __restrict o1 = o0 + n;
        T* __restrict o2 = o1 + n;
        T* __restrict o3 = o2 + n;
        for (std::size_t p = 0; p < k; ++p) {
            const T a0 = pa[i * k + p], a1 = pa[(i + 1) * k + p], a2 = pa[(i + 2) * k + p], a3 = pa[(i + 3) * k + p];
            const T* __restrict brow = pb + p * n;
            for (std::size_t j = 0; j < n; ++j) {
                const T bv = brow[j];
                o0[j] += a0 * bv;
                o1[j] += a1 * bv;
                o2[j] += a2 * bv;
                o3[j] += a3 * bv;
            }
        }
    }
    for (; i < m; ++i) {
        T* __restrict orow = po + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const T av = pa[i * k + p];
            const T* __restrict brow = pb + p * n;
            for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    }
}

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_matrix(a, "matmul");
    detail::require_matrix(b, "matmul");
    if (a.cols() != b.rows())
        throw ShapeError("matmul: inner dimensions differ: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    Tensor<T> out = Tensor<T>::matrix(a.rows(), b.cols());
    matmul_acc(a, b, out);
    return out;
}

/// out += a^T * b, with a [k x m], b [k x n], out [m x n].
template <class T>
void matmul_tn_acc(const Tensor<T>& a, const Tensor<T>& b, Tensor<T>& out) {
    const std::size_t k = a.rows(), m = a.cols(), n = b.cols();
    if (b.rows() != k || out.rows() != m || out.cols() != n)
        throw ShapeError("matmul_tn: " + shape_str(a.shape()) + "^T x " + shape_str(b.shape()) + " -> " +
                         shape_str(out.shape()));
    const T* pa = a.data();
    const T* pb = b.data();
    T* po = out.data();
    std::size_t p = 0;
    for (; p + 4 <= k; p += 4) {
        const T* __restrict b0 = pb + p * n;
        const T* __restrict b1 = b0 + n;
        const T* __restrict b2 = b1 + n;
        const T* __restrict b3 = b2 + n;
        for (std::size_t i = 0; i < m; ++i) {
            const T a0 = pa[p * m + i], a1 = pa[(p + 1) * m + i], a2 = pa[(p + 2) * m + i], a3 = pa[(p + 3) * m + i];
            T* __restrict orow = po + i * n;
            for (std::size_t j = 0; j < n; ++j) orow[j] = (((orow[j] + a0 * b0[j]) + a1 * b1[j]) + a2 * b2[j]) + a3 * b3[j];
        }
    }
    for (; p < k; ++p) {
        const T* __restrict brow = pb + p * n;
        for (std::size_t i = 0; i < m; ++i) {
            const T av = pa[p * m + i];
            T* __restrict orow = po + i * n;
            for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    }
}

template <class T>
Tensor<T> transpose(const Tensor<T>& a) {
    detail::require_matrix(a, "transpose");
    const std::size_t m = a.rows(), n = a.cols();
    Tensor<T> out = Tensor<T>::matrix(n, m);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out.at(j, i) = a.at(i, j);
    return out;
}

/// out += a * b^T, with a [m x k], b [n x k], out [m x n].
template <class T>
void matmul_nt_acc(const Tensor<T>& a, const Tensor<T>& b, Tensor<T>& out) {
    if (b.cols() != a.cols() || out.rows() != a.rows() || out.cols() != b.rows())
        throw ShapeError("matmul_nt: " + shape_str(a.shape()) + " x " + shape_str(b.shape()) + "^T -> " +
                         shape_str(out.shape()));
    matmul_acc(a, transpose(b), out);
}

template <class T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
    Tensor<T> out = Tensor<T>::matrix(a.rows(), b.rows());
    matmul_nt_acc(a, b, out);
    return out;
}

template <class T>
Tensor<T> matmul_tn(const Tensor<T>& a, const Tensor<T>& b) {
    Tensor<T> out = Tensor<T>::matrix(a.cols(), b.cols());
    matmul_tn_acc(a, b, out);
    return out;
}

/// Softmax over one row in place, with max subtraction. Entries equal to
/// -inf receive exactly zero weight.
template <class T>
void softmax_inplace(std::span<T> row) {
    if (row.empty()) return;
    T mx = *std::max_element(row.begin(), row.end());
    T sum = 0;
    for (T& v : row) {
        v = std::exp(v - mx);
        sum += v;
    }
    const T inv = T(1) / sum;
    for (T& v : row) v *= inv;
}

template <class T>
Tensor<T> softmax_rows(const Tensor<T>& a) {
    detail::require_matrix(a, "softmax_rows");
    Tensor<T> out = a;
    for (std::size_t r = 0; r < out.rows(); ++r) softmax_inplace(out.row(r));
    return out;
}

inline constexpr double kRmsEps = 1e-6;

/// Normalizes every length-d slice of `a` to unit root-mean-square and
/// multiplies by `gain`.
template <class T>
Tensor<T> rms_norm(const Tensor<T>& a, const Tensor<T>& gain) {
    if (a.rank() == 0 || gain.size() != a.shape().back())
        throw ShapeError("rms_norm: last dimension of " + shape_str(a.shape()) + " does not match gain " +
                         shape_str(gain.shape()));
    const std::size_t d = gain.size();
    Tensor<T> out(a.shape());
    const std::size_t slices = d ? a.size() / d : 0;
    for (std::size_t s = 0; s < slices; ++s) {
        const T* x = a.data() + s * d;
        T* y = out.data() + s * d;
        T ms = 0;
        for (std::size_t i = 0; i < d; ++i) ms += x[i] * x[i];
        ms /= T(d);
        const T inv = T(1) / std::sqrt(ms + T(kRmsEps));
        for (std::size_t i = 0; i < d; ++i) y[i] = x[i] * inv * gain[i];
    }
    return out;
}

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same_shape(a, b, "add");
    Tensor<T> out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i];
    return out;
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same_shape(a, b, "sub");
    Tensor<T> out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b[i];
    return out;
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T s) {
    Tensor<T> out = a;
    for (auto& v : out.values()) v *= s;
    return out;
}

/// y += alpha * x
template <class T>
void axpy(T alpha, const Tensor<T>& x, Tensor<T>& y) {
    detail::require_same_shape(x, y, "axpy");
    for (std::size_t i = 0; i < y.size(); ++i) y[i] += alpha * x[i];
}

/// Adds `bias` (length = cols) to every row.
template <class T>
void add_row_bias(Tensor<T>& a, const Tensor<T>& bias) {
    const std::size_t n = a.cols();
    if (bias.size() != n) throw ShapeError("add_row_bias: bias " + shape_str(bias.shape()) + " vs " + shape_str(a.shape()));
    for (std::size_t r = 0; r < a.rows(); ++r)
        for (std::size_t j = 0; j < n; ++j) a.at(r, j) += bias[j];
}

/// Gathers the listed rows of a matrix, in list order.
template <class T>
Tensor<T> gather_rows(const Tensor<T>& a, std::span<const std::size_t> idx) {
    Tensor<T> out = Tensor<T>::matrix(idx.size(), a.cols());
    for (std::size_t r = 0; r < idx.size(); ++r) {
        if (idx[r] >= a.rows())
            throw ShapeError("gather_rows: index " + std::to_string(idx[r]) + " out of range for " +
                             shape_str(a.shape()));
        std::copy_n(a.row(idx[r]).data(), a.cols(), out.row(r).data());
    }
    return out;
}

/// Writes row r of `src` into row idx[r] of `dst`.
template <class T>
void scatter_rows(const Tensor<T>& src, std::span<const std::size_t> idx, Tensor<T>& dst) {
    if (src.rows() != idx.size() || src.cols() != dst.cols())
        throw ShapeError("scatter_rows: " + shape_str(src.shape()) + " into " + shape_str(dst.shape()));
    for (std::size_t r = 0; r < idx.size(); ++r) {
        if (idx[r] >= dst.rows())
            throw ShapeError("scatter_rows: index " + std::to_string(idx[r]) + " out of range");
        std::copy_n(src.row(r).data(), src.cols(), dst.row(idx[r]).data());
    }
}

template <class T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same_shape(a, b, "max_abs_diff");
    T m = 0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

template <class T>
T silu(T x) {
    return x / (T(1) + std::exp(-x));
}

template <class T>
T silu_grad(T x) {
    const T s = T(1) / (T(1) + std::exp(-x));
    return s * (T(1) + x * (T(1) - s));
}

} // namespace kvedit
