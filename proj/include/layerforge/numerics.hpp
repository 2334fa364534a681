#pragma once

// Deterministic tensor kernels. Every reduction runs in a fixed order so
// repeated calls are bit-identical.

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>

#include "layerforge/tensor.hpp"

namespace layerforge {

namespace detail {

template <typename T>
void require_same_shape(const BasicTensor<T>& a, const BasicTensor<T>& b, const char* what) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(what) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
    }
}

// c[m×n] += a[m×k] · b[k×n]
template <typename T>
void gemm_nn(const T* __restrict a, const T* __restrict b, T* __restrict c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        T* ci = c + i * n;
        const T* ai = a + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const T av = ai[p];
            const T* bp = b + p * n;
            for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
        }
    }
}

// c[m×n] += a[m×k] · b[n×k]ᵀ
template <typename T>
void gemm_nt(const T* __restrict a, const T* __restrict b, T* __restrict c, std::size_t m, std::size_t k,
             std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const T* ai = a + i * k;
        for (std::size_t j = 0; j < n; ++j) {
            const T* bj = b + j * k;
            T s = 0;
            for (std::size_t p = 0; p < k; ++p) s += ai[p] * bj[p];
            c[i * n + j] += s;
        }
    }
}

// c[k×n] += a[m×k]ᵀ · b[m×n]
template <typename T>
void gemm_tn(const T* __restrict a, const T* __restrict b, T* __restrict c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t p = 0; p < m; ++p) {
        const T* ap = a + p * k;
        const T* bp = b + p * n;
        for (std::size_t i = 0; i < k; ++i) {
            const T av = ap[i];
            T* ci = c + i * n;
            for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
        }
    }
}

}  // namespace detail

template <typename T>
BasicTensor<T> transpose(const BasicTensor<T>& a) {
    const std::size_t r = a.rows(), c = a.cols();
    BasicTensor<T> out = BasicTensor<T>::matrix(c, r);
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out.at(j, i) = a.at(i, j);
    return out;
}

template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    if (a.cols() != b.rows()) {
        throw ShapeError("matmul: inner dims differ " + shape_string(a.shape()) + " · " + shape_string(b.shape()));
    }
    BasicTensor<T> out = BasicTensor<T>::matrix(a.rows(), b.cols());
    detail::gemm_nn(a.raw(), b.raw(), out.raw(), a.rows(), a.cols(), b.cols());
    return out;
}

/// a · bᵀ
template <typename T>
BasicTensor<T> matmul_nt(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    if (a.cols() != b.cols()) {
        throw ShapeError("matmul_nt: inner dims differ " + shape_string(a.shape()) + " · " +
                         shape_string(b.shape()) + "ᵀ");
    }
    BasicTensor<T> out = BasicTensor<T>::matrix(a.rows(), b.rows());
    detail::gemm_nt(a.raw(), b.raw(), out.raw(), a.rows(), a.cols(), b.rows());
    return out;
}

/// aᵀ · b
template <typename T>
BasicTensor<T> matmul_tn(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    if (a.rows() != b.rows()) {
        throw ShapeError("matmul_tn: outer dims differ " + shape_string(a.shape()) + "ᵀ · " +
                         shape_string(b.shape()));
    }
    BasicTensor<T> out = BasicTensor<T>::matrix(a.cols(), b.cols());
    detail::gemm_tn(a.raw(), b.raw(), out.raw(), a.rows(), a.cols(), b.cols());
    return out;
}

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    detail::require_same_shape(a, b, "add");
    BasicTensor<T> out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i];
    return out;
}

template <typename T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    detail::require_same_shape(a, b, "sub");
    BasicTensor<T> out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b[i];
    return out;
}

template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& a, T s) {
    BasicTensor<T> out = a;
    for (auto& x : out.storage()) x *= s;
    return out;
}

template <typename T>
T max_abs(const BasicTensor<T>& a) {
    T m = 0;
    for (T x : a.data()) m = std::max(m, std::abs(x));
    return m;
}

template <typename T>
T max_abs_diff(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    detail::require_same_shape(a, b, "max_abs_diff");
    T m = 0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

template <typename T>
T l2_norm(const BasicTensor<T>& a) {
    T s = 0;
    for (T x : a.data()) s += x * x;
    return std::sqrt(s);
}

template <typename T>
bool all_finite(const BasicTensor<T>& a) {
    return std::all_of(a.data().begin(), a.data().end(), [](T x) { return std::isfinite(x); });
}

/// Row-wise softmax with max subtraction. An optional additive mask (0 or
/// -inf entries) is applied before normalisation.
template <typename T>
BasicTensor<T> softmax_rows(const BasicTensor<T>& m, const BasicTensor<T>* additive_mask = nullptr) {
    if (m.rank() != 2) throw ShapeError("softmax_rows: expected rank 2, got " + shape_string(m.shape()));
    if (additive_mask) detail::require_same_shape(m, *additive_mask, "softmax_rows mask");
    const std::size_t rows = m.rows(), cols = m.cols();
    BasicTensor<T> out = BasicTensor<T>::matrix(rows, cols);
    for (std::size_t r = 0; r < rows; ++r) {
        const T* in = m.raw() + r * cols;
        const T* mk = additive_mask ? additive_mask->raw() + r * cols : nullptr;
        T* o = out.raw() + r * cols;
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t c = 0; c < cols; ++c) {
            const T x = mk ? in[c] + mk[c] : in[c];
            o[c] = x;
            mx = std::max(mx, x);
        }
        if (mx == -std::numeric_limits<T>::infinity()) {
            throw DegenerateMaskError("softmax_rows: row " + std::to_string(r) + " is masked everywhere");
        }
        T sum = 0;
        for (std::size_t c = 0; c < cols; ++c) {
            o[c] = std::exp(o[c] - mx);
            sum += o[c];
        }
        const T inv = T(1) / sum;
        for (std::size_t c = 0; c < cols; ++c) o[c] *= inv;
    }
    return out;
}

/// Range below which min-max normalisation treats its input as constant: the
/// square root of the smallest normal number, so 1/range stays far from overflow.
template <typename T>
constexpr T minmax_degenerate_range() {
    if constexpr (sizeof(T) == sizeof(float))
        return T(1.0842022e-19);  // √FLT_MIN
    else
        return T(1.4916681462400413e-154);  // √DBL_MIN
}

/// (x - min) / (max - min) over all elements; all zeros when the range is
/// (numerically) zero.
template <typename T>
BasicTensor<T> minmax_norm(const BasicTensor<T>& m) {
    BasicTensor<T> out = m;
    if (m.empty()) return out;
    const auto [lo_it, hi_it] = std::minmax_element(m.data().begin(), m.data().end());
    const T lo = *lo_it, hi = *hi_it;
    if (!(hi - lo > minmax_degenerate_range<T>())) {
        out.fill(T(0));
        return out;
    }
    const T range = hi - lo;
    for (auto& x : out.storage()) x = (x - lo) / range;
    return out;
}

/// Bilinear resize with align-corners sample placement. Accepts H×W or
/// H×W×C (channels resized independently).
template <typename T>
BasicTensor<T> resize_bilinear(const BasicTensor<T>& m, std::size_t out_h, std::size_t out_w) {
    if (m.rank() != 2 && m.rank() != 3) {
        throw ShapeError("resize_bilinear: expected H×W or H×W×C, got " + shape_string(m.shape()));
    }
    if (out_h == 0 || out_w == 0) throw ShapeError("resize_bilinear: zero target dimension");
    const std::size_t in_h = m.dim(0), in_w = m.dim(1);
    const std::size_t channels = m.rank() == 3 ? m.dim(2) : 1;
    if (in_h == out_h && in_w == out_w) return m;

    Shape shape = m.rank() == 3 ? Shape{out_h, out_w, channels} : Shape{out_h, out_w};
    BasicTensor<T> out(shape);
    auto source = [](std::size_t i, std::size_t in, std::size_t outn) {
        if (outn == 1 || in == 1) return 0.0;
        return static_cast<double>(i) * static_cast<double>(in - 1) / static_cast<double>(outn - 1);
    };
    for (std::size_t y = 0; y < out_h; ++y) {
        const double sy = source(y, in_h, out_h);
        const std::size_t y0 = std::min(static_cast<std::size_t>(sy), in_h - 1);
        const std::size_t y1 = std::min(y0 + 1, in_h - 1);
        const T fy = static_cast<T>(sy - static_cast<double>(y0));
        for (std::size_t x = 0; x < out_w; ++x) {
            const double sx = source(x, in_w, out_w);
            const std::size_t x0 = std::min(static_cast<std::size_t>(sx), in_w - 1);
            const std::size_t x1 = std::min(x0 + 1, in_w - 1);
            const T fx = static_cast<T>(sx - static_cast<double>(x0));
            for (std::size_t c = 0; c < channels; ++c) {
                auto px = [&](std::size_t yy, std::size_t xx) { return m[(yy * in_w + xx) * channels + c]; };
                const T top = px(y0, x0) + fx * (px(y0, x1) - px(y0, x0));
                const T bottom = px(y1, x0) + fx * (px(y1, x1) - px(y1, x0));
                out[(y * out_w + x) * channels + c] = top + fy * (bottom - top);
            }
        }
    }
    return out;
}

/// softmax((q·kᵀ + mask) / √d) · v with d = q.cols().
template <typename T>
BasicTensor<T> attention(const BasicTensor<T>& q, const BasicTensor<T>& k, const BasicTensor<T>& v,
                         const BasicTensor<T>* additive_mask = nullptr) {
    if (q.cols() != k.cols()) throw ShapeError("attention: query/key widths differ");
    if (k.rows() != v.rows()) throw ShapeError("attention: key/value lengths differ");
    BasicTensor<T> logits = matmul_nt(q, k);
    if (additive_mask) {
        detail::require_same_shape(logits, *additive_mask, "attention mask");
        for (std::size_t i = 0; i < logits.size(); ++i) logits[i] += (*additive_mask)[i];
    }
    const T inv_sqrt_d = T(1) / std::sqrt(static_cast<T>(q.cols()));
    for (auto& x : logits.storage()) x *= inv_sqrt_d;
    return matmul(softmax_rows(logits), v);
}

}  // namespace layerforge
