#pragma once

// Reverse-mode tape over rank-2 tensors. Only the operations the toy
// denoiser needs are provided. A graph constructed with record=false keeps
// values only, which is what the samplers use.

#include <cmath>
#include <functional>
#include <limits>
#include <vector>

#include "layerforge/numerics.hpp"

namespace layerforge {

struct Var {
    int id = -1;
    bool valid() const { return id >= 0; }
};

template <typename T>
class Graph {
public:
    explicit Graph(bool record = true) : record_(record) {}

    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    bool recording() const { return record_; }
    std::size_t size() const { return nodes_.size(); }

    Var constant(BasicTensor<T> value) { return push(std::move(value), false, nullptr); }

    /// Leaf that accumulates a gradient when the graph records.
    Var leaf(BasicTensor<T> value) { return push(std::move(value), record_, nullptr); }

    const BasicTensor<T>& value(Var v) const { return nodes_.at(v.id).value; }

    bool requires_grad(Var v) const { return nodes_.at(v.id).needs_grad; }

    /// Gradient of the last backward() root with respect to v (zeros if v
    /// did not influence it).
    BasicTensor<T> grad(Var v) const {
        const Node& n = nodes_.at(v.id);
        if (n.grad.empty()) return BasicTensor<T>(n.value.shape());
        return n.grad;
    }

    void zero_grad() {
        for (auto& n : nodes_) n.grad = BasicTensor<T>();
    }

    void backward(Var root) {
        if (value(root).size() != 1) throw ShapeError("backward: root must be a scalar");
        zero_grad();
        if (!nodes_[root.id].needs_grad) return;
        grad_ref(root.id).fill(T(1));
        for (int i = root.id; i >= 0; --i) {
            Node& n = nodes_[i];
            if (n.back && !n.grad.empty()) n.back(*this, i);
        }
    }

    // ---- elementwise -------------------------------------------------------

    Var add(Var a, Var b) {
        BasicTensor<T> out = layerforge::add(value(a), value(b));
        return make(std::move(out), {a, b}, [a, b](Graph& g, int self) {
            g.accumulate(a, g.nodes_[self].grad);
            g.accumulate(b, g.nodes_[self].grad);
        });
    }

    Var sub(Var a, Var b) {
        BasicTensor<T> out = layerforge::sub(value(a), value(b));
        return make(std::move(out), {a, b}, [a, b](Graph& g, int self) {
            g.accumulate(a, g.nodes_[self].grad);
            g.accumulate_scaled(b, g.nodes_[self].grad, T(-1));
        });
    }

    Var mul(Var a, Var b) {
        detail::require_same_shape(value(a), value(b), "mul");
        BasicTensor<T> out = value(a);
        for (std::size_t i = 0; i < out.size(); ++i) out[i] *= value(b)[i];
        return make(std::move(out), {a, b}, [a, b](Graph& g, int self) {
            const auto& dy = g.nodes_[self].grad;
            if (g.needs(a)) {
                auto& da = g.grad_ref(a.id);
                const auto& bv = g.value(b);
                for (std::size_t i = 0; i < dy.size(); ++i) da[i] += dy[i] * bv[i];
            }
            if (g.needs(b)) {
                auto& db = g.grad_ref(b.id);
                const auto& av = g.value(a);
                for (std::size_t i = 0; i < dy.size(); ++i) db[i] += dy[i] * av[i];
            }
        });
    }

    /// y = scale·a + shift
    Var affine(Var a, T scale, T shift) {
        BasicTensor<T> out = value(a);
        for (auto& x : out.storage()) x = scale * x + shift;
        return make(std::move(out), {a}, [a, scale](Graph& g, int self) {
            g.accumulate_scaled(a, g.nodes_[self].grad, scale);
        });
    }

    Var scale(Var a, T s) {
        BasicTensor<T> out = layerforge::scale(value(a), s);
        return make(std::move(out), {a}, [a, s](Graph& g, int self) {
            g.accumulate_scaled(a, g.nodes_[self].grad, s);
        });
    }

    Var one_minus(Var a) { return affine(a, T(-1), T(1)); }

    /// a[R×C] + row[1×C] broadcast over rows.
    Var add_row(Var a, Var row) {
        const auto& av = value(a);
        const auto& rv = value(row);
        if (rv.rows() != 1 || rv.cols() != av.cols()) throw ShapeError("add_row: bias shape mismatch");
        BasicTensor<T> out = av;
        const std::size_t R = av.rows(), C = av.cols();
        for (std::size_t r = 0; r < R; ++r)
            for (std::size_t c = 0; c < C; ++c) out.at(r, c) += rv[c];
        return make(std::move(out), {a, row}, [a, row, R, C](Graph& g, int self) {
            const auto& dy = g.nodes_[self].grad;
            g.accumulate(a, dy);
            if (g.needs(row)) {
                auto& dr = g.grad_ref(row.id);
                for (std::size_t r = 0; r < R; ++r)
                    for (std::size_t c = 0; c < C; ++c) dr[c] += dy.at(r, c);
            }
        });
    }

    /// a[R×C] ⊙ col[R×1] broadcast over columns.
    Var mul_col(Var a, Var col) {
        const auto& av = value(a);
        const auto& cv = value(col);
        if (cv.rows() != av.rows() || cv.cols() != 1) throw ShapeError("mul_col: column shape mismatch");
        BasicTensor<T> out = av;
        const std::size_t R = av.rows(), C = av.cols();
        for (std::size_t r = 0; r < R; ++r)
            for (std::size_t c = 0; c < C; ++c) out.at(r, c) *= cv[r];
        return make(std::move(out), {a, col}, [a, col, R, C](Graph& g, int self) {
            const auto& dy = g.nodes_[self].grad;
            if (g.needs(a)) {
                auto& da = g.grad_ref(a.id);
                const auto& cv = g.value(col);
                for (std::size_t r = 0; r < R; ++r)
                    for (std::size_t c = 0; c < C; ++c) da.at(r, c) += dy.at(r, c) * cv[r];
            }
            if (g.needs(col)) {
                auto& dc = g.grad_ref(col.id);
                const auto& av = g.value(a);
                for (std::size_t r = 0; r < R; ++r) {
                    T s = 0;
                    for (std::size_t c = 0; c < C; ++c) s += dy.at(r, c) * av.at(r, c);
                    dc[r] += s;
                }
            }
        });
    }

    Var gelu(Var a) {
        BasicTensor<T> out = value(a);
        for (auto& x : out.storage()) x = gelu_value(x);
        return make(std::move(out), {a}, [a](Graph& g, int self) {
            if (!g.needs(a)) return;
            const auto& dy = g.nodes_[self].grad;
            const auto& av = g.value(a);
            auto& da = g.grad_ref(a.id);
            for (std::size_t i = 0; i < dy.size(); ++i) da[i] += dy[i] * gelu_derivative(av[i]);
        });
    }

    Var sigmoid(Var a) {
        BasicTensor<T> out = value(a);
        for (auto& x : out.storage()) x = T(1) / (T(1) + std::exp(-x));
        return make(std::move(out), {a}, [a](Graph& g, int self) {
            if (!g.needs(a)) return;
            const auto& dy = g.nodes_[self].grad;
            const auto& y = g.nodes_[self].value;
            auto& da = g.grad_ref(a.id);
            for (std::size_t i = 0; i < dy.size(); ++i) da[i] += dy[i] * y[i] * (T(1) - y[i]);
        });
    }

    /// Clamp to [0, 1]; the gradient passes wherever the input lies in the
    /// closed interval.
    Var clamp01(Var a) {
        BasicTensor<T> out = value(a);
        for (auto& x : out.storage()) x = std::clamp(x, T(0), T(1));
        return make(std::move(out), {a}, [a](Graph& g, int self) {
            if (!g.needs(a)) return;
            const auto& dy = g.nodes_[self].grad;
            const auto& av = g.value(a);
            auto& da = g.grad_ref(a.id);
            for (std::size_t i = 0; i < dy.size(); ++i)
                if (av[i] >= T(0) && av[i] <= T(1)) da[i] += dy[i];
        });
    }

    // ---- linear algebra ----------------------------------------------------

    Var matmul(Var a, Var b) {
        BasicTensor<T> out = layerforge::matmul(value(a), value(b));
        return make(std::move(out), {a, b}, [a, b](Graph& g, int self) {
            const auto& dy = g.nodes_[self].grad;
            if (g.needs(a)) g.accumulate(a, layerforge::matmul_nt(dy, g.value(b)));
            if (g.needs(b)) g.accumulate(b, layerforge::matmul_tn(g.value(a), dy));
        });
    }

    /// a · bᵀ
    Var matmul_nt(Var a, Var b) {
        BasicTensor<T> out = layerforge::matmul_nt(value(a), value(b));
        return make(std::move(out), {a, b}, [a, b](Graph& g, int self) {
            const auto& dy = g.nodes_[self].grad;
            if (g.needs(a)) g.accumulate(a, layerforge::matmul(dy, g.value(b)));
            if (g.needs(b)) g.accumulate(b, layerforge::matmul_tn(dy, g.value(a)));
        });
    }

    /// Row softmax of (a + mask); mask is a constant of 0 / -inf entries.
    Var softmax_rows(Var a, const BasicTensor<T>* additive_mask = nullptr) {
        BasicTensor<T> out = layerforge::softmax_rows(value(a), additive_mask);
        return make(std::move(out), {a}, [a](Graph& g, int self) {
            if (!g.needs(a)) return;
            const auto& dy = g.nodes_[self].grad;
            const auto& y = g.nodes_[self].value;
            auto& da = g.grad_ref(a.id);
            const std::size_t R = y.rows(), C = y.cols();
            for (std::size_t r = 0; r < R; ++r) {
                T dot = 0;
                for (std::size_t c = 0; c < C; ++c) dot += dy.at(r, c) * y.at(r, c);
                for (std::size_t c = 0; c < C; ++c) da.at(r, c) += y.at(r, c) * (dy.at(r, c) - dot);
            }
        });
    }

    /// Per-row layer normalisation with learnable gain and bias (1×C each).
    Var layer_norm(Var a, Var gain, Var bias, T eps = T(1e-5)) {
        const auto& av = value(a);
        const std::size_t R = av.rows(), C = av.cols();
        if (value(gain).size() != C || value(bias).size() != C) throw ShapeError("layer_norm: parameter width");
        BasicTensor<T> normed = BasicTensor<T>::matrix(R, C);
        std::vector<T> inv_std(R);
        for (std::size_t r = 0; r < R; ++r) {
            T mean = 0;
            for (std::size_t c = 0; c < C; ++c) mean += av.at(r, c);
            mean /= static_cast<T>(C);
            T var = 0;
            for (std::size_t c = 0; c < C; ++c) {
                const T d = av.at(r, c) - mean;
                var += d * d;
            }
            var /= static_cast<T>(C);
            inv_std[r] = T(1) / std::sqrt(var + eps);
            for (std::size_t c = 0; c < C; ++c) normed.at(r, c) = (av.at(r, c) - mean) * inv_std[r];
        }
        BasicTensor<T> out = normed;
        const auto& gv = value(gain);
        const auto& bv = value(bias);
        for (std::size_t r = 0; r < R; ++r)
            for (std::size_t c = 0; c < C; ++c) out.at(r, c) = normed.at(r, c) * gv[c] + bv[c];
        return make(std::move(out), {a, gain, bias},
                    [a, gain, bias, normed = std::move(normed), inv_std = std::move(inv_std), R, C](Graph& g,
                                                                                                    int self) {
                        const auto& dy = g.nodes_[self].grad;
                        const auto& gv = g.value(gain);
                        if (g.needs(gain)) {
                            auto& dg = g.grad_ref(gain.id);
                            for (std::size_t r = 0; r < R; ++r)
                                for (std::size_t c = 0; c < C; ++c) dg[c] += dy.at(r, c) * normed.at(r, c);
                        }
                        if (g.needs(bias)) {
                            auto& db = g.grad_ref(bias.id);
                            for (std::size_t r = 0; r < R; ++r)
                                for (std::size_t c = 0; c < C; ++c) db[c] += dy.at(r, c);
                        }
                        if (g.needs(a)) {
                            auto& da = g.grad_ref(a.id);
                            const T n = static_cast<T>(C);
                            for (std::size_t r = 0; r < R; ++r) {
                                T sum_dx = 0, sum_dx_x = 0;
                                for (std::size_t c = 0; c < C; ++c) {
                                    const T dxhat = dy.at(r, c) * gv[c];
                                    sum_dx += dxhat;
                                    sum_dx_x += dxhat * normed.at(r, c);
                                }
                                for (std::size_t c = 0; c < C; ++c) {
                                    const T dxhat = dy.at(r, c) * gv[c];
                                    da.at(r, c) +=
                                        inv_std[r] * (dxhat - sum_dx / n - normed.at(r, c) * sum_dx_x / n);
                                }
                            }
                        }
                    });
    }

    // ---- structural --------------------------------------------------------

    Var slice_cols(Var a, std::size_t c0, std::size_t n) {
        const auto& av = value(a);
        if (c0 + n > av.cols() || n == 0) throw ShapeError("slice_cols: range out of bounds");
        const std::size_t R = av.rows();
        BasicTensor<T> out = BasicTensor<T>::matrix(R, n);
        for (std::size_t r = 0; r < R; ++r)
            for (std::size_t c = 0; c < n; ++c) out.at(r, c) = av.at(r, c0 + c);
        return make(std::move(out), {a}, [a, c0, n, R](Graph& g, int self) {
            if (!g.needs(a)) return;
            const auto& dy = g.nodes_[self].grad;
            auto& da = g.grad_ref(a.id);
            for (std::size_t r = 0; r < R; ++r)
                for (std::size_t c = 0; c < n; ++c) da.at(r, c0 + c) += dy.at(r, c);
        });
    }

    Var slice_rows(Var a, std::size_t r0, std::size_t n) {
        const auto& av = value(a);
        if (r0 + n > av.rows() || n == 0) throw ShapeError("slice_rows: range out of bounds");
        const std::size_t C = av.cols();
        std::vector<T> data(av.raw() + r0 * C, av.raw() + (r0 + n) * C);
        BasicTensor<T> out({n, C}, std::move(data));
        return make(std::move(out), {a}, [a, r0, C](Graph& g, int self) {
            if (!g.needs(a)) return;
            const auto& dy = g.nodes_[self].grad;
            auto& da = g.grad_ref(a.id);
            for (std::size_t i = 0; i < dy.size(); ++i) da[r0 * C + i] += dy[i];
        });
    }

    Var concat_rows(const std::vector<Var>& parts) {
        if (parts.empty()) throw ShapeError("concat_rows: no inputs");
        if (parts.size() == 1) return parts[0];
        const std::size_t C = value(parts[0]).cols();
        std::size_t R = 0;
        for (Var p : parts) {
            if (value(p).cols() != C) throw ShapeError("concat_rows: width mismatch");
            R += value(p).rows();
        }
        std::vector<T> data;
        data.reserve(R * C);
        for (Var p : parts) data.insert(data.end(), value(p).data().begin(), value(p).data().end());
        BasicTensor<T> out({R, C}, std::move(data));
        return make(std::move(out), parts, [parts](Graph& g, int self) {
            const auto& dy = g.nodes_[self].grad;
            std::size_t offset = 0;
            for (Var p : parts) {
                const std::size_t n = g.value(p).size();
                if (g.needs(p)) {
                    auto& dp = g.grad_ref(p.id);
                    for (std::size_t i = 0; i < n; ++i) dp[i] += dy[offset + i];
                }
                offset += n;
            }
        });
    }

    Var concat_cols(const std::vector<Var>& parts) {
        if (parts.empty()) throw ShapeError("concat_cols: no inputs");
        if (parts.size() == 1) return parts[0];
        const std::size_t R = value(parts[0]).rows();
        std::size_t C = 0;
        for (Var p : parts) {
            if (value(p).rows() != R) throw ShapeError("concat_cols: height mismatch");
            C += value(p).cols();
        }
        BasicTensor<T> out = BasicTensor<T>::matrix(R, C);
        std::size_t c0 = 0;
        for (Var p : parts) {
            const auto& pv = value(p);
            for (std::size_t r = 0; r < R; ++r)
                for (std::size_t c = 0; c < pv.cols(); ++c) out.at(r, c0 + c) = pv.at(r, c);
            c0 += pv.cols();
        }
        return make(std::move(out), parts, [parts, R](Graph& g, int self) {
            const auto& dy = g.nodes_[self].grad;
            std::size_t c0 = 0;
            for (Var p : parts) {
                const std::size_t pc = g.value(p).cols();
                if (g.needs(p)) {
                    auto& dp = g.grad_ref(p.id);
                    for (std::size_t r = 0; r < R; ++r)
                        for (std::size_t c = 0; c < pc; ++c) dp.at(r, c) += dy.at(r, c0 + c);
                }
                c0 += pc;
            }
        });
    }

    /// Sum of columns [c0, c0+n) → R×1. An empty range yields zeros.
    Var sum_cols(Var a, std::size_t c0, std::size_t n) {
        const auto& av = value(a);
        if (c0 + n > av.cols()) throw ShapeError("sum_cols: range out of bounds");
        const std::size_t R = av.rows();
        BasicTensor<T> out = BasicTensor<T>::matrix(R, 1);
        for (std::size_t r = 0; r < R; ++r) {
            T s = 0;
            for (std::size_t c = 0; c < n; ++c) s += av.at(r, c0 + c);
            out[r] = s;
        }
        return make(std::move(out), {a}, [a, c0, n, R](Graph& g, int self) {
            if (!g.needs(a)) return;
            const auto& dy = g.nodes_[self].grad;
            auto& da = g.grad_ref(a.id);
            for (std::size_t r = 0; r < R; ++r)
                for (std::size_t c = 0; c < n; ++c) da.at(r, c0 + c) += dy[r];
        });
    }

    // ---- reductions & normalisation -----------------------------------------

    Var minmax_norm(Var a) {
        const auto& av = value(a);
        BasicTensor<T> out = layerforge::minmax_norm(av);
        const auto [lo_it, hi_it] = std::minmax_element(av.data().begin(), av.data().end());
        const std::size_t lo = static_cast<std::size_t>(lo_it - av.data().begin());
        const std::size_t hi = static_cast<std::size_t>(hi_it - av.data().begin());
        const T range = *hi_it - *lo_it;
        return make(std::move(out), {a}, [a, lo, hi, range](Graph& g, int self) {
            if (!g.needs(a) || !(range > minmax_degenerate_range<T>())) return;
            const auto& dy = g.nodes_[self].grad;
            const auto& y = g.nodes_[self].value;
            auto& da = g.grad_ref(a.id);
            T to_lo = 0, to_hi = 0;
            for (std::size_t i = 0; i < dy.size(); ++i) {
                da[i] += dy[i] / range;
                to_lo += dy[i] * (y[i] - T(1));
                to_hi -= dy[i] * y[i];
            }
            da[lo] += to_lo / range;
            da[hi] += to_hi / range;
        });
    }

    Var sum_all(Var a) {
        T s = 0;
        for (T x : value(a).data()) s += x;
        return make(BasicTensor<T>::scalar(s), {a}, [a](Graph& g, int self) {
            if (!g.needs(a)) return;
            const T dy = g.nodes_[self].grad[0];
            for (auto& x : g.grad_ref(a.id).storage()) x += dy;
        });
    }

    /// Euclidean norm of all entries → 1×1. Zero input has zero gradient.
    Var l2_norm(Var a) {
        const T norm = layerforge::l2_norm(value(a));
        return make(BasicTensor<T>::scalar(norm), {a}, [a, norm](Graph& g, int self) {
            if (!g.needs(a) || !(norm > T(0))) return;
            const T dy = g.nodes_[self].grad[0];
            const auto& av = g.value(a);
            auto& da = g.grad_ref(a.id);
            for (std::size_t i = 0; i < av.size(); ++i) da[i] += dy * av[i] / norm;
        });
    }

    Var mean_square(Var a) {
        const auto& av = value(a);
        T s = 0;
        for (T x : av.data()) s += x * x;
        const T n = static_cast<T>(av.size());
        return make(BasicTensor<T>::scalar(s / n), {a}, [a, n](Graph& g, int self) {
            if (!g.needs(a)) return;
            const T dy = g.nodes_[self].grad[0];
            const auto& av = g.value(a);
            auto& da = g.grad_ref(a.id);
            for (std::size_t i = 0; i < av.size(); ++i) da[i] += dy * T(2) * av[i] / n;
        });
    }

    Var mean_abs(Var a) {
        const auto& av = value(a);
        T s = 0;
        for (T x : av.data()) s += std::abs(x);
        const T n = static_cast<T>(av.size());
        return make(BasicTensor<T>::scalar(s / n), {a}, [a, n](Graph& g, int self) {
            if (!g.needs(a)) return;
            const T dy = g.nodes_[self].grad[0];
            const auto& av = g.value(a);
            auto& da = g.grad_ref(a.id);
            for (std::size_t i = 0; i < av.size(); ++i) {
                const T sign = av[i] > T(0) ? T(1) : (av[i] < T(0) ? T(-1) : T(0));
                da[i] += dy * sign / n;
            }
        });
    }

    /// Constant copy that blocks gradient flow.
    Var detach(Var a) { return constant(value(a)); }

    static T gelu_value(T x) {
        const T c = static_cast<T>(0.7978845608028654);  // sqrt(2/pi)
        return T(0.5) * x * (T(1) + std::tanh(c * (x + T(0.044715) * x * x * x)));
    }

    static T gelu_derivative(T x) {
        const T c = static_cast<T>(0.7978845608028654);
        const T inner = c * (x + T(0.044715) * x * x * x);
        const T th = std::tanh(inner);
        const T sech2 = T(1) - th * th;
        return T(0.5) * (T(1) + th) + T(0.5) * x * sech2 * c * (T(1) + T(3) * T(0.044715) * x * x);
    }

private:
    using Backward = std::function<void(Graph&, int)>;

    struct Node {
        BasicTensor<T> value;
        BasicTensor<T> grad;
        bool needs_grad = false;
        Backward back;
    };

    Var push(BasicTensor<T> value, bool needs, Backward back) {
        const int id = static_cast<int>(nodes_.size());
        Node n;
        n.value = std::move(value);
        n.needs_grad = needs;
        if (needs && back) n.back = std::move(back);
        nodes_.push_back(std::move(n));
        return Var{id};
    }

    template <typename Inputs>
    Var make(BasicTensor<T> value, const Inputs& inputs, Backward back) {
        bool needs = false;
        if (record_) {
            for (Var v : inputs) needs = needs || nodes_.at(v.id).needs_grad;
        }
        return push(std::move(value), needs, needs ? std::move(back) : Backward{});
    }

    Var make(BasicTensor<T> value, std::initializer_list<Var> inputs, Backward back) {
        return make<std::initializer_list<Var>>(std::move(value), inputs, std::move(back));
    }

    bool needs(Var v) const { return nodes_[v.id].needs_grad; }

    BasicTensor<T>& grad_ref(int id) {
        Node& n = nodes_[id];
        if (n.grad.empty()) n.grad = BasicTensor<T>(n.value.shape());
        return n.grad;
    }

    void accumulate(Var v, const BasicTensor<T>& delta) {
        if (!needs(v)) return;
        auto& gr = grad_ref(v.id);
        for (std::size_t i = 0; i < delta.size(); ++i) gr[i] += delta[i];
    }

    void accumulate_scaled(Var v, const BasicTensor<T>& delta, T s) {
        if (!needs(v)) return;
        auto& gr = grad_ref(v.id);
        for (std::size_t i = 0; i < delta.size(); ++i) gr[i] += s * delta[i];
    }

    std::vector<Node> nodes_;
    bool record_;
};

}  // namespace layerforge
