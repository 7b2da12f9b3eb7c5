#pragma once

// Dense row-major tensors with tape-based reverse-mode differentiation.
//
// A tensor is a handle onto an immutable graph node. Operations on tensors that
// require gradients record their parents and a backward rule; backward() walks
// the recorded graph in reverse topological order. Only rank-1 and rank-2
// tensors are used by the rest of the library; element-wise and row-wise ops
// treat a tensor as a (product of leading dims) x (last dim) matrix.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "biofusion/errors.hpp"

namespace biofusion {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
    os << ']';
    return os.str();
}

template <typename Real>
class BasicTensor;

namespace detail {

template <typename Real>
struct Node {
    Shape shape;
    std::vector<Real> value;
    std::vector<Real> grad;
    bool requires_grad = false;
    bool is_leaf = true;
    const char* op = "leaf";
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(const Node&)> backward;

    std::vector<Real>& grad_buffer() {
        if (grad.size() != value.size()) grad.assign(value.size(), Real(0));
        return grad;
    }
};

// Counts multiply-accumulate FLOPs (2*m*k*n per matmul) while a FlopCounter is alive.
inline thread_local std::uint64_t* active_flop_counter = nullptr;

inline thread_local bool grad_recording_disabled = false;

}  // namespace detail

/// Ops executed while a guard is alive record no graph (inference mode).
class NoGradGuard {
public:
    NoGradGuard() : previous_(detail::grad_recording_disabled) { detail::grad_recording_disabled = true; }
    ~NoGradGuard() { detail::grad_recording_disabled = previous_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

/// Accumulates the FLOPs of every matmul executed on this thread during its lifetime.
class FlopCounter {
public:
    FlopCounter() : previous_(detail::active_flop_counter) { detail::active_flop_counter = &count_; }
    ~FlopCounter() { detail::active_flop_counter = previous_; }
    FlopCounter(const FlopCounter&) = delete;
    FlopCounter& operator=(const FlopCounter&) = delete;

    std::uint64_t count() const { return count_; }

private:
    std::uint64_t count_ = 0;
    std::uint64_t* previous_;
};

template <typename Real>
class BasicTensor {
public:
    using value_type = Real;
    using NodeType = detail::Node<Real>;

    BasicTensor() : BasicTensor(Shape{1}, std::vector<Real>{Real(0)}) {}

    BasicTensor(Shape shape, std::vector<Real> data, bool requires_grad = false)
        : node_(std::make_shared<NodeType>()) {
        if (shape.empty()) throw ShapeError("tensor shape must have at least one dimension");
        for (auto d : shape)
            if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape));
        if (shape_numel(shape) != data.size())
            throw ShapeError("shape " + shape_str(shape) + " does not match " + std::to_string(data.size()) +
                             " values");
        for (const Real v : data)
            if (!std::isfinite(v)) throw NumericError("non-finite value in tensor constructor");
        node_->shape = std::move(shape);
        node_->value = std::move(data);
        node_->requires_grad = requires_grad;
    }

    static BasicTensor zeros(Shape shape, bool requires_grad = false) {
        const auto n = shape_numel(shape);
        return BasicTensor(std::move(shape), std::vector<Real>(n, Real(0)), requires_grad);
    }
    static BasicTensor ones(Shape shape, bool requires_grad = false) { return full(std::move(shape), Real(1), requires_grad); }
    static BasicTensor full(Shape shape, Real v, bool requires_grad = false) {
        const auto n = shape_numel(shape);
        return BasicTensor(std::move(shape), std::vector<Real>(n, v), requires_grad);
    }
    static BasicTensor scalar(Real v, bool requires_grad = false) { return BasicTensor(Shape{1}, {v}, requires_grad); }
    static BasicTensor matrix(std::size_t rows, std::size_t cols, std::vector<Real> data, bool requires_grad = false) {
        return BasicTensor(Shape{rows, cols}, std::move(data), requires_grad);
    }

    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t numel() const { return node_->value.size(); }
    /// Leading dimensions flattened; 1 for a rank-1 tensor.
    std::size_t rows() const { return numel() / cols(); }
    std::size_t cols() const { return node_->shape.back(); }

    std::span<const Real> data() const { return node_->value; }
    Real operator[](std::size_t i) const { return node_->value[i]; }
    Real at(std::size_t r, std::size_t c) const { return node_->value[r * cols() + c]; }
    Real item() const {
        if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
        return node_->value[0];
    }

    bool requires_grad() const { return node_->requires_grad; }
    bool is_leaf() const { return node_->is_leaf; }
    const char* op_name() const { return node_->op; }

    /// Accumulated gradient; empty if backward has not reached this tensor.
    std::span<const Real> grad() const { return node_->grad; }
    void zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), Real(0)); }

    /// In-place access for parameter leaves (initialisation and optimiser updates).
    std::span<Real> mutable_data() {
        if (!node_->is_leaf) throw ContractError("mutable_data() is only permitted on leaf tensors");
        return node_->value;
    }

    /// A gradient-free leaf holding a copy of the values.
    BasicTensor detach() const { return BasicTensor(shape(), node_->value, false); }

    /// A leaf copy that participates in differentiation.
    BasicTensor clone_leaf(bool requires_grad = true) const { return BasicTensor(shape(), node_->value, requires_grad); }

    template <typename Other>
    BasicTensor<Other> cast() const {
        return BasicTensor<Other>(shape(), std::vector<Other>(node_->value.begin(), node_->value.end()));
    }

    /// True if both handles refer to the same graph node.
    bool same_node(const BasicTensor& other) const { return node_ == other.node_; }

    // Graph internals for op implementations.
    NodeType* node() const { return node_.get(); }
    const std::shared_ptr<NodeType>& node_ptr() const { return node_; }
    explicit BasicTensor(std::shared_ptr<NodeType> node) : node_(std::move(node)) {}

private:
    std::shared_ptr<NodeType> node_;
};

using Tensor = BasicTensor<double>;
using TensorF = BasicTensor<float>;

namespace detail {

template <typename Real>
void check_finite(const std::vector<Real>& v, const char* op) {
    for (const Real x : v)
        if (!std::isfinite(x)) throw NumericError(std::string("non-finite value produced by ") + op);
}

/// Builds the output node of an op. `backward` receives the finished output node
/// (value and incoming gradient) and pushes gradient into the parents.
template <typename Real>
BasicTensor<Real> make_op(const char* op, Shape shape, std::vector<Real> value,
                          const std::vector<BasicTensor<Real>>& inputs,
                          std::function<void(const Node<Real>&)> backward) {
    check_finite(value, op);
    auto node = std::make_shared<Node<Real>>();
    node->shape = std::move(shape);
    node->value = std::move(value);
    node->op = op;
    node->is_leaf = false;
    if (!grad_recording_disabled)
        for (const auto& in : inputs) node->requires_grad = node->requires_grad || in.requires_grad();
    if (node->requires_grad) {
        for (const auto& in : inputs) node->parents.push_back(in.node_ptr());
        node->backward = std::move(backward);
    }
    return BasicTensor<Real>(std::move(node));
}

template <typename Real>
void require_rank2(const BasicTensor<Real>& t, const char* op) {
    if (t.rank() != 2) throw ShapeError(std::string(op) + ": expected a matrix, got " + shape_str(t.shape()));
}

template <typename Real>
void require_same_shape(const BasicTensor<Real>& a, const BasicTensor<Real>& b, const char* op) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

// C (m x n) += A (m x k) * B (k x n), all row-major.
template <typename Real>
void gemm_nn(const Real* a, const Real* b, Real* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        Real* ci = c + i * n;
        const Real* ai = a + i * k;
        for (std::size_t l = 0; l < k; ++l) {
            const Real av = ai[l];
            if (av == Real(0)) continue;
            const Real* bl = b + l * n;
            for (std::size_t j = 0; j < n; ++j) ci[j] += av * bl[j];
        }
    }
}

// C (m x k) += G (m x n) * B^T where B is k x n.
template <typename Real>
void gemm_nt(const Real* g, const Real* b, Real* c, std::size_t m, std::size_t n, std::size_t k) {
    for (std::size_t i = 0; i < m; ++i) {
        const Real* gi = g + i * n;
        Real* ci = c + i * k;
        for (std::size_t l = 0; l < k; ++l) {
            const Real* bl = b + l * n;
            Real acc = 0;
            for (std::size_t j = 0; j < n; ++j) acc += gi[j] * bl[j];
            ci[l] += acc;
        }
    }
}

// C (k x n) += A^T * G where A is m x k, G is m x n.
template <typename Real>
void gemm_tn(const Real* a, const Real* g, Real* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const Real* ai = a + i * k;
        const Real* gi = g + i * n;
        for (std::size_t l = 0; l < k; ++l) {
            const Real av = ai[l];
            if (av == Real(0)) continue;
            Real* cl = c + l * n;
            for (std::size_t j = 0; j < n; ++j) cl[j] += av * gi[j];
        }
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

template <typename Real>
BasicTensor<Real> matmul(const BasicTensor<Real>& a, const BasicTensor<Real>& b) {
    detail::require_rank2(a, "matmul");
    detail::require_rank2(b, "matmul");
    const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
    if (b.shape()[0] != k)
        throw ShapeError("matmul: inner dimensions differ, " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    std::vector<Real> out(m * n, Real(0));
    detail::gemm_nn(a.data().data(), b.data().data(), out.data(), m, k, n);
    if (detail::active_flop_counter) *detail::active_flop_counter += 2ULL * m * k * n;
    auto pa = a.node(), pb = b.node();
    return detail::make_op<Real>("matmul", {m, n}, std::move(out), {a, b}, [pa, pb, m, k, n](const auto& self) {
        if (pa->requires_grad)
            detail::gemm_nt(self.grad.data(), pb->value.data(), pa->grad_buffer().data(), m, n, k);
        if (pb->requires_grad)
            detail::gemm_tn(pa->value.data(), self.grad.data(), pb->grad_buffer().data(), m, k, n);
    });
}

template <typename Real>
BasicTensor<Real> transpose(const BasicTensor<Real>& a) {
    detail::require_rank2(a, "transpose");
    const std::size_t m = a.shape()[0], n = a.shape()[1];
    std::vector<Real> out(m * n);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a.data()[i * n + j];
    auto pa = a.node();
    return detail::make_op<Real>("transpose", {n, m}, std::move(out), {a}, [pa, m, n](const auto& self) {
        auto& g = pa->grad_buffer();
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) g[i * n + j] += self.grad[j * m + i];
    });
}

// ---------------------------------------------------------------------------
// Element-wise

template <typename Real>
BasicTensor<Real> add(const BasicTensor<Real>& a, const BasicTensor<Real>& b) {
    detail::require_same_shape(a, b, "add");
    std::vector<Real> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
    auto pa = a.node(), pb = b.node();
    return detail::make_op<Real>("add", a.shape(), std::move(out), {a, b}, [pa, pb](const auto& self) {
        for (auto* p : {pa, pb}) {
            if (!p->requires_grad) continue;
            auto& g = p->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
    });
}

template <typename Real>
BasicTensor<Real> sub(const BasicTensor<Real>& a, const BasicTensor<Real>& b) {
    detail::require_same_shape(a, b, "sub");
    std::vector<Real> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
    auto pa = a.node(), pb = b.node();
    return detail::make_op<Real>("sub", a.shape(), std::move(out), {a, b}, [pa, pb](const auto& self) {
        if (pa->requires_grad) {
            auto& g = pa->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
        if (pb->requires_grad) {
            auto& g = pb->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
        }
    });
}

template <typename Real>
BasicTensor<Real> mul(const BasicTensor<Real>& a, const BasicTensor<Real>& b) {
    detail::require_same_shape(a, b, "mul");
    std::vector<Real> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
    auto pa = a.node(), pb = b.node();
    return detail::make_op<Real>("mul", a.shape(), std::move(out), {a, b}, [pa, pb](const auto& self) {
        if (pa->requires_grad) {
            auto& g = pa->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb->value[i];
        }
        if (pb->requires_grad) {
            auto& g = pb->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa->value[i];
        }
    });
}

/// Adds a row vector (numel == cols) to every row of `a`.
template <typename Real>
BasicTensor<Real> add_row(const BasicTensor<Real>& a, const BasicTensor<Real>& bias) {
    const std::size_t rows = a.rows(), cols = a.cols();
    if (bias.numel() != cols)
        throw ShapeError("add_row: bias of " + std::to_string(bias.numel()) + " values for " + std::to_string(cols) +
                         " columns");
    std::vector<Real> out(a.numel());
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = a[r * cols + c] + bias[c];
    auto pa = a.node(), pb = bias.node();
    return detail::make_op<Real>("add_row", a.shape(), std::move(out), {a, bias},
                                 [pa, pb, rows, cols](const auto& self) {
                                     if (pa->requires_grad) {
                                         auto& g = pa->grad_buffer();
                                         for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                                     }
                                     if (pb->requires_grad) {
                                         auto& g = pb->grad_buffer();
                                         for (std::size_t r = 0; r < rows; ++r)
                                             for (std::size_t c = 0; c < cols; ++c) g[c] += self.grad[r * cols + c];
                                     }
                                 });
}

template <typename Real>
BasicTensor<Real> scale(const BasicTensor<Real>& a, Real factor) {
    std::vector<Real> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * factor;
    auto pa = a.node();
    return detail::make_op<Real>("scale", a.shape(), std::move(out), {a}, [pa, factor](const auto& self) {
        auto& g = pa->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * factor;
    });
}

template <typename Real>
BasicTensor<Real> add_scalar(const BasicTensor<Real>& a, Real c) {
    std::vector<Real> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + c;
    auto pa = a.node();
    return detail::make_op<Real>("add_scalar", a.shape(), std::move(out), {a}, [pa](const auto& self) {
        auto& g = pa->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    });
}

template <typename Real>
BasicTensor<Real> relu(const BasicTensor<Real>& a) {
    std::vector<Real> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] > Real(0) ? a[i] : Real(0);
    auto pa = a.node();
    return detail::make_op<Real>("relu", a.shape(), std::move(out), {a}, [pa](const auto& self) {
        auto& g = pa->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i)
            if (pa->value[i] > Real(0)) g[i] += self.grad[i];
    });
}

template <typename Real>
BasicTensor<Real> exp(const BasicTensor<Real>& a) {
    std::vector<Real> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(a[i]);
    auto pa = a.node();
    return detail::make_op<Real>("exp", a.shape(), std::move(out), {a}, [pa](const auto& self) {
        auto& g = pa->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * self.value[i];
    });
}

template <typename Real>
BasicTensor<Real> log(const BasicTensor<Real>& a) {
    std::vector<Real> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) {
        if (!(a[i] > Real(0))) throw NumericError("log: non-positive input");
        out[i] = std::log(a[i]);
    }
    auto pa = a.node();
    return detail::make_op<Real>("log", a.shape(), std::move(out), {a}, [pa](const auto& self) {
        auto& g = pa->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] / pa->value[i];
    });
}

template <typename Real>
BasicTensor<Real> square(const BasicTensor<Real>& a) {
    std::vector<Real> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * a[i];
    auto pa = a.node();
    return detail::make_op<Real>("square", a.shape(), std::move(out), {a}, [pa](const auto& self) {
        auto& g = pa->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += Real(2) * pa->value[i] * self.grad[i];
    });
}

// ---------------------------------------------------------------------------
// Row-wise normalisations

/// Softmax over the last dimension, with per-row max subtraction.
template <typename Real>
BasicTensor<Real> softmax_rows(const BasicTensor<Real>& a) {
    const std::size_t rows = a.rows(), cols = a.cols();
    for (const Real v : a.data())
        if (!std::isfinite(v)) throw NumericError("softmax_rows: non-finite input");
    std::vector<Real> out(a.numel());
    for (std::size_t r = 0; r < rows; ++r) {
        const Real* x = a.data().data() + r * cols;
        Real* y = out.data() + r * cols;
        const Real mx = *std::max_element(x, x + cols);
        Real total = 0;
        for (std::size_t c = 0; c < cols; ++c) total += (y[c] = std::exp(x[c] - mx));
        for (std::size_t c = 0; c < cols; ++c) y[c] /= total;
    }
    auto pa = a.node();
    return detail::make_op<Real>("softmax_rows", a.shape(), std::move(out), {a}, [pa, rows, cols](const auto& self) {
        auto& g = pa->grad_buffer();
        for (std::size_t r = 0; r < rows; ++r) {
            const Real* y = self.value.data() + r * cols;
            const Real* dy = self.grad.data() + r * cols;
            Real dot = 0;
            for (std::size_t c = 0; c < cols; ++c) dot += dy[c] * y[c];
            for (std::size_t c = 0; c < cols; ++c) g[r * cols + c] += y[c] * (dy[c] - dot);
        }
    });
}

inline constexpr double kLayerNormEps = 1e-5;

/// Normalises each row to zero mean and unit (biased) variance, then applies
/// gain and bias. eps sits inside the square root.
template <typename Real>
BasicTensor<Real> layer_norm(const BasicTensor<Real>& x, const BasicTensor<Real>& gain, const BasicTensor<Real>& bias,
                             Real eps = Real(kLayerNormEps)) {
    const std::size_t rows = x.rows(), d = x.cols();
    if (gain.numel() != d || bias.numel() != d)
        throw ShapeError("layer_norm: gain/bias length must equal the feature width " + std::to_string(d));
    std::vector<Real> out(x.numel());
    std::vector<Real> xhat(x.numel());
    std::vector<Real> inv_std(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const Real* xr = x.data().data() + r * d;
        Real mean = 0;
        for (std::size_t c = 0; c < d; ++c) mean += xr[c];
        mean /= Real(d);
        Real var = 0;
        for (std::size_t c = 0; c < d; ++c) var += (xr[c] - mean) * (xr[c] - mean);
        var /= Real(d);
        inv_std[r] = Real(1) / std::sqrt(var + eps);
        for (std::size_t c = 0; c < d; ++c) {
            xhat[r * d + c] = (xr[c] - mean) * inv_std[r];
            out[r * d + c] = xhat[r * d + c] * gain[c] + bias[c];
        }
    }
    auto px = x.node(), pg = gain.node(), pb = bias.node();
    return detail::make_op<Real>(
        "layer_norm", x.shape(), std::move(out), {x, gain, bias},
        [px, pg, pb, rows, d, xhat = std::move(xhat), inv_std = std::move(inv_std)](const auto& self) {
            for (std::size_t r = 0; r < rows; ++r) {
                const Real* dy = self.grad.data() + r * d;
                const Real* xh = xhat.data() + r * d;
                if (pg->requires_grad) {
                    auto& g = pg->grad_buffer();
                    for (std::size_t c = 0; c < d; ++c) g[c] += dy[c] * xh[c];
                }
                if (pb->requires_grad) {
                    auto& g = pb->grad_buffer();
                    for (std::size_t c = 0; c < d; ++c) g[c] += dy[c];
                }
                if (px->requires_grad) {
                    Real mean_dxh = 0, mean_dxh_xh = 0;
                    for (std::size_t c = 0; c < d; ++c) {
                        const Real dxh = dy[c] * pg->value[c];
                        mean_dxh += dxh;
                        mean_dxh_xh += dxh * xh[c];
                    }
                    mean_dxh /= Real(d);
                    mean_dxh_xh /= Real(d);
                    auto& g = px->grad_buffer();
                    for (std::size_t c = 0; c < d; ++c) {
                        const Real dxh = dy[c] * pg->value[c];
                        g[r * d + c] += inv_std[r] * (dxh - mean_dxh - xh[c] * mean_dxh_xh);
                    }
                }
            }
        });
}

// ---------------------------------------------------------------------------
// Structural

template <typename Real>
BasicTensor<Real> reshape(const BasicTensor<Real>& a, Shape shape) {
    if (shape_numel(shape) != a.numel())
        throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
    std::vector<Real> out(a.data().begin(), a.data().end());
    auto pa = a.node();
    return detail::make_op<Real>("reshape", std::move(shape), std::move(out), {a}, [pa](const auto& self) {
        auto& g = pa->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    });
}

/// Stacks matrices with equal column counts on top of each other.
template <typename Real>
BasicTensor<Real> concat_rows(const std::vector<BasicTensor<Real>>& parts) {
    if (parts.empty()) throw ShapeError("concat_rows: no inputs");
    const std::size_t cols = parts.front().cols();
    std::size_t rows = 0;
    for (const auto& p : parts) {
        if (p.cols() != cols) throw ShapeError("concat_rows: column counts differ");
        rows += p.rows();
    }
    std::vector<Real> out;
    out.reserve(rows * cols);
    std::vector<detail::Node<Real>*> nodes;
    for (const auto& p : parts) {
        out.insert(out.end(), p.data().begin(), p.data().end());
        nodes.push_back(p.node());
    }
    return detail::make_op<Real>("concat_rows", {rows, cols}, std::move(out), parts, [nodes](const auto& self) {
        std::size_t offset = 0;
        for (auto* p : nodes) {
            const std::size_t n = p->value.size();
            if (p->requires_grad) {
                auto& g = p->grad_buffer();
                for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[offset + i];
            }
            offset += n;
        }
    });
}

/// Places matrices with equal row counts side by side.
template <typename Real>
BasicTensor<Real> concat_cols(const std::vector<BasicTensor<Real>>& parts) {
    if (parts.empty()) throw ShapeError("concat_cols: no inputs");
    const std::size_t rows = parts.front().rows();
    std::size_t cols = 0;
    std::vector<std::size_t> widths;
    std::vector<detail::Node<Real>*> nodes;
    for (const auto& p : parts) {
        if (p.rows() != rows) throw ShapeError("concat_cols: row counts differ");
        widths.push_back(p.cols());
        nodes.push_back(p.node());
        cols += p.cols();
    }
    std::vector<Real> out(rows * cols);
    for (std::size_t r = 0, off = 0; r < rows; ++r, off = 0)
        for (std::size_t k = 0; k < parts.size(); ++k) {
            std::copy_n(parts[k].data().data() + r * widths[k], widths[k], out.data() + r * cols + off);
            off += widths[k];
        }
    return detail::make_op<Real>("concat_cols", {rows, cols}, std::move(out), parts,
                                 [nodes, widths, rows, cols](const auto& self) {
                                     std::size_t off = 0;
                                     for (std::size_t k = 0; k < nodes.size(); ++k) {
                                         if (nodes[k]->requires_grad) {
                                             auto& g = nodes[k]->grad_buffer();
                                             for (std::size_t r = 0; r < rows; ++r)
                                                 for (std::size_t c = 0; c < widths[k]; ++c)
                                                     g[r * widths[k] + c] += self.grad[r * cols + off + c];
                                         }
                                         off += widths[k];
                                     }
                                 });
}

/// Rows [begin, end) of a matrix.
template <typename Real>
BasicTensor<Real> slice_rows(const BasicTensor<Real>& a, std::size_t begin, std::size_t end) {
    const std::size_t cols = a.cols();
    if (begin >= end || end > a.rows()) throw ShapeError("slice_rows: range out of bounds");
    std::vector<Real> out(a.data().begin() + begin * cols, a.data().begin() + end * cols);
    auto pa = a.node();
    return detail::make_op<Real>("slice_rows", {end - begin, cols}, std::move(out), {a},
                                 [pa, begin, cols](const auto& self) {
                                     auto& g = pa->grad_buffer();
                                     for (std::size_t i = 0; i < self.grad.size(); ++i) g[begin * cols + i] += self.grad[i];
                                 });
}

/// Columns [begin, end) of a matrix.
template <typename Real>
BasicTensor<Real> slice_cols(const BasicTensor<Real>& a, std::size_t begin, std::size_t end) {
    const std::size_t rows = a.rows(), cols = a.cols();
    if (begin >= end || end > cols) throw ShapeError("slice_cols: range out of bounds");
    const std::size_t w = end - begin;
    std::vector<Real> out(rows * w);
    for (std::size_t r = 0; r < rows; ++r)
        std::copy_n(a.data().data() + r * cols + begin, w, out.data() + r * w);
    auto pa = a.node();
    return detail::make_op<Real>("slice_cols", {rows, w}, std::move(out), {a},
                                 [pa, rows, cols, begin, w](const auto& self) {
                                     auto& g = pa->grad_buffer();
                                     for (std::size_t r = 0; r < rows; ++r)
                                         for (std::size_t c = 0; c < w; ++c)
                                             g[r * cols + begin + c] += self.grad[r * w + c];
                                 });
}

// ---------------------------------------------------------------------------
// Reductions

template <typename Real>
BasicTensor<Real> sum(const BasicTensor<Real>& a) {
    Real total = 0;
    for (const Real v : a.data()) total += v;
    auto pa = a.node();
    return detail::make_op<Real>("sum", {1}, {total}, {a}, [pa](const auto& self) {
        auto& g = pa->grad_buffer();
        for (auto& v : g) v += self.grad[0];
    });
}

template <typename Real>
BasicTensor<Real> mean(const BasicTensor<Real>& a) {
    return scale(sum(a), Real(1) / Real(a.numel()));
}

/// Column sums: (rows x cols) -> (1 x cols).
template <typename Real>
BasicTensor<Real> sum_rows(const BasicTensor<Real>& a) {
    const std::size_t rows = a.rows(), cols = a.cols();
    std::vector<Real> out(cols, Real(0));
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) out[c] += a[r * cols + c];
    auto pa = a.node();
    return detail::make_op<Real>("sum_rows", {1, cols}, std::move(out), {a}, [pa, rows, cols](const auto& self) {
        auto& g = pa->grad_buffer();
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c) g[r * cols + c] += self.grad[c];
    });
}

/// Column means: (rows x cols) -> (1 x cols).
template <typename Real>
BasicTensor<Real> mean_rows(const BasicTensor<Real>& a) {
    return scale(sum_rows(a), Real(1) / Real(a.rows()));
}

// ---------------------------------------------------------------------------
// Differentiation

/// Reverse sweep from a scalar root. Gradients of leaves accumulate across
/// calls until zero_grad(); gradients of interior nodes are recomputed on each call.
template <typename Real>
void backward(const BasicTensor<Real>& root) {
    if (root.numel() != 1) throw ContractError("backward: root must be a scalar, got " + shape_str(root.shape()));
    if (!root.requires_grad()) throw ContractError("backward: root is not connected to any tensor requiring grad");

    using NodeT = detail::Node<Real>;
    std::vector<NodeT*> order;
    std::unordered_set<NodeT*> visited;
    std::vector<std::pair<NodeT*, std::size_t>> stack{{root.node(), 0}};
    visited.insert(root.node());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            NodeT* p = node->parents[next++].get();
            if (p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    for (NodeT* n : order)
        if (!n->is_leaf) n->grad.assign(n->value.size(), Real(0));
    root.node()->grad_buffer()[0] += Real(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        NodeT* n = *it;
        if (!n->is_leaf && n->backward) n->backward(*n);
    }
}

}  // namespace biofusion
