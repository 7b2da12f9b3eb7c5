#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "biofusion/errors.hpp"
#include "biofusion/tensor.hpp"

namespace biofusion {

struct AdamOptions {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;  // decoupled; only used by adamw_step
};

template <typename Real>
struct AdamState {
    std::vector<std::vector<Real>> m;
    std::vector<std::vector<Real>> v;
    std::uint64_t t = 0;
};

namespace detail {

template <typename Real>
void adam_update(std::span<Real> p, std::span<const Real> g, std::vector<Real>& m, std::vector<Real>& v,
                 std::uint64_t t, const AdamOptions& o) {
    const double c1 = 1.0 - std::pow(o.beta1, double(t));
    const double c2 = 1.0 - std::pow(o.beta2, double(t));
    for (std::size_t i = 0; i < p.size(); ++i) {
        const Real gi = g.empty() ? Real(0) : g[i];
        m[i] = static_cast<Real>(o.beta1 * m[i] + (1.0 - o.beta1) * gi);
        v[i] = static_cast<Real>(o.beta2 * v[i] + (1.0 - o.beta2) * double(gi) * gi);
        const double m_hat = m[i] / c1;
        const double v_hat = v[i] / c2;
        p[i] = static_cast<Real>(p[i] - o.lr * m_hat / (std::sqrt(v_hat) + o.eps));
    }
}

template <typename Real>
void ensure_state(std::span<BasicTensor<Real>> params, AdamState<Real>& s) {
    if (s.m.empty()) {
        for (const auto& p : params) {
            s.m.emplace_back(p.numel(), Real(0));
            s.v.emplace_back(p.numel(), Real(0));
        }
    }
    if (s.m.size() != params.size()) throw ShapeError("adam: optimiser state tracks a different parameter list");
    for (std::size_t i = 0; i < params.size(); ++i)
        if (s.m[i].size() != params[i].numel()) throw ShapeError("adam: parameter " + std::to_string(i) + " changed size");
}

}  // namespace detail

/// One bias-corrected Adam step using each tensor's accumulated gradient
/// (a tensor that never received gradient is treated as having zero gradient).
template <typename Real>
void adam_step(std::span<BasicTensor<Real>> params, AdamState<Real>& state, const AdamOptions& opts) {
    detail::ensure_state(params, state);
    ++state.t;
    for (std::size_t i = 0; i < params.size(); ++i)
        detail::adam_update(params[i].mutable_data(), params[i].grad(), state.m[i], state.v[i], state.t, opts);
}

/// Adam with decoupled weight decay: p <- p - lr * wd * p, then the Adam update.
template <typename Real>
void adamw_step(std::span<BasicTensor<Real>> params, AdamState<Real>& state, const AdamOptions& opts) {
    detail::ensure_state(params, state);
    ++state.t;
    const Real shrink = static_cast<Real>(1.0 - opts.lr * opts.weight_decay);
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto p = params[i].mutable_data();
        if (opts.weight_decay != 0.0)
            for (auto& x : p) x *= shrink;
        detail::adam_update(p, params[i].grad(), state.m[i], state.v[i], state.t, opts);
    }
}

template <typename Real>
void zero_grads(std::span<BasicTensor<Real>> params) {
    for (auto& p : params) p.zero_grad();
}

}  // namespace biofusion
