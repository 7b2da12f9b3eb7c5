#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "biofusion/tensor.hpp"

namespace biofusion {

/// Compares analytic gradients of a scalar function against central
/// differences. `f` is re-evaluated from the current values of `params`, which
/// are perturbed in place and restored afterwards. Returns
/// max over coordinates of |analytic - numeric| / max(1, |analytic|).
inline double check_gradients(const std::function<Tensor()>& f, std::vector<Tensor> params, double h = 1e-5) {
    if (!(h > 0)) throw ContractError("check_gradients: step must be positive");
    for (auto& p : params) {
        if (!p.is_leaf() || !p.requires_grad())
            throw ContractError("check_gradients: parameters must be leaves with requires_grad");
        p.zero_grad();
    }
    backward(f());

    double worst = 0.0;
    for (auto& p : params) {
        std::vector<double> analytic(p.grad().begin(), p.grad().end());
        if (analytic.empty()) analytic.assign(p.numel(), 0.0);
        auto values = p.mutable_data();
        for (std::size_t i = 0; i < values.size(); ++i) {
            const double saved = values[i];
            values[i] = saved + h;
            const double up = f().item();
            values[i] = saved - h;
            const double down = f().item();
            values[i] = saved;
            const double numeric = (up - down) / (2.0 * h);
            worst = std::max(worst, std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(analytic[i])));
        }
    }
    return worst;
}

/// Single-input form: `f` maps a tensor shaped like `x` to a scalar.
inline double check_gradients(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double h = 1e-5) {
    Tensor leaf = x.clone_leaf(true);
    return check_gradients([&] { return f(leaf); }, std::vector<Tensor>{leaf}, h);
}

}  // namespace biofusion
