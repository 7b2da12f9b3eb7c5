#pragma once

// Weighted Cox partial-likelihood loss and its analytic gradient.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "biofusion/errors.hpp"
#include "biofusion/tensor.hpp"

namespace biofusion {

/// One patient's outcome. `time` is in months; `event` is 1 for an observed
/// death and 0 for censoring; `weight` scales the patient's loss contribution.
struct SurvivalRecord {
    double time = 1.0;
    int event = 0;
    double weight = 1.0;
};

inline void validate(const SurvivalRecord& r) {
    if (!(r.time > 0) || !std::isfinite(r.time)) throw ValidationError("survival time must be positive and finite");
    if (r.event != 0 && r.event != 1) throw ValidationError("event indicator must be 0 or 1");
    if (!(r.weight > 0) || !std::isfinite(r.weight)) throw ValidationError("loss weight must be positive");
}

struct RiskBatch {
    std::vector<double> risks;
    std::vector<SurvivalRecord> records;
};

enum class CoxMode {
    /// Risk set of sample i is every sample with t_j >= t_i (Breslow ties).
    time_sorted,
    /// Samples sorted by descending risk, risk set is the sorted prefix.
    verbatim_alg1,
};

inline const char* to_string(CoxMode m) { return m == CoxMode::time_sorted ? "time_sorted" : "verbatim_alg1"; }

inline CoxMode cox_mode_from_string(const std::string& s) {
    if (s == "time_sorted") return CoxMode::time_sorted;
    if (s == "verbatim_alg1") return CoxMode::verbatim_alg1;
    throw ValidationError("unknown loss_mode '" + s + "' (expected time_sorted or verbatim_alg1)");
}

/// w_event for event samples, 1 for censored ones.
inline std::vector<double> event_weights(std::span<const int> events, double w_event) {
    if (!(w_event > 0)) throw ValidationError("event weight must be positive");
    std::vector<double> w(events.size());
    for (std::size_t i = 0; i < events.size(); ++i) w[i] = events[i] == 1 ? w_event : 1.0;
    return w;
}

/// Copies `records` with weights replaced by event_weights(events, w_event).
inline std::vector<SurvivalRecord> with_event_weights(std::span<const SurvivalRecord> records, double w_event) {
    if (!(w_event > 0)) throw ValidationError("event weight must be positive");
    std::vector<SurvivalRecord> out(records.begin(), records.end());
    for (auto& r : out) r.weight = r.event == 1 ? w_event : 1.0;
    return out;
}

namespace detail {

// Groups of sample indices processed in risk-set order. In time_sorted mode a
// group holds all samples tied at one time (descending); in verbatim mode every
// group is a single sample in descending-risk order.
inline std::vector<std::vector<std::size_t>> risk_set_groups(std::span<const double> risks,
                                                             std::span<const SurvivalRecord> records, CoxMode mode) {
    const std::size_t n = records.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::vector<std::vector<std::size_t>> groups;
    if (mode == CoxMode::verbatim_alg1) {
        std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return risks[a] > risks[b]; });
        for (auto i : order) groups.push_back({i});
    } else {
        std::stable_sort(order.begin(), order.end(),
                         [&](auto a, auto b) { return records[a].time > records[b].time; });
        for (std::size_t k = 0; k < n; ++k) {
            if (k == 0 || records[order[k]].time != records[order[k - 1]].time) groups.emplace_back();
            groups.back().push_back(order[k]);
        }
    }
    return groups;
}

struct CoxPieces {
    double max_risk = 0;
    double total_weighted_events = 0;
    std::vector<std::vector<std::size_t>> groups;
    std::vector<double> scaled_hazard;  // per group: sum over risk set of w_j exp(r_j - max_risk)
};

inline CoxPieces cox_pieces(std::span<const double> risks, std::span<const SurvivalRecord> records, CoxMode mode) {
    if (risks.size() != records.size()) throw ShapeError("weighted_cox_loss: risks and records differ in length");
    CoxPieces p;
    for (const auto& r : records) {
        validate(r);
        p.total_weighted_events += r.weight * r.event;
    }
    if (!(p.total_weighted_events > 0)) throw UndefinedError("weighted_cox_loss: batch has no events");
    for (double r : risks)
        if (!std::isfinite(r)) throw NumericError("weighted_cox_loss: non-finite risk");
    p.max_risk = *std::max_element(risks.begin(), risks.end());
    p.groups = risk_set_groups(risks, records, mode);
    double running = 0;
    for (const auto& g : p.groups) {
        for (auto j : g) running += records[j].weight * std::exp(risks[j] - p.max_risk);
        p.scaled_hazard.push_back(running);
    }
    return p;
}

}  // namespace detail

/// L = -(1 / sum w_i e_i) * sum w_i e_i (r_i - log H_i), H_i the weighted
/// cumulative hazard over sample i's risk set. log H is evaluated as
/// max_r + log(sum w exp(r - max_r)).
inline double weighted_cox_loss(std::span<const double> risks, std::span<const SurvivalRecord> records,
                                CoxMode mode = CoxMode::time_sorted) {
    const auto p = detail::cox_pieces(risks, records, mode);
    double acc = 0;
    for (std::size_t g = 0; g < p.groups.size(); ++g) {
        const double log_h = p.max_risk + std::log(p.scaled_hazard[g]);
        for (auto i : p.groups[g])
            if (records[i].event) acc += records[i].weight * (risks[i] - log_h);
    }
    return -acc / p.total_weighted_events;
}

inline double weighted_cox_loss(const RiskBatch& batch, CoxMode mode = CoxMode::time_sorted) {
    return weighted_cox_loss(batch.risks, batch.records, mode);
}

/// dL/dr_k = -(1/E_w) [w_k e_k - w_k exp(r_k) * sum_{i : k in R_i} w_i e_i / H_i].
inline std::vector<double> weighted_cox_loss_grad(std::span<const double> risks,
                                                  std::span<const SurvivalRecord> records,
                                                  CoxMode mode = CoxMode::time_sorted) {
    const auto p = detail::cox_pieces(risks, records, mode);
    // Sample k belongs to the risk set of every group at or after its own in
    // processing order, so accumulate event terms from the back.
    std::vector<double> grad(risks.size(), 0.0);
    double tail = 0;
    for (std::size_t g = p.groups.size(); g-- > 0;) {
        for (auto i : p.groups[g])
            if (records[i].event) tail += records[i].weight / p.scaled_hazard[g];
        for (auto k : p.groups[g]) {
            const double wk = records[k].weight;
            grad[k] = -(wk * records[k].event - wk * std::exp(risks[k] - p.max_risk) * tail) / p.total_weighted_events;
        }
    }
    return grad;
}

inline std::vector<double> weighted_cox_loss_grad(const RiskBatch& batch, CoxMode mode = CoxMode::time_sorted) {
    return weighted_cox_loss_grad(batch.risks, batch.records, mode);
}

/// Differentiable weighted Cox loss over a column (or row) of risks.
template <typename Real>
BasicTensor<Real> cox_loss(const BasicTensor<Real>& risks, std::span<const SurvivalRecord> records,
                           CoxMode mode = CoxMode::time_sorted) {
    std::vector<double> r(risks.data().begin(), risks.data().end());
    const double loss = weighted_cox_loss(r, records, mode);
    auto grad = weighted_cox_loss_grad(r, records, mode);
    auto pr = risks.node();
    return detail::make_op<Real>("weighted_cox_loss", {1}, {static_cast<Real>(loss)}, {risks},
                                 [pr, grad = std::move(grad)](const auto& self) {
                                     auto& g = pr->grad_buffer();
                                     for (std::size_t i = 0; i < g.size(); ++i)
                                         g[i] += self.grad[0] * static_cast<Real>(grad[i]);
                                 });
}

}  // namespace biofusion
