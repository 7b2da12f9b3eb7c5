#pragma once

// Independent reference implementations used by the unit tests and the
// acceptance binary. Each one is written from the defining formula with no
// shared code paths into the library beyond the record type.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "biofusion/rng.hpp"
#include "biofusion/survival.hpp"

namespace oracle {

using biofusion::Rng;
using biofusion::SurvivalRecord;

/// Negative log partial likelihood built risk set by risk set:
/// for each event i, R_i = { j : t_j >= t_i }.
inline double weighted_cox_enumerated(const std::vector<double>& r, const std::vector<SurvivalRecord>& rec) {
    double num = 0, ew = 0;
    for (std::size_t i = 0; i < rec.size(); ++i) {
        if (!rec[i].event) continue;
        double h = 0;
        for (std::size_t j = 0; j < rec.size(); ++j)
            if (rec[j].time >= rec[i].time) h += rec[j].weight * std::exp(r[j]);
        num += rec[i].weight * (r[i] - std::log(h));
        ew += rec[i].weight;
    }
    return -num / ew;
}

/// Classical Breslow negative log partial likelihood (unit weights), averaged
/// over events.
inline double breslow_nll(const std::vector<double>& r, const std::vector<SurvivalRecord>& rec) {
    double ll = 0;
    int d = 0;
    for (std::size_t i = 0; i < rec.size(); ++i) {
        if (!rec[i].event) continue;
        double s = 0;
        for (std::size_t j = 0; j < rec.size(); ++j)
            if (rec[j].time >= rec[i].time) s += std::exp(r[j]);
        ll += r[i] - std::log(s);
        ++d;
    }
    return -ll / d;
}

/// Line-by-line transcription of the weighted Cox loss pseudocode: total
/// weighted events, sort by descending risk, hazard, cumulative sum,
/// uncensored log likelihood, event mask, normalised negative sum.
struct Alg1Trace {
    double e_w = 0;
    std::vector<std::size_t> order;
    std::vector<double> h, H, u, c;
    double loss = 0;
};

inline Alg1Trace alg1_literal(const std::vector<double>& r_in, const std::vector<SurvivalRecord>& rec) {
    Alg1Trace t;
    const std::size_t n = r_in.size();
    for (std::size_t i = 0; i < n; ++i) t.e_w += rec[i].weight * rec[i].event;
    t.order.resize(n);
    std::iota(t.order.begin(), t.order.end(), std::size_t{0});
    std::stable_sort(t.order.begin(), t.order.end(), [&](std::size_t a, std::size_t b) { return r_in[a] > r_in[b]; });
    std::vector<double> r(n), e(n), w(n);
    for (std::size_t k = 0; k < n; ++k) {
        r[k] = r_in[t.order[k]];
        e[k] = rec[t.order[k]].event;
        w[k] = rec[t.order[k]].weight;
    }
    t.h.resize(n);
    for (std::size_t i = 0; i < n; ++i) t.h[i] = std::exp(r[i]);
    t.H.resize(n);
    double prev = 0;
    for (std::size_t i = 0; i < n; ++i) {
        t.H[i] = prev + w[i] * t.h[i];
        prev = t.H[i];
    }
    t.u.resize(n);
    for (std::size_t i = 0; i < n; ++i) t.u[i] = w[i] * (r[i] - std::log(t.H[i]));
    t.c.resize(n);
    for (std::size_t i = 0; i < n; ++i) t.c[i] = t.u[i] * e[i];
    double s = 0;
    for (double ci : t.c) s += ci;
    t.loss = -s / t.e_w;
    return t;
}

/// Ratio of indicator sums over all ordered pairs (i, j).
inline double cindex_pairs(const std::vector<double>& risk, const std::vector<SurvivalRecord>& rec) {
    double num = 0, den = 0;
    for (std::size_t i = 0; i < rec.size(); ++i)
        for (std::size_t j = 0; j < rec.size(); ++j) {
            const double comparable = (rec[i].time < rec[j].time ? 1.0 : 0.0) * rec[i].event;
            num += comparable * (risk[i] > risk[j] ? 1.0 : 0.0);
            den += comparable;
        }
    return num / den;
}

/// Weighted double sum for AUC(t) with explicit case weights omega.
inline double auc_double_sum(const std::vector<double>& f, const std::vector<SurvivalRecord>& rec,
                             const std::vector<double>& omega, double t) {
    double num = 0, den = 0;
    for (std::size_t i = 0; i < rec.size(); ++i)
        for (std::size_t j = 0; j < rec.size(); ++j) {
            const double pair = (rec[j].time > t ? 1.0 : 0.0) * (rec[i].time <= t ? 1.0 : 0.0) * omega[i];
            num += pair * (f[j] <= f[i] ? 1.0 : 0.0);
            den += pair;
        }
    return num / den;
}

/// S(t) = prod over event times t_k <= t of (1 - d_k / n_k), counting directly.
inline double km_product_limit(const std::vector<SurvivalRecord>& rec, double t) {
    std::vector<double> times;
    for (const auto& r : rec)
        if (r.event && r.time <= t) times.push_back(r.time);
    std::sort(times.begin(), times.end());
    times.erase(std::unique(times.begin(), times.end()), times.end());
    double s = 1;
    for (double tk : times) {
        double d = 0, n = 0;
        for (const auto& r : rec) {
            if (r.time >= tk) n += 1;
            if (r.time == tk && r.event) d += 1;
        }
        s *= 1 - d / n;
    }
    return s;
}

/// Log partial likelihood for one covariate, written from the definition.
inline double cox_loglik_1d(const std::vector<double>& x, const std::vector<SurvivalRecord>& rec, double beta) {
    double ll = 0;
    for (std::size_t i = 0; i < rec.size(); ++i) {
        if (!rec[i].event) continue;
        double s = 0;
        for (std::size_t j = 0; j < rec.size(); ++j)
            if (rec[j].time >= rec[i].time) s += std::exp(beta * x[j]);
        ll += beta * x[i] - std::log(s);
    }
    return ll;
}

/// Same quantity evaluated in one sweep over descending time, tied times
/// entering the risk set together.
inline double cox_loglik_1d_sweep(const std::vector<double>& x, const std::vector<SurvivalRecord>& rec, double beta) {
    std::vector<std::size_t> idx(rec.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return rec[a].time > rec[b].time; });
    double ll = 0, s = 0;
    for (std::size_t k = 0; k < idx.size();) {
        std::size_t end = k;
        while (end < idx.size() && rec[idx[end]].time == rec[idx[k]].time) s += std::exp(beta * x[idx[end++]]);
        for (std::size_t m = k; m < end; ++m)
            if (rec[idx[m]].event) ll += beta * x[idx[m]] - std::log(s);
        k = end;
    }
    return ll;
}

/// Maximiser of the 1-D partial likelihood on a grid of spacing `step`.
inline double grid_search_beta(const std::vector<double>& x, const std::vector<SurvivalRecord>& rec, double lo,
                               double hi, double step) {
    double best_b = lo, best = -1e300;
    const int n = static_cast<int>(std::round((hi - lo) / step));
    for (int k = 0; k <= n; ++k) {
        const double b = lo + k * step;
        const double ll = cox_loglik_1d_sweep(x, rec, b);
        if (ll > best) {
            best = ll;
            best_b = b;
        }
    }
    return best_b;
}

/// Standard-normal covariate, exponential event times with hazard
/// exp(beta * x), and exponential censoring at `censor_rate`.
inline void exponential_cohort(std::size_t n, double beta, double censor_rate, Rng& rng, std::vector<double>& x,
                               std::vector<SurvivalRecord>& rec) {
    x.assign(n, 0);
    rec.assign(n, {});
    for (std::size_t i = 0; i < n; ++i) {
        x[i] = rng.normal();
        const double t = -std::log(rng.uniform_open_low()) / std::exp(beta * x[i]);
        const double c = -std::log(rng.uniform_open_low()) / censor_rate;
        rec[i].event = t <= c ? 1 : 0;
        rec[i].time = std::min(t, c);
    }
}

/// Random survival batch; integer-valued times in [1, max_time] give ties.
inline std::vector<SurvivalRecord> random_records(std::size_t n, double event_rate, Rng& rng, int max_time = 0,
                                                  bool ensure_event = true) {
    std::vector<SurvivalRecord> rec(n);
    for (auto& r : rec) {
        r.time = max_time > 0 ? double(1 + rng.below(std::uint64_t(max_time))) : rng.uniform(0.1, 100.0);
        r.event = rng.uniform() < event_rate ? 1 : 0;
    }
    if (ensure_event) rec[rng.below(n)].event = 1;
    return rec;
}

inline std::vector<double> random_risks(std::size_t n, Rng& rng, double scale = 1.0) {
    std::vector<double> r(n);
    for (auto& v : r) v = scale * rng.normal();
    return r;
}

}  // namespace oracle
