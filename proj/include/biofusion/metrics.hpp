#pragma once

// Censored-data evaluation: concordance, Kaplan-Meier, log-rank, IPCW weights,
// time-dependent AUC and median-threshold risk grouping.

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "biofusion/errors.hpp"
#include "biofusion/survival.hpp"

namespace biofusion {

enum class TiePolicy {
    strict,       // tied predictions count as discordant
    half_credit,  // tied predictions count 1/2
};

/// Fraction of comparable pairs (y_i < y_j, subject i had the event) in which
/// subject i received the higher risk.
inline double concordance_index(std::span<const double> risks, std::span<const SurvivalRecord> records,
                                TiePolicy ties = TiePolicy::strict) {
    if (risks.size() != records.size()) throw ShapeError("concordance_index: risks and records differ in length");
    double num = 0, den = 0;
    for (std::size_t i = 0; i < records.size(); ++i) {
        if (!records[i].event) continue;
        for (std::size_t j = 0; j < records.size(); ++j) {
            if (!(records[i].time < records[j].time)) continue;
            den += 1;
            if (risks[i] > risks[j])
                num += 1;
            else if (risks[i] == risks[j] && ties == TiePolicy::half_credit)
                num += 0.5;
        }
    }
    if (den == 0) throw UndefinedError("concordance_index: no comparable pairs");
    return num / den;
}

struct KMCurve {
    std::vector<double> event_times;
    std::vector<double> survival;
    std::vector<int> at_risk;
    std::vector<int> n_events;
    int n_subjects = 0;

    /// Step-function value S(t).
    double at(double t) const {
        double s = 1.0;
        for (std::size_t k = 0; k < event_times.size() && event_times[k] <= t; ++k) s = survival[k];
        return s;
    }
};

inline KMCurve kaplan_meier(std::span<const SurvivalRecord> records) {
    if (records.empty()) throw ValidationError("kaplan_meier: no records");
    std::map<double, std::pair<int, int>> by_time;  // time -> (events, total leaving)
    for (const auto& r : records) {
        validate(r);
        auto& slot = by_time[r.time];
        slot.first += r.event;
        slot.second += 1;
    }
    KMCurve curve;
    curve.n_subjects = static_cast<int>(records.size());
    int at_risk = static_cast<int>(records.size());
    double s = 1.0;
    for (const auto& [t, counts] : by_time) {
        if (counts.first > 0) {
            s *= 1.0 - double(counts.first) / double(at_risk);
            curve.event_times.push_back(t);
            curve.survival.push_back(s);
            curve.at_risk.push_back(at_risk);
            curve.n_events.push_back(counts.first);
        }
        at_risk -= counts.second;
    }
    return curve;
}

/// One CSV row per listed event time: group,time,survival,at_risk,n_events.
/// Each group also gets a leading row at time 0 with S = 1 so plots start at
/// the top of the axis.
inline void write_km_csv(std::ostream& os, std::span<const std::pair<std::string, KMCurve>> groups) {
    os << "group,time,survival,at_risk,n_events\n";
    const auto old_precision = os.precision(17);
    for (const auto& [label, c] : groups) {
        os << label << ",0,1," << c.n_subjects << ",0\n";
        for (std::size_t k = 0; k < c.event_times.size(); ++k)
            os << label << ',' << c.event_times[k] << ',' << c.survival[k] << ',' << c.at_risk[k] << ','
               << c.n_events[k] << '\n';
    }
    os.precision(old_precision);
}

struct LogRankResult {
    double chi2 = 0;
    double p = 1;
    int df = 1;
};

/// Upper tail of the chi-square distribution with one degree of freedom.
inline double chi2_1df_sf(double x) { return x <= 0 ? 1.0 : std::erfc(std::sqrt(x / 2.0)); }

inline LogRankResult log_rank(std::span<const SurvivalRecord> group_a, std::span<const SurvivalRecord> group_b) {
    if (group_a.empty() || group_b.empty()) throw ValidationError("log_rank: both groups must be nonempty");
    std::map<double, std::array<int, 4>> by_time;  // events_a, leaving_a, events_b, leaving_b
    for (const auto& r : group_a) {
        validate(r);
        by_time[r.time][0] += r.event;
        by_time[r.time][1] += 1;
    }
    for (const auto& r : group_b) {
        validate(r);
        by_time[r.time][2] += r.event;
        by_time[r.time][3] += 1;
    }
    double n_a = double(group_a.size()), n_b = double(group_b.size());
    double o_minus_e = 0, var = 0;
    int total_events = 0;
    for (const auto& [t, c] : by_time) {
        const double d = c[0] + c[2];
        if (d > 0) {
            total_events += int(d);
            const double n = n_a + n_b;
            o_minus_e += c[0] - d * n_a / n;
            if (n > 1) var += d * (n_a / n) * (n_b / n) * (n - d) / (n - 1);
        }
        n_a -= c[1];
        n_b -= c[3];
    }
    if (total_events == 0) throw UndefinedError("log_rank: no events in either group");
    LogRankResult res;
    res.chi2 = var > 0 ? o_minus_e * o_minus_e / var : 0.0;
    res.p = chi2_1df_sf(res.chi2);
    return res;
}

inline constexpr double kDefaultIpcwCap = 20.0;

/// omega_i = 1 / G(y_i-) where G is the Kaplan-Meier estimate of the censoring
/// distribution (indicators swapped) evaluated just before y_i. Weights above
/// `cap`, including those where G has dropped to 0, are set to `cap` with a
/// warning.
inline std::vector<double> censoring_weights_ipcw(std::span<const SurvivalRecord> records,
                                                  double cap = kDefaultIpcwCap) {
    if (records.empty()) throw ValidationError("censoring_weights_ipcw: no records");
    std::vector<SurvivalRecord> swapped(records.begin(), records.end());
    for (auto& r : swapped) r.event = 1 - r.event;
    const KMCurve g = kaplan_meier(swapped);
    std::vector<double> w(records.size());
    std::size_t capped = 0;
    for (std::size_t i = 0; i < records.size(); ++i) {
        double g_minus = 1.0;
        for (std::size_t k = 0; k < g.event_times.size() && g.event_times[k] < records[i].time; ++k)
            g_minus = g.survival[k];
        if (g_minus <= 0 || 1.0 / g_minus > cap) {
            ++capped;
            w[i] = cap;
        } else {
            w[i] = 1.0 / g_minus;
        }
    }
    if (capped > 0) warn("censoring_weights_ipcw: " + std::to_string(capped) + " weight(s) capped at " + std::to_string(cap));
    return w;
}

enum class AucWeighting { ipcw, uniform };

struct AucOptions {
    std::vector<double> horizons{60.0, 120.0};
    AucWeighting weighting = AucWeighting::ipcw;
    bool strict = false;  // use f(x_j) < f(x_i) instead of <=
    double ipcw_cap = kDefaultIpcwCap;
};

struct AucResult {
    std::vector<double> horizons;
    std::vector<std::optional<double>> auc_at;  // nullopt where undefined
    double mean_auc = std::numeric_limits<double>::quiet_NaN();
    std::vector<double> weights_used;  // case weights omega_i * delta_i
};

/// Time-dependent AUC. Cases at horizon t are subjects with an observed event
/// by t, weighted by omega_i; controls are subjects still under observation
/// after t. A control scores against a case when its risk is <= the case's.
inline AucResult time_dependent_auc(std::span<const double> risks, std::span<const SurvivalRecord> records,
                                    const AucOptions& opts = {}) {
    if (risks.size() != records.size()) throw ShapeError("time_dependent_auc: risks and records differ in length");
    AucResult res;
    res.horizons = opts.horizons;
    const std::size_t n = records.size();
    std::vector<double> omega = opts.weighting == AucWeighting::ipcw ? censoring_weights_ipcw(records, opts.ipcw_cap)
                                                                      : std::vector<double>(n, 1.0);
    for (std::size_t i = 0; i < n; ++i) omega[i] *= records[i].event;
    res.weights_used = omega;

    double total = 0;
    int valid = 0;
    for (double t : opts.horizons) {
        double case_weight = 0, controls = 0, num = 0;
        for (std::size_t i = 0; i < n; ++i) {
            if (records[i].time <= t) case_weight += omega[i];
            if (records[i].time > t) controls += 1;
        }
        if (case_weight == 0 || controls == 0) {
            warn("time_dependent_auc: horizon " + std::to_string(t) + " has no cases or no controls; excluded");
            res.auc_at.push_back(std::nullopt);
            continue;
        }
        for (std::size_t i = 0; i < n; ++i) {
            if (!(records[i].time <= t) || omega[i] == 0) continue;
            for (std::size_t j = 0; j < n; ++j) {
                if (!(records[j].time > t)) continue;
                const bool hit = opts.strict ? risks[j] < risks[i] : risks[j] <= risks[i];
                if (hit) num += omega[i];
            }
        }
        const double auc = num / (case_weight * controls);
        res.auc_at.push_back(auc);
        total += auc;
        ++valid;
    }
    if (valid == 0) throw UndefinedError("time_dependent_auc: no horizon has both cases and controls");
    res.mean_auc = total / valid;
    return res;
}

enum class RiskGroup { low, high };

inline const char* to_string(RiskGroup g) { return g == RiskGroup::high ? "high" : "low"; }

/// high where risk > theta; low otherwise (risk == theta goes to low).
inline std::vector<RiskGroup> risk_groups(std::span<const double> risks, double theta_opt) {
    if (!std::isfinite(theta_opt)) throw ValidationError("risk_groups: threshold must be finite");
    std::vector<RiskGroup> g(risks.size());
    for (std::size_t i = 0; i < risks.size(); ++i) g[i] = risks[i] > theta_opt ? RiskGroup::high : RiskGroup::low;
    return g;
}

/// Exact median; mean of the middle two for even counts.
inline double median_threshold(std::span<const double> train_risks) {
    if (train_risks.empty()) throw ValidationError("median_threshold: no risks");
    std::vector<double> v(train_risks.begin(), train_risks.end());
    std::sort(v.begin(), v.end());
    const std::size_t m = v.size() / 2;
    return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

}  // namespace biofusion
