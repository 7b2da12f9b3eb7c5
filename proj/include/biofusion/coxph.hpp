#pragma once

// Classical Cox proportional-hazards regression (Breslow ties) by
// Newton-Raphson, and Wald hazard-ratio tables.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "biofusion/errors.hpp"
#include "biofusion/survival.hpp"

namespace biofusion {

/// Row-major n x p covariate matrix.
struct Covariates {
    std::size_t n = 0;
    std::size_t p = 0;
    std::vector<double> values;
    std::vector<std::string> labels;

    double operator()(std::size_t i, std::size_t j) const { return values[i * p + j]; }
    std::string label(std::size_t j) const { return j < labels.size() ? labels[j] : "column " + std::to_string(j); }
};

struct CoxModel {
    std::vector<double> coefficients;
    std::vector<double> covariance;  // p x p, inverse observed information at the estimate
    double log_likelihood = 0;
    int n_iterations = 0;
    bool converged = false;
    std::vector<std::string> labels;

    double std_error(std::size_t j) const { return std::sqrt(covariance[j * coefficients.size() + j]); }
};

struct HazardRow {
    std::string name;
    double hr = 1;
    double ci_low = 1;
    double ci_high = 1;
    double p = 1;
    std::string n_per_group;  // e.g. "64 vs 185"; optional
};

struct CoxFitOptions {
    int max_iterations = 100;
    double tolerance = 1e-8;
};

/// Breslow log partial likelihood at beta. Exposed for tests and oracles.
inline double cox_log_partial_likelihood(const Covariates& x, std::span<const SurvivalRecord> records,
                                         std::span<const double> beta) {
    std::vector<double> eta(x.n, 0.0);
    for (std::size_t i = 0; i < x.n; ++i)
        for (std::size_t j = 0; j < x.p; ++j) eta[i] += x(i, j) * beta[j];
    std::vector<SurvivalRecord> unit(records.begin(), records.end());
    for (auto& r : unit) r.weight = 1.0;
    double events = 0;
    for (const auto& r : unit) events += r.event;
    return -weighted_cox_loss(eta, unit, CoxMode::time_sorted) * events;
}

namespace detail {

struct CoxDerivatives {
    double loglik = 0;
    std::vector<double> score;        // p
    std::vector<double> information;  // p x p
};

inline CoxDerivatives cox_derivatives(const Covariates& x, std::span<const SurvivalRecord> records,
                                      std::span<const double> beta) {
    const std::size_t n = x.n, p = x.p;
    std::vector<double> eta(n, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < p; ++j) eta[i] += x(i, j) * beta[j];
    const double shift = *std::max_element(eta.begin(), eta.end());

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return records[a].time > records[b].time; });

    CoxDerivatives d;
    d.score.assign(p, 0.0);
    d.information.assign(p * p, 0.0);
    double s0 = 0;
    std::vector<double> s1(p, 0.0), s2(p * p, 0.0);
    for (std::size_t k = 0; k < n;) {
        std::size_t end = k;
        while (end < n && records[order[end]].time == records[order[k]].time) ++end;
        for (std::size_t m = k; m < end; ++m) {
            const auto i = order[m];
            const double w = std::exp(eta[i] - shift);
            s0 += w;
            for (std::size_t a = 0; a < p; ++a) {
                s1[a] += w * x(i, a);
                for (std::size_t b = 0; b < p; ++b) s2[a * p + b] += w * x(i, a) * x(i, b);
            }
        }
        for (std::size_t m = k; m < end; ++m) {
            const auto i = order[m];
            if (!records[i].event) continue;
            d.loglik += eta[i] - shift - std::log(s0);
            for (std::size_t a = 0; a < p; ++a) {
                const double mean_a = s1[a] / s0;
                d.score[a] += x(i, a) - mean_a;
                for (std::size_t b = 0; b < p; ++b)
                    d.information[a * p + b] += s2[a * p + b] / s0 - mean_a * s1[b] / s0;
            }
        }
        k = end;
    }
    return d;
}

// In-place Cholesky of a symmetric positive-definite matrix. Returns the index
// of the first column whose pivot collapses, or p on success.
inline std::size_t cholesky(std::vector<double>& a, std::size_t p) {
    for (std::size_t j = 0; j < p; ++j) {
        const double diag_scale = std::max(1.0, std::abs(a[j * p + j]));
        double s = a[j * p + j];
        for (std::size_t k = 0; k < j; ++k) s -= a[j * p + k] * a[j * p + k];
        if (!(s > 1e-12 * diag_scale)) return j;
        const double l = std::sqrt(s);
        a[j * p + j] = l;
        for (std::size_t i = j + 1; i < p; ++i) {
            double t = a[i * p + j];
            for (std::size_t k = 0; k < j; ++k) t -= a[i * p + k] * a[j * p + k];
            a[i * p + j] = t / l;
        }
        for (std::size_t i = 0; i < j; ++i) a[i * p + j] = 0.0;
    }
    return p;
}

inline std::vector<double> cholesky_solve(const std::vector<double>& l, std::size_t p, std::vector<double> b) {
    for (std::size_t i = 0; i < p; ++i) {
        for (std::size_t k = 0; k < i; ++k) b[i] -= l[i * p + k] * b[k];
        b[i] /= l[i * p + i];
    }
    for (std::size_t i = p; i-- > 0;) {
        for (std::size_t k = i + 1; k < p; ++k) b[i] -= l[k * p + i] * b[k];
        b[i] /= l[i * p + i];
    }
    return b;
}

}  // namespace detail

/// Newton-Raphson maximisation of the Breslow partial likelihood. Record
/// weights are ignored; this is the classical unweighted model.
inline CoxModel fit_coxph(const Covariates& x, std::span<const SurvivalRecord> records, CoxFitOptions opts = {}) {
    const std::size_t n = x.n, p = x.p;
    if (x.values.size() != n * p) throw ShapeError("fit_coxph: covariate matrix size mismatch");
    if (records.size() != n) throw ShapeError("fit_coxph: covariates and records differ in length");
    if (p == 0) throw ValidationError("fit_coxph: no covariates");
    if (n <= p) throw ValidationError("fit_coxph: need more subjects than covariates");
    int events = 0;
    for (const auto& r : records) {
        validate(r);
        events += r.event;
    }
    if (events == 0) throw UndefinedError("fit_coxph: no events");
    for (std::size_t j = 0; j < p; ++j) {
        bool constant = true;
        for (std::size_t i = 1; i < n && constant; ++i) constant = x(i, j) == x(0, j);
        if (constant) throw ValidationError("fit_coxph: covariate '" + x.label(j) + "' is constant");
    }

    // Centre columns; the coefficients are unchanged and the sums are better conditioned.
    Covariates centred = x;
    for (std::size_t j = 0; j < p; ++j) {
        double m = 0;
        for (std::size_t i = 0; i < n; ++i) m += x(i, j);
        m /= double(n);
        for (std::size_t i = 0; i < n; ++i) centred.values[i * p + j] -= m;
    }

    CoxModel model;
    model.labels = x.labels;
    std::vector<double> beta(p, 0.0);
    auto d = detail::cox_derivatives(centred, records, beta);
    for (int it = 1; it <= opts.max_iterations; ++it) {
        auto chol = d.information;
        if (auto bad = detail::cholesky(chol, p); bad < p)
            throw RankDeficiencyError("fit_coxph: information matrix is singular at covariate '" + x.label(bad) + "'");
        auto step = detail::cholesky_solve(chol, p, d.score);
        std::vector<double> next(p);
        double halving = 1.0;
        detail::CoxDerivatives nd;
        for (int h = 0; h < 30; ++h) {
            for (std::size_t j = 0; j < p; ++j) next[j] = beta[j] + halving * step[j];
            nd = detail::cox_derivatives(centred, records, next);
            if (std::isfinite(nd.loglik) && nd.loglik >= d.loglik - 1e-12 * std::abs(d.loglik)) break;
            halving *= 0.5;
        }
        double max_delta = 0;
        for (std::size_t j = 0; j < p; ++j) max_delta = std::max(max_delta, std::abs(next[j] - beta[j]));
        beta = next;
        d = std::move(nd);
        model.n_iterations = it;
        if (max_delta < opts.tolerance) {
            model.converged = true;
            break;
        }
    }

    auto chol = d.information;
    if (auto bad = detail::cholesky(chol, p); bad < p)
        throw RankDeficiencyError("fit_coxph: information matrix is singular at covariate '" + x.label(bad) + "'");
    model.covariance.assign(p * p, 0.0);
    for (std::size_t j = 0; j < p; ++j) {
        std::vector<double> e(p, 0.0);
        e[j] = 1.0;
        auto col = detail::cholesky_solve(chol, p, e);
        for (std::size_t i = 0; i < p; ++i) model.covariance[i * p + j] = col[i];
    }
    model.coefficients = beta;
    model.log_likelihood = cox_log_partial_likelihood(x, records, beta);
    return model;
}

inline double normal_two_sided_p(double z) {
    if (std::isnan(z)) return 1.0;
    return std::erfc(std::abs(z) / std::sqrt(2.0));
}

inline HazardRow hazard_row(std::string name, double beta, double se) {
    if (!(se >= 0)) throw NumericError("hazard_row: standard error must be non-negative");
    HazardRow row;
    row.name = std::move(name);
    row.hr = std::exp(beta);
    row.ci_low = std::exp(beta - 1.96 * se);
    row.ci_high = std::exp(beta + 1.96 * se);
    row.p = (se == 0 && beta == 0) ? 1.0 : normal_two_sided_p(beta / se);
    return row;
}

inline std::vector<HazardRow> hazard_table(const CoxModel& model, const std::vector<std::string>& labels = {}) {
    if (!model.converged) throw ValidationError("hazard_table: model did not converge; refusing to report");
    std::vector<HazardRow> rows;
    for (std::size_t j = 0; j < model.coefficients.size(); ++j) {
        std::string name = j < labels.size()         ? labels[j]
                           : j < model.labels.size() ? model.labels[j]
                                                     : "x" + std::to_string(j);
        rows.push_back(hazard_row(std::move(name), model.coefficients[j], model.std_error(j)));
    }
    return rows;
}

inline std::string format_fixed(double v, int digits = 2) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", digits, v);
    return buf;
}

inline std::string format_p(double p) { return p < 0.005 ? "<0.005" : format_fixed(p); }

/// "HR  low–high  p" with two decimals, as printed in published hazard tables.
inline std::string format_hazard_cells(const HazardRow& r) {
    return format_fixed(r.hr) + "  " + format_fixed(r.ci_low) + "–" + format_fixed(r.ci_high) + "  " +
           format_p(r.p);
}

struct HazardSection {
    std::string title;  // "Multivariate" / "Univariate"
    std::vector<HazardRow> rows;
};

inline void write_hazard_text(std::ostream& os, const std::vector<HazardSection>& sections) {
    for (const auto& s : sections) {
        os << s.title << '\n';
        char line[256];
        std::snprintf(line, sizeof line, "  %-16s %-14s %6s  %-13s %s\n", "Parameter", "#Patients/Group", "HR",
                      "95% CI", "p");
        os << line;
        for (const auto& r : s.rows) {
            const std::string ci = format_fixed(r.ci_low) + "–" + format_fixed(r.ci_high);
            std::snprintf(line, sizeof line, "  %-16s %-14s %6s  %-15s %s\n", r.name.c_str(), r.n_per_group.c_str(),
                          format_fixed(r.hr).c_str(), ci.c_str(), format_p(r.p).c_str());
            os << line;
        }
    }
}

/// CSV columns: analysis, parameter, n_per_group, hr, ci_low, ci_high, p (full precision).
inline void write_hazard_csv(std::ostream& os, const std::vector<HazardSection>& sections) {
    os << "analysis,parameter,n_per_group,hr,ci_low,ci_high,p\n";
    char buf[512];
    for (const auto& s : sections)
        for (const auto& r : s.rows) {
            std::snprintf(buf, sizeof buf, "%s,%s,%s,%.17g,%.17g,%.17g,%.17g\n", s.title.c_str(), r.name.c_str(),
                          r.n_per_group.c_str(), r.hr, r.ci_low, r.ci_high, r.p);
            os << buf;
        }
}

}  // namespace biofusion
