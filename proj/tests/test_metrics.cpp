#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <sstream>
#include <vector>

#include "biofusion/metrics.hpp"
#include "biofusion/synthetic.hpp"
#include "oracles.hpp"

using namespace biofusion;

namespace {

std::vector<SurvivalRecord> make_records(std::vector<double> t, std::vector<int> e) {
    std::vector<SurvivalRecord> r(t.size());
    for (std::size_t i = 0; i < t.size(); ++i) r[i] = {t[i], e[i], 1.0};
    return r;
}

// Log-rank statistic summed directly over the pooled distinct event times.
double log_rank_chi2_direct(const std::vector<SurvivalRecord>& a, const std::vector<SurvivalRecord>& b) {
    std::vector<double> times;
    for (const auto* g : {&a, &b})
        for (const auto& r : *g)
            if (r.event) times.push_back(r.time);
    std::sort(times.begin(), times.end());
    times.erase(std::unique(times.begin(), times.end()), times.end());
    double o_minus_e = 0, v = 0;
    for (double t : times) {
        double na = 0, nb = 0, da = 0, db = 0;
        for (const auto& r : a) {
            na += r.time >= t;
            da += r.time == t && r.event;
        }
        for (const auto& r : b) {
            nb += r.time >= t;
            db += r.time == t && r.event;
        }
        const double n = na + nb, d = da + db;
        o_minus_e += da - d * na / n;
        if (n > 1) v += d * na * nb * (n - d) / (n * n * (n - 1));
    }
    return o_minus_e * o_minus_e / v;
}

std::vector<SurvivalRecord> exponential_group(std::size_t n, double hazard, Rng& rng) {
    std::vector<SurvivalRecord> g(n);
    for (auto& r : g) {
        const double t = -std::log(rng.uniform_open_low()) / hazard;
        const double c = -std::log(rng.uniform_open_low()) / 0.05;
        r = {std::min(t, c), t <= c ? 1 : 0, 1.0};
    }
    return g;
}

class WarningCounter {
public:
    WarningCounter() : guard_([this](std::string_view m) { messages.emplace_back(m); }) {}
    std::vector<std::string> messages;

private:
    ScopedWarningHandler guard_;
};

}  // namespace

TEST(ConcordanceIndex, PerfectAndAntiRanking) {
    const auto rec = make_records({1, 2, 3}, {1, 1, 1});
    EXPECT_EQ(concordance_index(std::vector<double>{3, 2, 1}, rec), 1.0);
    EXPECT_EQ(concordance_index(std::vector<double>{1, 2, 3}, rec), 0.0);
}

TEST(ConcordanceIndex, MixedCensoringExample) {
    const auto rec = make_records({2, 4, 5, 7}, {1, 0, 1, 1});
    const std::vector<double> risk{0.9, 0.3, 0.8, 0.1};
    EXPECT_EQ(concordance_index(risk, rec), oracle::cindex_pairs(risk, rec));
    EXPECT_EQ(concordance_index(risk, rec), 1.0);
}

TEST(ConcordanceIndex, MatchesPairEnumerationOnRandomInstances) {
    Rng rng(41);
    int checked = 0;
    while (checked < 200) {
        const std::size_t n = 2 + rng.below(49);
        const auto rec = oracle::random_records(n, rng.uniform(0.1, 0.9), rng, 15);
        auto risk = oracle::random_risks(n, rng);
        if (checked % 3 == 0)
            for (auto& v : risk) v = std::round(v * 2);  // forces prediction ties
        if (oracle::cindex_pairs(risk, rec) != oracle::cindex_pairs(risk, rec)) {
            EXPECT_THROW(concordance_index(risk, rec), UndefinedError);
            continue;
        }
        EXPECT_NEAR(concordance_index(risk, rec), oracle::cindex_pairs(risk, rec), 1e-15);
        ++checked;
    }
}

TEST(ConcordanceIndex, InvariantUnderIncreasingTransforms) {
    Rng rng(42);
    for (int trial = 0; trial < 30; ++trial) {
        const auto rec = oracle::random_records(30, 0.5, rng, 20);
        const auto risk = oracle::random_risks(30, rng);
        std::vector<double> affine(risk.size()), cubed(risk.size());
        for (std::size_t i = 0; i < risk.size(); ++i) {
            affine[i] = 2.5 * risk[i] - 7.0;
            cubed[i] = risk[i] * risk[i] * risk[i];
        }
        const double c = concordance_index(risk, rec);
        EXPECT_EQ(concordance_index(affine, rec), c);
        EXPECT_EQ(concordance_index(cubed, rec), c);
    }
}

TEST(ConcordanceIndex, NegatedRisksAreComplementary) {
    Rng rng(43);
    for (int trial = 0; trial < 30; ++trial) {
        const auto rec = oracle::random_records(25, 0.6, rng, 12);
        const auto risk = oracle::random_risks(25, rng);
        std::vector<double> neg(risk.size());
        for (std::size_t i = 0; i < risk.size(); ++i) neg[i] = -risk[i];
        EXPECT_NEAR(concordance_index(risk, rec) + concordance_index(neg, rec), 1.0, 1e-14);
    }
}

TEST(ConcordanceIndex, TiePolicies) {
    const auto rec = make_records({1, 2, 3}, {1, 1, 1});
    const std::vector<double> flat{1, 1, 1};
    EXPECT_EQ(concordance_index(flat, rec, TiePolicy::strict), 0.0);
    EXPECT_EQ(concordance_index(flat, rec, TiePolicy::half_credit), 0.5);
}

TEST(ConcordanceIndex, Errors) {
    EXPECT_THROW(concordance_index(std::vector<double>{1, 2}, make_records({1, 2}, {0, 0})), UndefinedError);
    EXPECT_THROW(concordance_index(std::vector<double>{1}, make_records({1, 2}, {1, 0})), ShapeError);
}

TEST(KaplanMeier, NoEventsIsFlat) {
    const auto c = kaplan_meier(make_records({1, 2, 3, 4}, {0, 0, 0, 0}));
    EXPECT_TRUE(c.event_times.empty());
    EXPECT_EQ(c.at(0.0), 1.0);
    EXPECT_EQ(c.at(100.0), 1.0);
}

TEST(KaplanMeier, HandExamples) {
    const auto c = kaplan_meier(make_records({1, 2, 3, 4}, {1, 1, 0, 1}));
    EXPECT_EQ(c.event_times, (std::vector<double>{1, 2, 4}));
    EXPECT_DOUBLE_EQ(c.survival[0], 0.75);
    EXPECT_DOUBLE_EQ(c.survival[1], 0.5);
    EXPECT_EQ(c.survival[2], 0.0);
    EXPECT_EQ(c.at_risk, (std::vector<int>{4, 3, 1}));
    EXPECT_DOUBLE_EQ(c.at(3.5), 0.5);

    const auto t = kaplan_meier(make_records({1, 1, 2}, {1, 1, 1}));
    EXPECT_DOUBLE_EQ(t.survival[0], 1.0 / 3.0);
    EXPECT_EQ(t.n_events[0], 2);
    EXPECT_EQ(t.survival[1], 0.0);
}

TEST(KaplanMeier, MatchesProductLimitOracle) {
    Rng rng(44);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t n = 1 + rng.below(40);
        const auto rec = oracle::random_records(n, rng.uniform(0.2, 0.9), rng, 12, false);
        const auto c = kaplan_meier(rec);
        for (std::size_t k = 0; k < c.event_times.size(); ++k) {
            EXPECT_NEAR(c.survival[k], oracle::km_product_limit(rec, c.event_times[k]), 1e-12);
            if (k > 0) {
                EXPECT_LE(c.survival[k], c.survival[k - 1]);
                EXPECT_LT(c.at_risk[k], c.at_risk[k - 1]);
            }
        }
        for (double t = 0.5; t < 13; t += 1.0) EXPECT_NEAR(c.at(t), oracle::km_product_limit(rec, t), 1e-12);
    }
}

TEST(KaplanMeier, CsvWriter) {
    std::vector<std::pair<std::string, KMCurve>> groups{
        {"high", kaplan_meier(make_records({1, 2, 3, 4}, {1, 1, 0, 1}))},
        {"low", kaplan_meier(make_records({5, 6}, {0, 0}))}};
    std::ostringstream os;
    write_km_csv(os, groups);
    EXPECT_EQ(os.str(),
              "group,time,survival,at_risk,n_events\n"
              "high,0,1,4,0\n"
              "high,1,0.75,4,1\n"
              "high,2,0.5,3,1\n"
              "high,4,0,1,1\n"
              "low,0,1,2,0\n");
}

TEST(LogRank, IdenticalGroups) {
    const auto g = make_records({1, 3, 4, 7, 9}, {1, 0, 1, 1, 0});
    const auto r = log_rank(g, g);
    EXPECT_NEAR(r.chi2, 0.0, 1e-15);
    EXPECT_NEAR(r.p, 1.0, 1e-12);
    EXPECT_EQ(r.df, 1);
}

TEST(LogRank, SingleEventOneVersusOne) {
    const auto r = log_rank(make_records({1}, {1}), make_records({2}, {0}));
    EXPECT_NEAR(r.chi2, 1.0, 1e-15);
    EXPECT_NEAR(r.p, std::erfc(std::sqrt(0.5)), 1e-15);
}

TEST(LogRank, MatchesDirectSummationAndIsSymmetric) {
    Rng rng(45);
    for (int trial = 0; trial < 50; ++trial) {
        const auto a = oracle::random_records(1 + rng.below(30), 0.5, rng, 10);
        const auto b = oracle::random_records(1 + rng.below(30), 0.5, rng, 10);
        const auto ab = log_rank(a, b), ba = log_rank(b, a);
        EXPECT_NEAR(ab.chi2, log_rank_chi2_direct(a, b), 1e-10 * std::max(1.0, ab.chi2));
        EXPECT_NEAR(ab.chi2, ba.chi2, 1e-12);
        EXPECT_GE(ab.p, 0.0);
        EXPECT_LE(ab.p, 1.0);
    }
}

TEST(LogRank, DetectsHazardRatioThree) {
    Rng rng(46);
    const auto a = exponential_group(100, 0.3, rng), b = exponential_group(100, 0.1, rng);
    const auto r = log_rank(a, b);
    EXPECT_NEAR(r.chi2, log_rank_chi2_direct(a, b), 1e-9);
    EXPECT_LT(r.p, 0.01);
}

TEST(LogRank, Errors) {
    EXPECT_THROW(log_rank(make_records({1}, {0}), make_records({2}, {0})), UndefinedError);
    EXPECT_THROW(log_rank(make_records({1}, {1}), {}), ValidationError);
}

TEST(IpcwWeights, NoCensoringGivesUnitWeights) {
    const auto w = censoring_weights_ipcw(make_records({1, 2, 3, 5}, {1, 1, 1, 1}));
    for (double v : w) EXPECT_EQ(v, 1.0);
}

TEST(IpcwWeights, HandComputedSixPatientCohort) {
    // Censoring KM: a drop to 4/5 at t=2 and to 4/5 * 2/3 at t=4.
    const auto w = censoring_weights_ipcw(make_records({1, 2, 3, 4, 5, 6}, {1, 0, 1, 0, 1, 1}));
    const std::vector<double> expected{1, 1, 1.25, 1.25, 15.0 / 8.0, 15.0 / 8.0};
    for (std::size_t i = 0; i < 6; ++i) EXPECT_NEAR(w[i], expected[i], 1e-15);
}

TEST(IpcwWeights, AllCensoredStillComputable) {
    const auto w = censoring_weights_ipcw(make_records({1, 2, 3}, {0, 0, 0}));
    EXPECT_EQ(w.size(), 3u);
    EXPECT_EQ(w[0], 1.0);
    EXPECT_NEAR(w[1], 1.5, 1e-15);
    EXPECT_NEAR(w[2], 3.0, 1e-15);
}

TEST(IpcwWeights, CapBindsWithWarning) {
    WarningCounter warnings;
    const auto rec = make_records({1, 2, 3}, {0, 0, 1});
    EXPECT_NEAR(censoring_weights_ipcw(rec)[2], 3.0, 1e-15);
    EXPECT_TRUE(warnings.messages.empty());
    const auto w = censoring_weights_ipcw(rec, 2.0);
    EXPECT_EQ(w[2], 2.0);
    EXPECT_NEAR(w[1], 1.5, 1e-15);
    EXPECT_EQ(warnings.messages.size(), 1u);
}

TEST(TimeDependentAuc, PerfectSeparationIsOne) {
    const auto rec = make_records({10, 20, 70, 80, 130, 140}, {1, 1, 1, 0, 1, 0});
    AucOptions opts;
    opts.weighting = AucWeighting::uniform;
    const auto res = time_dependent_auc(std::vector<double>{6, 5, 4, 3, 2, 1}, rec, opts);
    ASSERT_EQ(res.auc_at.size(), 2u);
    EXPECT_EQ(*res.auc_at[0], 1.0);
    EXPECT_EQ(*res.auc_at[1], 1.0);
    EXPECT_EQ(res.mean_auc, 1.0);
}

TEST(TimeDependentAuc, ConstantRisksScoreOneUnderNonStrictComparison) {
    const auto rec = make_records({10, 20, 70, 80, 130, 140}, {1, 1, 1, 0, 1, 0});
    const std::vector<double> flat(6, 0.3);
    EXPECT_EQ(time_dependent_auc(flat, rec).mean_auc, 1.0);
    AucOptions strict;
    strict.strict = true;
    EXPECT_EQ(time_dependent_auc(flat, rec, strict).mean_auc, 0.0);
}

TEST(TimeDependentAuc, UniformWeightsMatchDoubleSum) {
    Rng rng(47);
    int checked = 0;
    for (int trial = 0; trial < 100 && checked < 60; ++trial) {
        const std::size_t n = trial == 0 ? 12 : 4 + rng.below(27);
        auto rec = oracle::random_records(n, 0.6, rng, 0);
        for (auto& r : rec) r.time = rng.uniform(1, 180);
        const auto risk = oracle::random_risks(n, rng);
        std::vector<double> delta(n);
        for (std::size_t i = 0; i < n; ++i) delta[i] = rec[i].event;
        AucOptions opts;
        opts.weighting = AucWeighting::uniform;
        WarningCounter quiet;
        AucResult res;
        try {
            res = time_dependent_auc(risk, rec, opts);
        } catch (const UndefinedError&) {
            continue;
        }
        double sum = 0;
        int valid = 0;
        for (std::size_t h = 0; h < 2; ++h) {
            const double t = opts.horizons[h];
            const double o = oracle::auc_double_sum(risk, rec, delta, t);
            if (!res.auc_at[h]) {
                EXPECT_TRUE(std::isnan(o));
                continue;
            }
            EXPECT_NEAR(*res.auc_at[h], o, 1e-12);
            sum += o;
            ++valid;
        }
        EXPECT_NEAR(res.mean_auc, sum / valid, 1e-12);
        ++checked;
    }
    EXPECT_GE(checked, 60);
}

TEST(TimeDependentAuc, IpcwWeightsEnterTheDoubleSum) {
    Rng rng(48);
    auto rec = oracle::random_records(30, 0.5, rng, 0);
    for (auto& r : rec) r.time = rng.uniform(1, 180);
    const auto risk = oracle::random_risks(30, rng);
    const auto res = time_dependent_auc(risk, rec);
    auto omega = censoring_weights_ipcw(rec);
    for (std::size_t i = 0; i < rec.size(); ++i) omega[i] *= rec[i].event;
    EXPECT_EQ(res.weights_used, omega);
    for (std::size_t h = 0; h < 2; ++h)
        if (res.auc_at[h]) {
            EXPECT_NEAR(*res.auc_at[h], oracle::auc_double_sum(risk, rec, omega, res.horizons[h]), 1e-12);
        }
}

TEST(TimeDependentAuc, UndefinedHorizonIsExcludedWithWarning) {
    WarningCounter warnings;
    const auto rec = make_records({10, 20, 70, 80}, {1, 1, 1, 0});
    const auto res = time_dependent_auc(std::vector<double>{4, 3, 2, 1}, rec);
    EXPECT_TRUE(res.auc_at[0].has_value());
    EXPECT_FALSE(res.auc_at[1].has_value());
    EXPECT_EQ(res.mean_auc, *res.auc_at[0]);
    EXPECT_EQ(warnings.messages.size(), 1u);
    EXPECT_THROW(time_dependent_auc(std::vector<double>{1, 2}, make_records({200, 300}, {1, 1})), UndefinedError);
}

TEST(RiskGroups, ThresholdExamples) {
    const auto g = risk_groups(std::vector<double>{1, 2, 3, 4}, 2.5);
    EXPECT_EQ(g, (std::vector<RiskGroup>{RiskGroup::low, RiskGroup::low, RiskGroup::high, RiskGroup::high}));
    for (auto x : risk_groups(std::vector<double>{1, 2}, 10.0)) EXPECT_EQ(x, RiskGroup::low);
    EXPECT_EQ(risk_groups(std::vector<double>{2.5}, 2.5)[0], RiskGroup::low);
    EXPECT_THROW(risk_groups(std::vector<double>{1}, std::nan("")), ValidationError);
    EXPECT_STREQ(to_string(RiskGroup::high), "high");
}

TEST(RiskGroups, MedianThreshold) {
    EXPECT_EQ(median_threshold(std::vector<double>{3, 1, 2}), 2.0);
    EXPECT_EQ(median_threshold(std::vector<double>{4, 1, 3, 2}), 2.5);
    EXPECT_THROW(median_threshold(std::vector<double>{}), ValidationError);
}

TEST(RiskGroups, TrueHazardSplitSeparatesSyntheticCohort) {
    SyntheticSpec spec;
    spec.n_patients = 120;
    spec.patches = 2;
    spec.seed = 7;
    const auto cohort = synthesize_cohort(spec);
    const auto records = records_of(cohort.bundles);
    std::vector<double> train_risk(cohort.true_log_hazard.begin(), cohort.true_log_hazard.begin() + 80);
    const double theta = median_threshold(train_risk);
    std::vector<SurvivalRecord> high, low;
    const auto g = risk_groups(std::span<const double>(cohort.true_log_hazard).subspan(80), theta);
    for (std::size_t i = 0; i < g.size(); ++i) (g[i] == RiskGroup::high ? high : low).push_back(records[80 + i]);
    EXPECT_LT(log_rank(high, low).p, 0.05);
}
