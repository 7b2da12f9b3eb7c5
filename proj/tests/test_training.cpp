#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "biofusion/synthetic.hpp"
#include "biofusion/training.hpp"

using namespace biofusion;

namespace {

FusionConfig small_config() {
    FusionConfig c;
    c.feat_dim_per_extractor = 8;
    c.n_extractors = 3;
    c.latent_dim = 8;
    c.vae_hidden = 16;
    c.patches_per_patient = 8;
    c.gene_dim = 8;
    c.d_model = 8;
    c.n_image_tokens = 2;
    c.n_gene_tokens = 2;
    c.n_heads = 2;
    c.n_encoder_layers = 1;
    c.ffn_hidden = 16;
    c.fc_dims = {8, 8, 4, 4};
    return c;
}

SyntheticCohort small_cohort(const FusionConfig& cfg, std::size_t n, std::uint64_t seed, double censoring = 0.5) {
    SyntheticSpec spec;
    spec.n_patients = n;
    spec.patches = cfg.patches_per_patient;
    spec.feat_dim = cfg.concat_dim();
    spec.gene_dim = cfg.gene_dim;
    spec.censoring_fraction = censoring;
    spec.seed = seed;
    return synthesize_cohort(spec);
}

std::vector<PatientBundle> slice(const std::vector<PatientBundle>& v, std::size_t begin, std::size_t end) {
    return {v.begin() + long(begin), v.begin() + long(end)};
}

Tensor leaf(std::vector<double> v) {
    const std::size_t n = v.size();
    return Tensor(Shape{n}, std::move(v), true);
}

// Loss sum(c * p) has gradient c with respect to p.
void linear_backward(Tensor& p, const std::vector<double>& c) {
    backward(sum(mul(p, Tensor(Shape{c.size()}, c))));
}

struct AdamOracle {
    std::vector<double> p, m, v;
    int t = 0;
    void step(const std::vector<double>& g, double lr, double wd = 0, double b1 = 0.9, double b2 = 0.999,
              double eps = 1e-8) {
        ++t;
        for (std::size_t i = 0; i < p.size(); ++i) {
            p[i] *= 1 - lr * wd;
            m[i] = b1 * m[i] + (1 - b1) * g[i];
            v[i] = b2 * v[i] + (1 - b2) * g[i] * g[i];
            const double mh = m[i] / (1 - std::pow(b1, t));
            const double vh = v[i] / (1 - std::pow(b2, t));
            p[i] -= lr * mh / (std::sqrt(vh) + eps);
        }
    }
};

}  // namespace

TEST(Adam, FirstStepIsSignTimesLearningRate) {
    auto p = leaf({1.0, -2.0, 0.5});
    std::vector<Tensor> params{p};
    AdamState<double> st;
    linear_backward(p, {0.5, -3.0, 0.0});
    adam_step(std::span(params), st, AdamOptions{0.1, 0.9, 0.999, 1e-8, 0});
    EXPECT_NEAR(p[0], 1.0 - 0.1 * 0.5 / (0.5 + 1e-8), 1e-15);
    EXPECT_NEAR(p[1], -2.0 + 0.1 * 3.0 / (3.0 + 1e-8), 1e-15);
    EXPECT_EQ(p[2], 0.5);
}

TEST(Adam, MatchesRecurrenceOverSeveralSteps) {
    auto p = leaf({0.3, -0.7});
    std::vector<Tensor> params{p};
    AdamState<double> st;
    AdamOracle o{{0.3, -0.7}, {0, 0}, {0, 0}};
    const std::vector<std::vector<double>> grads{{1.0, -0.2}, {0.4, 0.9}, {-2.0, 0.1}, {0.0, 0.0}, {0.3, -0.3}};
    for (const auto& g : grads) {
        linear_backward(p, g);
        adam_step(std::span(params), st, AdamOptions{0.01, 0.9, 0.999, 1e-8, 0});
        zero_grads(std::span(params));
        o.step(g, 0.01);
        EXPECT_NEAR(p[0], o.p[0], 1e-14);
        EXPECT_NEAR(p[1], o.p[1], 1e-14);
    }
    EXPECT_EQ(st.t, 5);
}

TEST(Adam, TensorWithoutGradientStaysPut) {
    auto p = leaf({1.5, 2.5});
    std::vector<Tensor> params{p};
    AdamState<double> st;
    adam_step(std::span(params), st, AdamOptions{0.1, 0.9, 0.999, 1e-8, 0});
    EXPECT_EQ(p[0], 1.5);
    EXPECT_EQ(p[1], 2.5);
}

TEST(AdamW, DecoupledDecayMatchesRecurrence) {
    auto p = leaf({0.8, -1.1});
    std::vector<Tensor> params{p};
    AdamState<double> st;
    AdamOracle o{{0.8, -1.1}, {0, 0}, {0, 0}};
    for (int k = 0; k < 4; ++k) {
        const std::vector<double> g{0.2 * (k + 1), -0.5 + 0.1 * k};
        linear_backward(p, g);
        adamw_step(std::span(params), st, AdamOptions{1e-2, 0.9, 0.999, 1e-8, 0.1});
        zero_grads(std::span(params));
        o.step(g, 1e-2, 0.1);
        EXPECT_NEAR(p[0], o.p[0], 1e-14);
        EXPECT_NEAR(p[1], o.p[1], 1e-14);
    }
}

TEST(AdamW, ZeroDecayEqualsAdam) {
    auto a = leaf({0.1, 0.2, 0.3});
    auto b = leaf({0.1, 0.2, 0.3});
    std::vector<Tensor> pa{a}, pb{b};
    AdamState<double> sa, sb;
    for (int k = 0; k < 6; ++k) {
        const std::vector<double> g{std::sin(k), std::cos(k), 0.1 * k};
        linear_backward(a, g);
        linear_backward(b, g);
        adam_step(std::span(pa), sa, AdamOptions{1e-3, 0.9, 0.999, 1e-8, 0});
        adamw_step(std::span(pb), sb, AdamOptions{1e-3, 0.9, 0.999, 1e-8, 0});
        zero_grads(std::span(pa));
        zero_grads(std::span(pb));
    }
    for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(a[i], b[i], 1e-15);
}

TEST(AdamW, ZeroGradientOnlyShrinks) {
    auto p = leaf({2.0, -4.0});
    std::vector<Tensor> params{p};
    AdamState<double> st;
    adamw_step(std::span(params), st, AdamOptions{1e-2, 0.9, 0.999, 1e-8, 0.5});
    EXPECT_DOUBLE_EQ(p[0], 2.0 * (1 - 1e-2 * 0.5));
    EXPECT_DOUBLE_EQ(p[1], -4.0 * (1 - 1e-2 * 0.5));
}

TEST(DeriveSeed, DeterministicAndDistinct) {
    EXPECT_EQ(derive_seed(1, 2), derive_seed(1, 2));
    std::vector<std::uint64_t> seen;
    for (std::uint64_t s = 0; s < 4; ++s)
        for (std::uint64_t tag = 0; tag < 12; ++tag) seen.push_back(derive_seed(s, tag));
    std::sort(seen.begin(), seen.end());
    EXPECT_EQ(std::adjacent_find(seen.begin(), seen.end()), seen.end());
}

TEST(EventStratifiedBatches, EveryBatchHasEnoughEvents) {
    Rng data_rng(3);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t n = 20 + data_rng.below(100);
        std::vector<SurvivalRecord> rec(n);
        std::size_t n_events = 0;
        for (auto& r : rec) {
            r.time = data_rng.uniform(1, 100);
            r.event = data_rng.uniform() < 0.25 ? 1 : 0;
            n_events += r.event;
        }
        if (n_events < 2) continue;
        Rng rng(trial);
        const auto batches = event_stratified_batches(rec, 12, 2, rng);
        const std::size_t expected = std::max<std::size_t>(1, std::min((n + 11) / 12, n_events / 2));
        EXPECT_EQ(batches.size(), expected);
        std::vector<int> hits(n, 0);
        for (const auto& b : batches) {
            std::size_t e = 0;
            for (auto i : b) {
                ++hits[i];
                e += rec[i].event;
            }
            EXPECT_GE(e, 2u);
        }
        for (int h : hits) EXPECT_EQ(h, 1);
    }
    std::vector<SurvivalRecord> none{{1, 0, 1}, {2, 0, 1}};
    Rng rng(1);
    EXPECT_THROW(event_stratified_batches(none, 12, 2, rng), UndefinedError);
}

TEST(Stage1, ValidationLossImproves) {
    const auto cfg = small_config();
    const auto cohort = small_cohort(cfg, 50, 11);
    const auto train = slice(cohort.bundles, 0, 40), val = slice(cohort.bundles, 40, 50);
    Stage1Config s1;
    s1.max_epochs = 20;
    const auto r = train_stage1<double>(train, val, cfg, s1, 5);
    ASSERT_EQ(r.val_loss.size(), 20u);
    EXPECT_LT(r.val_loss.back(), r.initial_val_loss);
    EXPECT_GE(r.best_epoch, 1u);
    std::vector<Tensor> val_x;
    for (const auto& b : val) val_x.push_back(to_tensor<double>(b.patches));
    EXPECT_DOUBLE_EQ(vae_eval_loss<double>(val_x, r.vae, cfg.vae_beta),
                     *std::min_element(r.val_loss.begin(), r.val_loss.end()));
}

TEST(Stage1, ReconstructionOnlyDecreasesEveryEpoch) {
    auto cfg = small_config();
    cfg.vae_beta = 0;
    const auto cohort = small_cohort(cfg, 50, 12);
    const auto train = slice(cohort.bundles, 0, 40), val = slice(cohort.bundles, 40, 50);
    Stage1Config s1;
    s1.max_epochs = 10;
    const auto r = train_stage1<double>(train, val, cfg, s1, 6);
    double prev = r.initial_val_loss;
    for (double v : r.val_loss) {
        EXPECT_LT(v, prev);
        prev = v;
    }
    EXPECT_EQ(r.best_epoch, 10u);
}

TEST(Stage1, FixedBatchAndNoiseDescendMonotonically) {
    const auto cfg = small_config();
    const auto cohort = small_cohort(cfg, 4, 13);
    std::vector<Tensor> parts;
    for (const auto& b : cohort.bundles) parts.push_back(to_tensor<double>(b.patches));
    const auto x = concat_rows(parts);
    Rng rng(14);
    auto vae = VaeParams<double>::init(cfg, rng);
    const auto eps = standard_normal_like<double>(x.rows(), cfg.latent_dim, rng);
    auto params = trainable(vae);
    AdamState<double> st;
    const AdamOptions opts{1e-4, 0.9, 0.999, 1e-8, 1e-2};
    double prev = vae_train_step(x, eps, vae, std::span(params), st, opts, cfg.vae_beta);
    for (int it = 1; it < 20; ++it) {
        const double cur = vae_train_step(x, eps, vae, std::span(params), st, opts, cfg.vae_beta);
        EXPECT_LT(cur, prev) << "iteration " << it;
        prev = cur;
    }
}

TEST(Stage1, SeededRunsAreBitIdentical) {
    const auto cfg = small_config();
    const auto cohort = small_cohort(cfg, 20, 15);
    const auto train = slice(cohort.bundles, 0, 15), val = slice(cohort.bundles, 15, 20);
    Stage1Config s1;
    s1.max_epochs = 3;
    auto a = train_stage1<double>(train, val, cfg, s1, 9);
    auto b = train_stage1<double>(train, val, cfg, s1, 9);
    EXPECT_EQ(a.val_loss, b.val_loss);
    EXPECT_EQ(encode_checkpoint(to_checkpoint(a.vae, "vae", cfg)), encode_checkpoint(to_checkpoint(b.vae, "vae", cfg)));
    const auto c = train_stage1<double>(train, val, cfg, s1, 10);
    EXPECT_NE(a.train_loss, c.train_loss);
}

TEST(Stage1, DivergenceNamesTheEpoch) {
    const auto cfg = small_config();
    auto cohort = small_cohort(cfg, 6, 16);
    cohort.bundles[0].patches.values[0] = 1e30f;
    const auto train = slice(cohort.bundles, 0, 4), val = slice(cohort.bundles, 4, 6);
    Stage1Config s1;
    s1.max_epochs = 2;
    s1.batch_size = 4;
    try {
        train_stage1<double>(train, val, cfg, s1, 1);
        FAIL() << "expected NumericError";
    } catch (const NumericError& e) {
        EXPECT_NE(std::string(e.what()).find("epoch 1"), std::string::npos) << e.what();
    }
}

class Stage2Fixture : public ::testing::Test {
protected:
    void SetUp() override {
        cfg = small_config();
        cohort = small_cohort(cfg, 60, 21);
        train = slice(cohort.bundles, 0, 45);
        val = slice(cohort.bundles, 45, 60);
        Rng rng(22);
        vae = VaeParams<double>::init(cfg, rng);
    }
    FusionConfig cfg;
    SyntheticCohort cohort;
    std::vector<PatientBundle> train, val;
    VaeParams<double> vae;
};

TEST_F(Stage2Fixture, ZeroLearningRateStopsAfterPatience) {
    Stage2Config s2;
    s2.lr = 0;
    const auto r = train_stage2<double>(train, val, vae, cfg, s2, 3);
    EXPECT_EQ(r.best_epoch, 1u);
    EXPECT_EQ(r.epochs_run, 11u);
    ASSERT_EQ(r.val_loss.size(), 11u);
    for (double v : r.val_loss) EXPECT_EQ(v, r.val_loss.front());
}

TEST_F(Stage2Fixture, UnitEventWeightEqualsUnweighted) {
    Stage2Config a, b;
    a.max_epochs = b.max_epochs = 6;
    a.loss = LossWeighting::weighted;
    a.w_event = 1.0;
    b.loss = LossWeighting::unweighted;
    const auto ra = train_stage2<double>(train, val, vae, cfg, a, 4);
    const auto rb = train_stage2<double>(train, val, vae, cfg, b, 4);
    EXPECT_EQ(ra.train_loss, rb.train_loss);
    EXPECT_EQ(ra.val_loss, rb.val_loss);
    EXPECT_EQ(predict_risks<double>(val, vae, ra.model, cfg), predict_risks<double>(val, vae, rb.model, cfg));
}

TEST_F(Stage2Fixture, ReturnsBestEpochWeights) {
    Stage2Config s2;
    s2.max_epochs = 25;
    s2.patience = 5;
    const auto r = train_stage2<double>(train, val, vae, cfg, s2, 5);
    const double best = *std::min_element(r.val_loss.begin(), r.val_loss.end());
    EXPECT_EQ(r.val_loss[r.best_epoch - 1], best);
    const auto risks = predict_risks<double>(val, vae, r.model, cfg);
    EXPECT_NEAR(weighted_cox_loss(risks, loss_records(val, s2), s2.risk_sets), best, 1e-12);
    EXPECT_LE(r.epochs_run, r.best_epoch + s2.patience);
    EXPECT_EQ(r.resampled_batches, 0u);
}

TEST_F(Stage2Fixture, ValidationWithoutEventsMonitorsTrainingLoss) {
    for (auto& b : val) b.record.event = 0;
    std::vector<std::string> warnings;
    ScopedWarningHandler capture([&](std::string_view m) { warnings.emplace_back(m); });
    Stage2Config s2;
    s2.max_epochs = 3;
    const auto r = train_stage2<double>(train, val, vae, cfg, s2, 6);
    ASSERT_FALSE(warnings.empty());
    EXPECT_NE(warnings.front().find("no events"), std::string::npos);
    const auto risks = predict_risks<double>(train, vae, r.model, cfg);
    EXPECT_NEAR(weighted_cox_loss(risks, loss_records(train, s2), s2.risk_sets),
                *std::min_element(r.val_loss.begin(), r.val_loss.end()), 1e-12);
}

TEST_F(Stage2Fixture, SeedDeterminesTrajectory) {
    Stage2Config s2;
    s2.max_epochs = 4;
    auto a = train_stage2<double>(train, val, vae, cfg, s2, 8);
    auto b = train_stage2<double>(train, val, vae, cfg, s2, 8);
    EXPECT_EQ(a.train_loss, b.train_loss);
    EXPECT_EQ(encode_checkpoint(to_checkpoint(a.model, "model", cfg)),
              encode_checkpoint(to_checkpoint(b.model, "model", cfg)));
}

TEST(EvaluateFold, PerfectRisksAndMedianSplit) {
    std::vector<SurvivalRecord> rec;
    std::vector<double> risk;
    for (int i = 0; i < 10; ++i) {
        rec.push_back({double(10 * (i + 1)), i % 2 == 0 ? 1 : 0, 1});
        risk.push_back(-double(i));
    }
    const std::vector<double> train_risks{-9, -7, -5, -3, -1, 0};
    const auto r = evaluate_fold(train_risks, risk, rec);
    EXPECT_EQ(r.c_index, 1.0);
    EXPECT_EQ(r.theta_opt, -4.0);
    EXPECT_EQ(r.n_high, 4u);
    EXPECT_EQ(r.n_low, 6u);
    EXPECT_EQ(r.n_val_events, 5u);
    ASSERT_TRUE(r.log_rank.has_value());
    ASSERT_TRUE(r.km_high.has_value());
    EXPECT_EQ(r.km_high->n_subjects, 4);
}

TEST(EvaluateFold, UndefinedMetricsBecomeWarnings) {
    const std::vector<SurvivalRecord> rec{{5, 0, 1}, {7, 0, 1}, {9, 0, 1}};
    const std::vector<double> risk{0.1, 0.2, 0.3};
    const auto r = evaluate_fold(risk, risk, rec);
    EXPECT_TRUE(std::isnan(r.c_index));
    EXPECT_FALSE(r.log_rank.has_value());
    EXPECT_GE(r.warnings.size(), 2u);
    const auto j = to_json(r);
    EXPECT_TRUE(j.at("c_index").is_null());
    EXPECT_TRUE(j.at("log_rank").is_null());
}

TEST(EvalReport, AggregateIsMeanOfFolds) {
    EvalReport rep;
    const std::vector<double> c{0.71, 0.64, 0.80, 0.69, 0.77};
    for (std::size_t i = 0; i < c.size(); ++i) {
        FoldReport f;
        f.fold = int(i + 1);
        f.c_index = c[i];
        f.auc.horizons = {60, 120};
        f.auc.auc_at = {0.6 + 0.01 * double(i), std::nullopt};
        f.auc.mean_auc = 0.6 + 0.01 * double(i);
        rep.folds.push_back(f);
    }
    double mean = 0;
    for (double v : c) mean += v;
    mean /= 5;
    double ss = 0;
    for (double v : c) ss += (v - mean) * (v - mean);
    EXPECT_NEAR(rep.c_index().mean, mean, 1e-12);
    EXPECT_NEAR(rep.c_index().std, std::sqrt(ss / 4), 1e-12);
    const auto j = to_json(rep);
    EXPECT_NEAR(j["aggregate"]["c_index"]["mean"].get<double>(), mean, 1e-12);
    EXPECT_NEAR(j["aggregate"]["auc_60"]["mean"].get<double>(), 0.62, 1e-12);
    EXPECT_TRUE(j["aggregate"]["auc_120"]["mean"].is_null());
    EXPECT_EQ(j["aggregate"]["auc_120"]["n"].get<int>(), 0);
    EXPECT_EQ(j["folds"].size(), 5u);
}

TEST(ComputeProperties, FlopsAndSizes) {
    {
        FlopCounter counter;
        NoGradGuard g;
        (void)matmul(Tensor::zeros({7, 5}), Tensor::zeros({5, 3}));
        EXPECT_EQ(counter.count(), 2u * 7 * 5 * 3);
    }
    const auto cfg = small_config();
    const auto cohort = small_cohort(cfg, 3, 31);
    Rng rng(32);
    auto vae = VaeParams<double>::init(cfg, rng);
    auto model = ModelParams<double>::init(cfg, rng);
    const auto p = compute_properties(vae, model, cfg, cohort.bundles[0]);
    std::size_t n = 0;
    for (auto& t : trainable(vae)) n += t.numel();
    for (auto& t : trainable(model)) n += t.numel();
    EXPECT_EQ(p.parameter_count, n);
    EXPECT_EQ(p.checkpoint_bytes, encode_checkpoint(to_checkpoint(vae, "vae", cfg)).size() +
                                      encode_checkpoint(to_checkpoint(model, "model", cfg)).size());
    // The VAE encoder alone costs two P x in x hidden-shaped matmuls.
    EXPECT_GT(p.flops_estimate, 2u * cfg.patches_per_patient * cfg.concat_dim() * cfg.vae_hidden);
}

TEST(TrainConfig, JsonRoundTripAndValidation) {
    TrainConfig tc;
    tc.stage1.max_epochs = 7;
    tc.stage2.loss = LossWeighting::unweighted;
    tc.stage2.risk_sets = CoxMode::verbatim_alg1;
    tc.seed = 42;
    tc.precision = "float32";
    const nlohmann::json j = tc;
    const auto back = j.get<TrainConfig>();
    EXPECT_EQ(nlohmann::json(back), j);
    EXPECT_EQ(j["stage2"]["loss_mode"], "verbatim_alg1");

    const auto rc = run_config_from_json(nlohmann::json::parse(R"({"train": {"stage2": {"patience": 3}}})"));
    EXPECT_EQ(rc.train.stage2.patience, 3u);
    EXPECT_EQ(rc.train.stage1.max_epochs, 30u);
    EXPECT_THROW(run_config_from_json(nlohmann::json::parse(R"({"train": {"precision": "float16"}})")), ValidationError);
    EXPECT_THROW(run_config_from_json(nlohmann::json::parse(R"({"train": {"stage2": {"loss": "focal"}}})")),
                 ValidationError);
    EXPECT_THROW(run_config_from_json(nlohmann::json::parse(R"({"fusion": {"d_model": 10, "n_heads": 4}})")),
                 ValidationError);
    EXPECT_THROW(run_config_from_json(nlohmann::json::parse(R"({"train": {"stage2": {"patience": "x"}}})")),
                 ValidationError);
}

TEST(CrossValidate, FoldsGetTheirOwnThresholdsAndPairedVariants) {
    const auto cfg = small_config();
    const auto cohort = small_cohort(cfg, 60, 41);
    const auto folds = make_folds(records_of(cohort.bundles), 3, 1);
    TrainConfig tc;
    tc.stage1.max_epochs = 2;
    tc.stage2.max_epochs = 4;
    const std::vector<Variant> variants{{"full", true, true, LossWeighting::weighted},
                                        {"image_only", false, false, LossWeighting::weighted}};
    const auto reps = cross_validate<double>(cohort.bundles, folds, cfg, tc, variants);
    ASSERT_EQ(reps.size(), 2u);
    ASSERT_EQ(reps[0].folds.size(), 3u);
    EXPECT_FALSE(reps[0].folds[0].theta_opt == reps[0].folds[1].theta_opt &&
                 reps[0].folds[1].theta_opt == reps[0].folds[2].theta_opt);
    for (std::size_t f = 0; f < 3; ++f) {
        EXPECT_EQ(reps[0].folds[f].stage1_best_epoch, reps[1].folds[f].stage1_best_epoch);
        EXPECT_EQ(reps[0].folds[f].n_val, folds[f].val.size());
        EXPECT_EQ(reps[0].folds[f].val_ids.size(), folds[f].val.size());
    }
    EXPECT_FALSE(reps[1].fusion.use_genes);
    EXPECT_LT(reps[1].properties.flops_estimate, reps[0].properties.flops_estimate);
    const auto again = cross_validate<double>(cohort.bundles, folds, cfg, tc, variants);
    EXPECT_EQ(to_json(reps[0]).dump(), to_json(again[0]).dump());
}
