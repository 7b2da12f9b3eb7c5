#pragma once

// Two-stage training (VAE pretraining, then the fusion network under the
// weighted Cox loss), fold-wise evaluation and cross-validation reports.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "biofusion/checkpoint.hpp"
#include "biofusion/data.hpp"
#include "biofusion/errors.hpp"
#include "biofusion/fusion.hpp"
#include "biofusion/metrics.hpp"
#include "biofusion/optim.hpp"
#include "biofusion/rng.hpp"
#include "biofusion/survival.hpp"
#include "biofusion/tensor.hpp"
#include "json.hpp"

namespace biofusion {

enum class LossWeighting { weighted, unweighted };

inline const char* to_string(LossWeighting w) { return w == LossWeighting::weighted ? "weighted" : "unweighted"; }

inline LossWeighting loss_weighting_from_string(const std::string& s) {
    if (s == "weighted") return LossWeighting::weighted;
    if (s == "unweighted") return LossWeighting::unweighted;
    throw ValidationError("unknown loss '" + s + "' (expected weighted or unweighted)");
}

struct Stage1Config {
    double lr = 1e-4;
    std::size_t batch_size = 12;
    std::size_t max_epochs = 30;
    double weight_decay = 1e-2;
};

struct Stage2Config {
    double lr = 1e-3;
    std::size_t batch_size = 12;
    std::size_t patience = 10;
    std::size_t max_epochs = 100;
    double w_event = 3.0;
    LossWeighting loss = LossWeighting::weighted;
    CoxMode risk_sets = CoxMode::time_sorted;
    std::size_t min_events_per_batch = 2;
};

struct TrainConfig {
    Stage1Config stage1;
    Stage2Config stage2;
    std::uint64_t seed = 1;
    std::string precision = "float64";

    void validate() const {
        if (!(stage1.lr > 0) || !(stage2.lr >= 0)) throw ValidationError("train config: stage1 lr must be > 0 and stage2 lr >= 0");
        if (stage1.batch_size < 1 || stage2.batch_size < 1) throw ValidationError("train config: batch size must be >= 1");
        if (stage2.patience < 1) throw ValidationError("train config: patience must be >= 1");
        if (stage1.max_epochs < 1 || stage2.max_epochs < 1) throw ValidationError("train config: max_epochs must be >= 1");
        if (!(stage2.w_event > 0)) throw ValidationError("train config: w_event must be positive");
        if (!(stage1.weight_decay >= 0)) throw ValidationError("train config: weight decay must be >= 0");
        if (precision != "float64" && precision != "float32")
            throw ValidationError("train config: precision must be float32 or float64, got '" + precision + "'");
    }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
    j = nlohmann::json{{"stage1",
                        {{"optimizer", "adamw"},
                         {"lr", c.stage1.lr},
                         {"batch_size", c.stage1.batch_size},
                         {"max_epochs", c.stage1.max_epochs},
                         {"weight_decay", c.stage1.weight_decay}}},
                       {"stage2",
                        {{"optimizer", "adam"},
                         {"lr", c.stage2.lr},
                         {"batch_size", c.stage2.batch_size},
                         {"patience", c.stage2.patience},
                         {"max_epochs", c.stage2.max_epochs},
                         {"w_event", c.stage2.w_event},
                         {"loss", to_string(c.stage2.loss)},
                         {"loss_mode", to_string(c.stage2.risk_sets)},
                         {"min_events_per_batch", c.stage2.min_events_per_batch}}},
                       {"seed", c.seed},
                       {"precision", c.precision}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
    auto get = [](const nlohmann::json& obj, const char* key, auto& field) {
        if (obj.contains(key)) obj.at(key).get_to(field);
    };
    if (j.contains("stage1")) {
        const auto& s = j.at("stage1");
        get(s, "lr", c.stage1.lr);
        get(s, "batch_size", c.stage1.batch_size);
        get(s, "max_epochs", c.stage1.max_epochs);
        get(s, "weight_decay", c.stage1.weight_decay);
    }
    if (j.contains("stage2")) {
        const auto& s = j.at("stage2");
        get(s, "lr", c.stage2.lr);
        get(s, "batch_size", c.stage2.batch_size);
        get(s, "patience", c.stage2.patience);
        get(s, "max_epochs", c.stage2.max_epochs);
        get(s, "w_event", c.stage2.w_event);
        get(s, "min_events_per_batch", c.stage2.min_events_per_batch);
        if (s.contains("loss")) c.stage2.loss = loss_weighting_from_string(s.at("loss").get<std::string>());
        if (s.contains("loss_mode")) c.stage2.risk_sets = cox_mode_from_string(s.at("loss_mode").get<std::string>());
    }
    get(j, "seed", c.seed);
    get(j, "precision", c.precision);
}

/// Contents of a --config file: {"fusion": {...}, "train": {...}}.
struct RunConfig {
    FusionConfig fusion;
    TrainConfig train;
};

inline RunConfig run_config_from_json(const nlohmann::json& j) {
    RunConfig rc;
    try {
        if (j.contains("fusion")) rc.fusion = j.at("fusion").get<FusionConfig>();
        if (j.contains("train")) rc.train = j.at("train").get<TrainConfig>();
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("config: ") + e.what());
    }
    rc.fusion.validate();
    rc.train.validate();
    return rc;
}

inline nlohmann::json to_json(const RunConfig& rc) { return {{"fusion", rc.fusion}, {"train", rc.train}}; }

/// splitmix64 of (seed, tag): independent streams for folds and stages.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t tag) {
    std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (tag + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

template <typename T>
std::vector<T> gather(std::span<const T> items, std::span<const std::size_t> idx) {
    std::vector<T> out;
    out.reserve(idx.size());
    for (auto i : idx) out.push_back(items[i]);
    return out;
}

// ---------------------------------------------------------------------------
// Stage 1

template <typename Real>
struct Stage1Result {
    VaeParams<Real> vae;
    double initial_val_loss = 0;
    std::vector<double> train_loss;  // mean minibatch loss per epoch
    std::vector<double> val_loss;    // per epoch, z = mu
    std::size_t best_epoch = 0;      // 0 when no epoch improved on the initial weights
};

/// Loss with z = mu (no sampling), averaged over patients.
template <typename Real>
double vae_eval_loss(std::span<const BasicTensor<Real>> patches, const VaeParams<Real>& vae, double beta) {
    if (patches.empty()) throw ValidationError("vae_eval_loss: no patients");
    NoGradGuard no_grad;
    double total = 0;
    for (const auto& x : patches) {
        const auto enc = vae_encode(x, vae);
        total += double(vae_loss(x, vae_decode(enc.mu, vae), enc.mu, enc.sigma, beta).item());
    }
    return total / double(patches.size());
}

/// One optimiser step on a stacked batch of patch rows with a given noise draw.
template <typename Real>
double vae_train_step(const BasicTensor<Real>& x, const BasicTensor<Real>& eps, VaeParams<Real>& vae,
                      std::span<BasicTensor<Real>> params, AdamState<Real>& state, const AdamOptions& opts,
                      double beta) {
    const auto enc = vae_encode(x, vae);
    const auto z = reparameterize(enc.mu, enc.sigma, eps);
    const auto loss = vae_loss(x, vae_decode(z, vae), enc.mu, enc.sigma, beta);
    backward(loss);
    adamw_step(params, state, opts);
    zero_grads(params);
    return double(loss.item());
}

template <typename Real>
BasicTensor<Real> standard_normal_like(std::size_t rows, std::size_t cols, Rng& rng) {
    std::vector<Real> v(rows * cols);
    for (auto& x : v) x = static_cast<Real>(rng.normal());
    return BasicTensor<Real>(Shape{rows, cols}, std::move(v));
}

/// Trains the VAE on every patch of the training patients with AdamW and keeps
/// the weights with the lowest validation loss (the training set stands in
/// when `val` is empty).
template <typename Real>
Stage1Result<Real> train_stage1(std::span<const PatientBundle> train, std::span<const PatientBundle> val,
                                const FusionConfig& cfg, const Stage1Config& s1, std::uint64_t seed) {
    if (train.empty()) throw ValidationError("train_stage1: empty training set");
    cfg.validate();
    Rng rng(seed);
    auto init_rng = rng.fork();
    auto shuffle_rng = rng.fork();
    auto noise_rng = rng.fork();

    std::vector<BasicTensor<Real>> train_x, val_x;
    for (const auto& b : train) {
        if (b.patches.cols != cfg.concat_dim())
            throw ShapeError("patient '" + b.id + "': patch width " + std::to_string(b.patches.cols) + " != " +
                             std::to_string(cfg.concat_dim()));
        train_x.push_back(to_tensor<Real>(b.patches));
    }
    for (const auto& b : val) val_x.push_back(to_tensor<Real>(b.patches));
    const auto& monitor = val_x.empty() ? train_x : val_x;

    Stage1Result<Real> res;
    res.vae = VaeParams<Real>::init(cfg, init_rng);
    auto params = trainable(res.vae);
    AdamState<Real> state;
    const AdamOptions opts{s1.lr, 0.9, 0.999, 1e-8, s1.weight_decay};

    res.initial_val_loss = vae_eval_loss<Real>(monitor, res.vae, cfg.vae_beta);
    double best = res.initial_val_loss;
    auto best_vae = clone_params(res.vae);

    std::vector<std::size_t> order(train_x.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    for (std::size_t epoch = 1; epoch <= s1.max_epochs; ++epoch) {
        shuffle_rng.shuffle(order);
        double epoch_loss = 0;
        std::size_t steps = 0;
        for (std::size_t start = 0; start < order.size(); start += s1.batch_size) {
            const std::size_t end = std::min(order.size(), start + s1.batch_size);
            std::vector<BasicTensor<Real>> parts;
            for (std::size_t k = start; k < end; ++k) parts.push_back(train_x[order[k]]);
            const auto x = parts.size() == 1 ? parts.front() : concat_rows(parts);
            const auto eps = standard_normal_like<Real>(x.rows(), cfg.latent_dim, noise_rng);
            try {
                epoch_loss += vae_train_step(x, eps, res.vae, std::span(params), state, opts, cfg.vae_beta);
            } catch (const NumericError& e) {
                throw NumericError("stage 1 diverged at epoch " + std::to_string(epoch) + ", step " +
                                   std::to_string(steps + 1) + ": " + e.what());
            }
            ++steps;
        }
        res.train_loss.push_back(epoch_loss / double(steps));
        const double v = vae_eval_loss<Real>(monitor, res.vae, cfg.vae_beta);
        res.val_loss.push_back(v);
        if (v < best) {
            best = v;
            res.best_epoch = epoch;
            best_vae = clone_params(res.vae);
        }
    }
    res.vae = std::move(best_vae);
    return res;
}

// ---------------------------------------------------------------------------
// Stage 2

/// Splits patients into B = min(ceil(n / batch_size), floor(n_events / min_events))
/// batches, dealing shuffled events round-robin first and censored patients
/// after, so every batch receives at least `min_events` events.
inline std::vector<std::vector<std::size_t>> event_stratified_batches(std::span<const SurvivalRecord> records,
                                                                      std::size_t batch_size,
                                                                      std::size_t min_events, Rng& rng) {
    std::vector<std::size_t> events, censored;
    for (std::size_t i = 0; i < records.size(); ++i) (records[i].event ? events : censored).push_back(i);
    if (events.empty()) throw UndefinedError("stage 2: training set has no events");
    min_events = std::max<std::size_t>(1, min_events);
    std::size_t b = (records.size() + batch_size - 1) / batch_size;
    b = std::max<std::size_t>(1, std::min(b, events.size() / min_events));
    rng.shuffle(events);
    rng.shuffle(censored);
    std::vector<std::vector<std::size_t>> batches(b);
    std::size_t slot = 0;
    for (auto i : events) batches[slot++ % b].push_back(i);
    for (auto i : censored) batches[slot++ % b].push_back(i);
    rng.shuffle(batches);
    return batches;
}

template <typename Real>
std::vector<BasicTensor<Real>> encode_latents(std::span<const PatientBundle> bundles, const VaeParams<Real>& vae,
                                              const FusionConfig& cfg) {
    NoGradGuard no_grad;
    std::vector<BasicTensor<Real>> out;
    out.reserve(bundles.size());
    for (const auto& b : bundles) out.push_back(patient_latent(b, vae, cfg));
    return out;
}

template <typename Real>
std::vector<double> predict_risks(std::span<const BasicTensor<Real>> latents, std::span<const PatientBundle> bundles,
                                  const ModelParams<Real>& model, const FusionConfig& cfg) {
    NoGradGuard no_grad;
    std::vector<double> r(bundles.size());
    for (std::size_t i = 0; i < bundles.size(); ++i)
        r[i] = double(forward_from_latent(latents[i], bundles[i].genes, bundles[i].clinical, model, cfg).item());
    return r;
}

template <typename Real>
std::vector<double> predict_risks(std::span<const PatientBundle> bundles, const VaeParams<Real>& vae,
                                  const ModelParams<Real>& model, const FusionConfig& cfg) {
    const auto latents = encode_latents(bundles, vae, cfg);
    return predict_risks<Real>(latents, bundles, model, cfg);
}

inline std::vector<SurvivalRecord> loss_records(std::span<const PatientBundle> bundles, const Stage2Config& s2) {
    const auto r = records_of(bundles);
    return s2.loss == LossWeighting::weighted ? with_event_weights(r, s2.w_event) : with_event_weights(r, 1.0);
}

template <typename Real>
struct Stage2Result {
    ModelParams<Real> model;
    std::vector<double> train_loss;
    std::vector<double> val_loss;
    std::size_t best_epoch = 0;
    std::size_t epochs_run = 0;
    std::size_t resampled_batches = 0;
};

/// Trains the fusion network on frozen-VAE latents (z = mu) with Adam and
/// early stopping: training halts once `patience` epochs pass without a new
/// best validation loss, and the best epoch's weights are returned.
template <typename Real>
Stage2Result<Real> train_stage2(std::span<const PatientBundle> train, std::span<const PatientBundle> val,
                                const VaeParams<Real>& vae, const FusionConfig& cfg, const Stage2Config& s2,
                                std::uint64_t seed) {
    if (train.empty()) throw ValidationError("train_stage2: empty training set");
    cfg.validate();
    Rng rng(seed);
    auto init_rng = rng.fork();
    auto batch_rng = rng.fork();

    const auto train_lat = encode_latents(train, vae, cfg);
    const auto val_lat = encode_latents(val, vae, cfg);
    const auto train_rec = loss_records(train, s2);
    const auto val_rec = loss_records(val, s2);
    bool val_has_events = false;
    for (const auto& r : val_rec) val_has_events = val_has_events || r.event;
    if (!val_has_events) warn("stage 2: validation set has no events; early stopping monitors the training loss");

    Stage2Result<Real> res;
    res.model = ModelParams<Real>::init(cfg, init_rng);
    if (cfg.standardize_genes) fit_gene_standardizer(res.model, train, cfg);
    auto params = trainable(res.model);
    AdamState<Real> state;
    const AdamOptions opts{s2.lr, 0.9, 0.999, 1e-8, 0.0};

    double best = std::numeric_limits<double>::infinity();
    auto best_model = clone_params(res.model);
    for (std::size_t epoch = 1; epoch <= s2.max_epochs; ++epoch) {
        auto batches = event_stratified_batches(train_rec, s2.batch_size, s2.min_events_per_batch, batch_rng);
        double epoch_loss = 0;
        std::size_t step = 0;
        for (const auto& batch : batches) {
            ++step;
            std::vector<SurvivalRecord> rec;
            int n_events = 0;
            for (auto i : batch) {
                rec.push_back(train_rec[i]);
                n_events += train_rec[i].event;
            }
            if (n_events == 0) {
                ++res.resampled_batches;
                warn("stage 2: skipped a batch with no events");
                continue;
            }
            try {
                std::vector<BasicTensor<Real>> risks;
                for (auto i : batch)
                    risks.push_back(forward_from_latent(train_lat[i], train[i].genes, train[i].clinical, res.model, cfg));
                const auto loss = cox_loss(concat_rows(risks), rec, s2.risk_sets);
                backward(loss);
                adam_step(std::span(params), state, opts);
                zero_grads(std::span(params));
                epoch_loss += double(loss.item());
            } catch (const NumericError& e) {
                throw NumericError("stage 2 diverged at epoch " + std::to_string(epoch) + ", step " +
                                   std::to_string(step) + ": " + e.what());
            }
        }
        res.train_loss.push_back(epoch_loss / double(batches.size()));

        double monitored;
        if (val_has_events) {
            const auto r = predict_risks<Real>(val_lat, val, res.model, cfg);
            monitored = weighted_cox_loss(r, val_rec, s2.risk_sets);
        } else {
            const auto r = predict_risks<Real>(train_lat, train, res.model, cfg);
            monitored = weighted_cox_loss(r, train_rec, s2.risk_sets);
        }
        res.val_loss.push_back(monitored);
        res.epochs_run = epoch;
        if (monitored < best) {
            best = monitored;
            res.best_epoch = epoch;
            best_model = clone_params(res.model);
        }
        if (epoch - res.best_epoch >= s2.patience) break;
    }
    res.model = std::move(best_model);
    return res;
}

// ---------------------------------------------------------------------------
// Evaluation

struct FoldReport {
    int fold = 1;
    std::size_t n_train = 0;
    std::size_t n_val = 0;
    std::size_t n_val_events = 0;
    double c_index = std::numeric_limits<double>::quiet_NaN();
    AucResult auc;
    double theta_opt = 0;
    std::size_t n_high = 0;
    std::size_t n_low = 0;
    std::optional<KMCurve> km_high;
    std::optional<KMCurve> km_low;
    std::optional<LogRankResult> log_rank;
    std::size_t stage1_best_epoch = 0;
    std::size_t stage2_best_epoch = 0;
    std::size_t stage2_epochs = 0;
    std::vector<std::string> warnings;
    std::vector<std::string> val_ids;
    std::vector<double> val_risks;
    std::vector<double> train_risks;
};

/// Metrics on one validation fold. Undefined quantities are left empty and
/// recorded in `warnings` instead of raising.
inline FoldReport evaluate_fold(std::span<const double> train_risks, std::span<const double> val_risks,
                                std::span<const SurvivalRecord> val_records, const AucOptions& auc_opts = {}) {
    FoldReport r;
    ScopedWarningHandler capture([&](std::string_view msg) { r.warnings.emplace_back(msg); });
    r.n_train = train_risks.size();
    r.n_val = val_risks.size();
    for (const auto& rec : val_records) r.n_val_events += rec.event;
    r.train_risks.assign(train_risks.begin(), train_risks.end());
    r.val_risks.assign(val_risks.begin(), val_risks.end());
    try {
        r.c_index = concordance_index(val_risks, val_records);
    } catch (const UndefinedError& e) {
        warn(std::string("c_index undefined: ") + e.what());
    }
    try {
        r.auc = time_dependent_auc(val_risks, val_records, auc_opts);
    } catch (const UndefinedError& e) {
        r.auc.horizons = auc_opts.horizons;
        r.auc.auc_at.assign(auc_opts.horizons.size(), std::nullopt);
        warn(std::string("auc undefined: ") + e.what());
    }
    r.theta_opt = median_threshold(train_risks);
    const auto groups = risk_groups(val_risks, r.theta_opt);
    std::vector<SurvivalRecord> high, low;
    for (std::size_t i = 0; i < groups.size(); ++i)
        (groups[i] == RiskGroup::high ? high : low).push_back(val_records[i]);
    r.n_high = high.size();
    r.n_low = low.size();
    if (!high.empty()) r.km_high = kaplan_meier(high);
    if (!low.empty()) r.km_low = kaplan_meier(low);
    if (high.empty() || low.empty()) {
        warn("log_rank undefined: one risk group is empty");
    } else {
        try {
            r.log_rank = log_rank(high, low);
        } catch (const UndefinedError& e) {
            warn(std::string("log_rank undefined: ") + e.what());
        }
    }
    return r;
}

struct ComputeProperties {
    std::size_t parameter_count = 0;    // trainable parameters, VAE and fusion network
    std::size_t checkpoint_bytes = 0;   // both checkpoint files as written
    std::uint64_t flops_estimate = 0;   // 2*m*k*n summed over the matmuls of one patient's forward pass
};

template <typename Real>
ComputeProperties compute_properties(VaeParams<Real>& vae, ModelParams<Real>& model, const FusionConfig& cfg,
                                     const PatientBundle& sample) {
    ComputeProperties p;
    p.parameter_count = parameter_count(vae) + parameter_count(model);
    p.checkpoint_bytes = encode_checkpoint(to_checkpoint(vae, "vae", cfg)).size() +
                         encode_checkpoint(to_checkpoint(model, "model", cfg)).size();
    NoGradGuard no_grad;
    FlopCounter counter;
    (void)forward(sample, vae, model, cfg);
    p.flops_estimate = counter.count();
    return p;
}

struct MeanStd {
    double mean = std::numeric_limits<double>::quiet_NaN();
    double std = std::numeric_limits<double>::quiet_NaN();
    std::size_t n = 0;
};

/// Mean and sample standard deviation over the finite entries.
inline MeanStd mean_std(std::span<const double> values) {
    MeanStd m;
    double s = 0;
    for (double v : values)
        if (std::isfinite(v)) {
            s += v;
            ++m.n;
        }
    if (m.n == 0) return m;
    m.mean = s / double(m.n);
    double ss = 0;
    for (double v : values)
        if (std::isfinite(v)) ss += (v - m.mean) * (v - m.mean);
    m.std = m.n > 1 ? std::sqrt(ss / double(m.n - 1)) : 0.0;
    return m;
}

struct EvalReport {
    std::string label = "full";
    FusionConfig fusion;
    TrainConfig train;
    std::vector<FoldReport> folds;
    ComputeProperties properties;

    std::vector<double> fold_values(double FoldReport::*field) const {
        std::vector<double> v;
        for (const auto& f : folds) v.push_back(f.*field);
        return v;
    }
    std::vector<double> auc_values(std::optional<std::size_t> horizon) const {
        std::vector<double> v;
        for (const auto& f : folds) {
            if (!horizon) {
                v.push_back(f.auc.mean_auc);
            } else {
                const auto& a = f.auc.auc_at;
                v.push_back(*horizon < a.size() && a[*horizon] ? *a[*horizon] : std::numeric_limits<double>::quiet_NaN());
            }
        }
        return v;
    }
    MeanStd c_index() const { return mean_std(fold_values(&FoldReport::c_index)); }
    MeanStd mean_auc() const { return mean_std(auc_values(std::nullopt)); }
};

inline nlohmann::json km_json(const KMCurve& c) {
    return {{"time", c.event_times}, {"survival", c.survival}, {"at_risk", c.at_risk}, {"events", c.n_events}};
}

inline nlohmann::json optional_number(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(); }

inline nlohmann::json to_json(const FoldReport& f) {
    nlohmann::json auc = nlohmann::json::object();
    for (std::size_t h = 0; h < f.auc.horizons.size(); ++h) {
        char key[32];
        std::snprintf(key, sizeof key, "%g", f.auc.horizons[h]);
        auc[key] = h < f.auc.auc_at.size() && f.auc.auc_at[h] ? nlohmann::json(*f.auc.auc_at[h]) : nlohmann::json();
    }
    nlohmann::json j{{"fold", f.fold},
                     {"n_train", f.n_train},
                     {"n_val", f.n_val},
                     {"n_val_events", f.n_val_events},
                     {"c_index", optional_number(f.c_index)},
                     {"auc_at_horizons", auc},
                     {"mean_auc", optional_number(f.auc.mean_auc)},
                     {"theta_opt", f.theta_opt},
                     {"group_sizes", {{"high", f.n_high}, {"low", f.n_low}}},
                     {"stage1_best_epoch", f.stage1_best_epoch},
                     {"stage2_best_epoch", f.stage2_best_epoch},
                     {"stage2_epochs", f.stage2_epochs},
                     {"warnings", f.warnings}};
    j["log_rank"] = f.log_rank ? nlohmann::json{{"chi2", f.log_rank->chi2}, {"p", f.log_rank->p}, {"df", f.log_rank->df}}
                               : nlohmann::json();
    j["km_high"] = f.km_high ? km_json(*f.km_high) : nlohmann::json();
    j["km_low"] = f.km_low ? km_json(*f.km_low) : nlohmann::json();
    return j;
}

inline nlohmann::json to_json(const MeanStd& m) {
    return {{"mean", optional_number(m.mean)}, {"std", optional_number(m.std)}, {"n", m.n}};
}

inline nlohmann::json to_json(const EvalReport& r) {
    nlohmann::json folds = nlohmann::json::array();
    for (const auto& f : r.folds) folds.push_back(to_json(f));
    nlohmann::json aggregate{{"c_index", to_json(r.c_index())}, {"mean_auc", to_json(r.mean_auc())}};
    if (!r.folds.empty()) {
        const auto& horizons = r.folds.front().auc.horizons;
        for (std::size_t h = 0; h < horizons.size(); ++h) {
            char key[48];
            std::snprintf(key, sizeof key, "auc_%g", horizons[h]);
            aggregate[key] = to_json(mean_std(r.auc_values(h)));
        }
    }
    return {{"label", r.label},
            {"fusion", r.fusion},
            {"train", r.train},
            {"folds", folds},
            {"aggregate", aggregate},
            {"computational_properties",
             {{"parameter_count", r.properties.parameter_count},
              {"checkpoint_bytes", r.properties.checkpoint_bytes},
              {"flops_estimate", r.properties.flops_estimate}}}};
}

// ---------------------------------------------------------------------------
// Cross-validation

/// A stage-2 configuration evaluated against the same folds and stage-1 models.
struct Variant {
    std::string label = "full";
    bool use_genes = true;
    bool use_clinical = true;
    LossWeighting loss = LossWeighting::weighted;
};

/// Runs both stages per fold and evaluates every variant on the fold's
/// validation patients. Stage 1 is shared across variants; stage-2
/// initialisation and batching depend only on (seed, fold), so variants are
/// paired.
template <typename Real>
std::vector<EvalReport> cross_validate(std::span<const PatientBundle> cohort, std::span<const FoldSplit> folds,
                                       const FusionConfig& base_cfg, const TrainConfig& tc,
                                       std::span<const Variant> variants, const AucOptions& auc_opts = {}) {
    tc.validate();
    base_cfg.validate();
    if (variants.empty()) throw ValidationError("cross_validate: no variants");
    std::vector<EvalReport> reports(variants.size());
    for (std::size_t v = 0; v < variants.size(); ++v) {
        reports[v].label = variants[v].label;
        reports[v].fusion = base_cfg;
        reports[v].fusion.use_genes = variants[v].use_genes;
        reports[v].fusion.use_clinical = variants[v].use_clinical;
        reports[v].train = tc;
        reports[v].train.stage2.loss = variants[v].loss;
    }
    for (const auto& fold : folds) {
        const auto train = gather(cohort, std::span<const std::size_t>(fold.train));
        const auto val = gather(cohort, std::span<const std::size_t>(fold.val));
        const auto val_rec = records_of(val);
        auto s1 = train_stage1<Real>(train, val, base_cfg, tc.stage1, derive_seed(tc.seed, 2 * fold.fold));
        const auto train_lat = encode_latents<Real>(train, s1.vae, base_cfg);
        const auto val_lat = encode_latents<Real>(val, s1.vae, base_cfg);
        for (std::size_t v = 0; v < variants.size(); ++v) {
            const auto& cfg = reports[v].fusion;
            auto s2 = train_stage2<Real>(train, val, s1.vae, cfg, reports[v].train.stage2,
                                         derive_seed(tc.seed, 2 * fold.fold + 1));
            const auto tr = predict_risks<Real>(train_lat, train, s2.model, cfg);
            const auto vr = predict_risks<Real>(val_lat, val, s2.model, cfg);
            auto rep = evaluate_fold(tr, vr, val_rec, auc_opts);
            rep.fold = fold.fold;
            rep.stage1_best_epoch = s1.best_epoch;
            rep.stage2_best_epoch = s2.best_epoch;
            rep.stage2_epochs = s2.epochs_run;
            for (const auto& b : val) rep.val_ids.push_back(b.id);
            reports[v].folds.push_back(std::move(rep));
            if (reports[v].folds.size() == 1)
                reports[v].properties = compute_properties(s1.vae, s2.model, cfg, cohort.front());
        }
    }
    return reports;
}

}  // namespace biofusion
