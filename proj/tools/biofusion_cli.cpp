// Command-line front end: synthetic cohorts, the two training stages,
// evaluation, Kaplan-Meier / log-rank, CoxPH tables and gradient checks.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "biofusion/biofusion.hpp"

namespace fs = std::filesystem;
using namespace biofusion;

namespace {

struct DataArgs {
    std::string data;
    std::string config;
    std::string folds;
    int fold = 0;
    std::optional<std::uint64_t> seed;
};

RunConfig load_run_config(const DataArgs& a) {
    RunConfig rc;
    if (!a.config.empty()) rc = run_config_from_json(read_json(a.config));
    if (a.seed) rc.train.seed = *a.seed;
    return rc;
}

std::vector<PatientBundle> load_cohort(const std::string& dir, const FusionConfig& cfg, std::uint64_t seed) {
    auto cohort = read_cohort_dir(dir, static_cast<std::uint32_t>(cfg.patches_per_patient), seed);
    if (cohort.empty()) throw ValidationError(dir + ": cohort has no patients");
    const auto& first = cohort.front();
    if (first.patches.cols != cfg.concat_dim())
        throw ShapeError(dir + ": patch width " + std::to_string(first.patches.cols) + " does not match the config (" +
                         std::to_string(cfg.concat_dim()) + ")");
    if (first.genes.size() != cfg.gene_dim)
        throw ShapeError(dir + ": " + std::to_string(first.genes.size()) + " genes, config expects " +
                         std::to_string(cfg.gene_dim));
    return cohort;
}

std::vector<std::string> ids_of(std::span<const PatientBundle> cohort) {
    std::vector<std::string> ids;
    for (const auto& b : cohort) ids.push_back(b.id);
    return ids;
}

struct Split {
    int fold = 0;
    std::vector<PatientBundle> train, val;
};

/// Without a folds file every patient trains and nothing is held out.
Split select_split(const std::vector<PatientBundle>& cohort, const std::string& folds_path, int fold) {
    Split s;
    if (folds_path.empty()) {
        s.train = cohort;
        return s;
    }
    const auto ids = ids_of(cohort);
    const auto folds = folds_from_json(read_json(folds_path), ids);
    if (fold == 0) fold = 1;
    for (const auto& f : folds)
        if (f.fold == fold) {
            s.fold = fold;
            s.train = gather<PatientBundle>(cohort, f.train);
            s.val = gather<PatientBundle>(cohort, f.val);
            return s;
        }
    throw ValidationError(folds_path + ": no fold " + std::to_string(fold));
}

void check_vae_matches(const FusionConfig& vae_cfg, const FusionConfig& cfg) {
    if (vae_cfg.concat_dim() != cfg.concat_dim() || vae_cfg.latent_dim != cfg.latent_dim ||
        vae_cfg.vae_hidden != cfg.vae_hidden)
        throw ValidationError("VAE checkpoint dimensions (input " + std::to_string(vae_cfg.concat_dim()) + ", latent " +
                              std::to_string(vae_cfg.latent_dim) + ") do not match the config");
}

// ---------------------------------------------------------------------------

int cmd_synth(const std::string& spec_path, const std::string& out, std::optional<std::uint64_t> seed) {
    SyntheticSpec spec;
    if (!spec_path.empty()) {
        try {
            spec = read_json(spec_path).get<SyntheticSpec>();
        } catch (const nlohmann::json::exception& e) {
            throw ValidationError(spec_path + ": " + e.what());
        }
    }
    if (seed) spec.seed = *seed;
    const auto cohort = synthesize_cohort(spec);
    write_cohort_dir(out, cohort.bundles, cohort.gene_names);
    std::ofstream truth(fs::path(out) / "truth.csv");
    truth << "patient_id,true_log_hazard\n";
    for (std::size_t i = 0; i < cohort.bundles.size(); ++i)
        truth << cohort.bundles[i].id << ',' << detail::format_double(cohort.true_log_hazard[i]) << '\n';
    nlohmann::json meta = spec;
    meta["realized_censoring"] = cohort.realized_censoring;
    write_json(fs::path(out) / "spec.json", meta);
    std::printf("wrote %zu patients to %s (censoring %.3f)\n", cohort.bundles.size(), out.c_str(),
                cohort.realized_censoring);
    return 0;
}

int cmd_folds(const std::string& data, int k, std::uint64_t seed, const std::string& out) {
    const auto clinical = read_clinical_csv(fs::path(data) / "clinical.csv");
    std::vector<SurvivalRecord> rec;
    std::vector<std::string> ids;
    for (const auto& c : clinical) {
        rec.push_back(c.record);
        ids.push_back(c.id);
    }
    const auto folds = make_folds(rec, k, seed);
    write_json(out, folds_to_json(folds, ids));
    for (const auto& f : folds) {
        std::size_t e = 0;
        for (auto i : f.val) e += rec[i].event;
        std::printf("fold %d: %zu train, %zu val (%zu events)\n", f.fold, f.train.size(), f.val.size(), e);
    }
    return 0;
}

template <typename Real>
int stage1_impl(const DataArgs& a, const std::string& out) {
    const auto rc = load_run_config(a);
    const auto cohort = load_cohort(a.data, rc.fusion, rc.train.seed);
    const auto split = select_split(cohort, a.folds, a.fold);
    auto res = train_stage1<Real>(split.train, split.val, rc.fusion, rc.train.stage1,
                                  derive_seed(rc.train.seed, 2 * std::uint64_t(split.fold)));
    std::printf("epoch 0  val %.6f\n", res.initial_val_loss);
    for (std::size_t e = 0; e < res.val_loss.size(); ++e)
        std::printf("epoch %zu  train %.6f  val %.6f\n", e + 1, res.train_loss[e], res.val_loss[e]);
    std::printf("best epoch %zu\n", res.best_epoch);
    save_checkpoint(out, to_checkpoint(res.vae, "vae", rc.fusion,
                                       {{"fold", split.fold},
                                        {"seed", rc.train.seed},
                                        {"best_epoch", res.best_epoch},
                                        {"initial_val_loss", res.initial_val_loss},
                                        {"train_loss", res.train_loss},
                                        {"val_loss", res.val_loss}}));
    return 0;
}

template <typename Real>
int stage2_impl(const DataArgs& a, const std::string& vae_path, const std::string& out,
                const std::optional<std::string>& loss, const std::optional<std::string>& loss_mode) {
    auto rc = load_run_config(a);
    if (loss) rc.train.stage2.loss = loss_weighting_from_string(*loss);
    if (loss_mode) rc.train.stage2.risk_sets = cox_mode_from_string(*loss_mode);
    auto [vae_cfg, vae] = vae_from_checkpoint<Real>(load_checkpoint(vae_path));
    check_vae_matches(vae_cfg, rc.fusion);
    const auto cohort = load_cohort(a.data, rc.fusion, rc.train.seed);
    const auto split = select_split(cohort, a.folds, a.fold);
    auto res = train_stage2<Real>(split.train, split.val, vae, rc.fusion, rc.train.stage2,
                                  derive_seed(rc.train.seed, 2 * std::uint64_t(split.fold) + 1));
    for (std::size_t e = 0; e < res.val_loss.size(); ++e)
        std::printf("epoch %zu  train %.6f  monitored %.6f\n", e + 1, res.train_loss[e], res.val_loss[e]);
    std::printf("best epoch %zu of %zu\n", res.best_epoch, res.epochs_run);
    save_checkpoint(out, to_checkpoint(res.model, "model", rc.fusion,
                                       {{"fold", split.fold},
                                        {"seed", rc.train.seed},
                                        {"train", rc.train},
                                        {"best_epoch", res.best_epoch},
                                        {"epochs_run", res.epochs_run},
                                        {"train_loss", res.train_loss},
                                        {"val_loss", res.val_loss}}));
    return 0;
}

void write_risks_csv(const std::string& path, const Split& s, std::span<const double> train_risks,
                     std::span<const double> val_risks) {
    std::ofstream os(path);
    if (!os) throw ValidationError("cannot write " + path);
    os << "patient_id,split,risk,time,event\n";
    auto rows = [&](const std::vector<PatientBundle>& b, std::span<const double> r, const char* name) {
        for (std::size_t i = 0; i < b.size(); ++i)
            os << b[i].id << ',' << name << ',' << detail::format_double(r[i]) << ','
               << detail::format_double(b[i].record.time) << ',' << b[i].record.event << '\n';
    };
    rows(s.train, train_risks, "train");
    rows(s.val, val_risks, "val");
}

template <typename Real>
int eval_impl(const DataArgs& a, const std::string& vae_path, const std::string& model_path, const std::string& report,
              std::string risks_path) {
    const auto rc = load_run_config(a);
    auto [vae_cfg, vae] = vae_from_checkpoint<Real>(load_checkpoint(vae_path));
    const auto model_ckpt = load_checkpoint(model_path);
    auto [cfg, model] = model_from_checkpoint<Real>(model_ckpt);
    check_vae_matches(vae_cfg, cfg);
    const auto cohort = load_cohort(a.data, cfg, rc.train.seed);
    const auto split = select_split(cohort, a.folds, a.fold);
    if (split.val.empty()) throw ValidationError("eval: the selected fold has no validation patients");
    const auto train_risks = predict_risks<Real>(split.train, vae, model, cfg);
    const auto val_risks = predict_risks<Real>(split.val, vae, model, cfg);
    EvalReport rep;
    rep.label = "eval";
    rep.fusion = cfg;
    rep.train = model_ckpt.extra.contains("train") ? model_ckpt.extra.at("train").get<TrainConfig>() : rc.train;
    auto fold = evaluate_fold(train_risks, val_risks, records_of(split.val));
    fold.fold = split.fold;
    if (model_ckpt.extra.contains("best_epoch")) fold.stage2_best_epoch = model_ckpt.extra.at("best_epoch");
    if (model_ckpt.extra.contains("epochs_run")) fold.stage2_epochs = model_ckpt.extra.at("epochs_run");
    for (const auto& b : split.val) fold.val_ids.push_back(b.id);
    for (const auto& w : fold.warnings) std::fprintf(stderr, "warning: %s\n", w.c_str());
    rep.folds.push_back(std::move(fold));
    rep.properties = compute_properties(vae, model, cfg, cohort.front());
    write_json(report, to_json(rep));
    if (risks_path.empty()) risks_path = (fs::path(report).parent_path() / "risks.csv").string();
    write_risks_csv(risks_path, split, train_risks, val_risks);
    const auto& f = rep.folds.front();
    std::printf("fold %d: C-index %s, mean AUC %s, theta %.6g, high %zu / low %zu\n", f.fold,
                std::isfinite(f.c_index) ? std::to_string(f.c_index).c_str() : "undefined",
                std::isfinite(f.auc.mean_auc) ? std::to_string(f.auc.mean_auc).c_str() : "undefined", f.theta_opt,
                f.n_high, f.n_low);
    return 0;
}

const std::map<std::string, Variant>& known_variants() {
    static const std::map<std::string, Variant> v{
        {"full", {"full", true, true, LossWeighting::weighted}},
        {"full_unweighted", {"full_unweighted", true, true, LossWeighting::unweighted}},
        {"image_only", {"image_only", false, false, LossWeighting::weighted}},
        {"image_gene", {"image_gene", true, false, LossWeighting::weighted}},
        {"image_clinical", {"image_clinical", false, true, LossWeighting::weighted}},
    };
    return v;
}

template <typename Real>
int cv_impl(const DataArgs& a, int k, const std::vector<std::string>& variant_names, const std::string& report) {
    const auto rc = load_run_config(a);
    const auto cohort = load_cohort(a.data, rc.fusion, rc.train.seed);
    std::vector<FoldSplit> folds = a.folds.empty() ? make_folds(records_of(cohort), k, rc.train.seed)
                                                   : folds_from_json(read_json(a.folds), ids_of(cohort));
    std::vector<Variant> variants;
    for (const auto& name : variant_names) {
        auto it = known_variants().find(name);
        if (it == known_variants().end()) throw ValidationError("unknown variant '" + name + "'");
        variants.push_back(it->second);
    }
    const auto reports = cross_validate<Real>(cohort, folds, rc.fusion, rc.train, variants);
    nlohmann::json out = nlohmann::json::array();
    for (const auto& r : reports) {
        out.push_back(to_json(r));
        const auto c = r.c_index();
        std::printf("%-16s C-index %.3f +- %.3f over %zu folds\n", r.label.c_str(), c.mean, c.std, c.n);
    }
    write_json(report, out);
    return 0;
}

struct RiskRow {
    std::string id;
    std::string split;
    double risk;
    SurvivalRecord record;
};

std::vector<RiskRow> read_risks_csv(const std::string& path) {
    const auto t = detail::read_csv(path);
    const auto c_id = t.column("patient_id", path), c_risk = t.column("risk", path), c_time = t.column("time", path),
               c_event = t.column("event", path);
    const auto split_it = std::find(t.header.begin(), t.header.end(), "split");
    std::vector<RiskRow> rows;
    for (std::size_t i = 0; i < t.rows.size(); ++i) {
        const auto& cells = t.rows[i];
        const auto where = [&](std::size_t c) { return path + " row " + std::to_string(i + 2) + " col " + std::to_string(c + 1); };
        RiskRow r;
        r.id = cells[c_id];
        r.split = split_it == t.header.end() ? "val" : cells[std::size_t(split_it - t.header.begin())];
        r.risk = detail::parse_double(cells[c_risk], where(c_risk));
        r.record.time = detail::parse_double(cells[c_time], where(c_time));
        r.record.event = detail::parse_double(cells[c_event], where(c_event)) != 0 ? 1 : 0;
        validate(r.record);
        rows.push_back(std::move(r));
    }
    if (rows.empty()) throw ValidationError(path + ": no rows");
    return rows;
}

/// "auto" takes the median training risk (all rows when the file has no
/// training rows); anything else must parse as a number.
double resolve_theta(const std::string& theta, const std::vector<RiskRow>& rows) {
    if (theta != "auto") return detail::parse_double(theta, "--theta");
    std::vector<double> train;
    for (const auto& r : rows)
        if (r.split == "train") train.push_back(r.risk);
    if (train.empty()) {
        warn("km: no training rows in the risk file; theta is the median of all risks");
        for (const auto& r : rows) train.push_back(r.risk);
    }
    return median_threshold(train);
}

int cmd_km(const std::string& risks, const std::string& theta_arg, const std::vector<std::string>& out,
           const std::string& summary) {
    const auto rows = read_risks_csv(risks);
    const double theta = resolve_theta(theta_arg, rows);
    std::vector<SurvivalRecord> high, low;
    bool any_val = false;
    for (const auto& r : rows) any_val = any_val || r.split == "val";
    for (const auto& r : rows) {
        if (any_val && r.split != "val") continue;
        (r.risk > theta ? high : low).push_back(r.record);
    }
    if (high.empty() || low.empty()) throw UndefinedError("km: one risk group is empty at theta " + std::to_string(theta));
    const std::vector<std::pair<std::string, KMCurve>> curves{{"high", kaplan_meier(high)}, {"low", kaplan_meier(low)}};

    std::vector<std::string> paths = out;
    if (paths.size() == 1) {
        const auto pos = paths[0].find("{high,low}");
        if (pos != std::string::npos) {
            auto h = paths[0], l = paths[0];
            paths = {h.replace(pos, 10, "high"), l.replace(pos, 10, "low")};
        }
    }
    auto write = [](const std::string& path, std::span<const std::pair<std::string, KMCurve>> groups) {
        std::ofstream os(path);
        if (!os) throw ValidationError("cannot write " + path);
        write_km_csv(os, groups);
    };
    if (paths.size() == 2) {
        write(paths[0], std::span(curves).subspan(0, 1));
        write(paths[1], std::span(curves).subspan(1, 1));
    } else {
        write(paths.at(0), curves);
    }
    const auto lr = log_rank(high, low);
    std::printf("theta %.6g: high %zu, low %zu, log-rank chi2 %.4f, p %.3g\n", theta, high.size(), low.size(), lr.chi2,
                lr.p);
    if (!summary.empty())
        write_json(summary, {{"theta", theta},
                             {"n_high", high.size()},
                             {"n_low", low.size()},
                             {"log_rank", {{"chi2", lr.chi2}, {"p", lr.p}, {"df", lr.df}}},
                             {"km_high", km_json(curves[0].second)},
                             {"km_low", km_json(curves[1].second)}});
    return 0;
}

struct CovariateColumn {
    std::string label;
    std::vector<double> values;
};

std::string group_counts(const std::vector<double>& v) {
    std::size_t one = 0, zero = 0;
    for (double x : v) (x == 1 ? one : zero) += (x == 0 || x == 1);
    return std::to_string(one) + " vs " + std::to_string(zero);
}

int cmd_coxph(const std::string& clinical_path, const std::string& covariates, const std::string& risks,
              const std::string& theta_arg, const std::string& out, const std::string& text_out) {
    const auto clinical = read_clinical_csv(clinical_path);
    static const std::map<std::string, std::pair<std::size_t, std::string>> known{
        {"grade", {0, "Grade 3"}}, {"size", {1, "Size > 20 mm"}}, {"age", {2, "Age > 55"}}, {"ln", {3, "LN Status"}}};
    std::vector<CovariateColumn> cols;
    std::stringstream ss(covariates);
    for (std::string name; std::getline(ss, name, ',');) {
        auto it = known.find(name);
        if (it == known.end()) throw ValidationError("unknown covariate '" + name + "' (expected grade, size, age, ln)");
        CovariateColumn c{it->second.second, {}};
        for (const auto& row : clinical) c.values.push_back(binarize_clinical(row.raw).cox[it->second.first]);
        cols.push_back(std::move(c));
    }
    if (!risks.empty()) {
        const auto rows = read_risks_csv(risks);
        const double theta = resolve_theta(theta_arg, rows);
        std::map<std::string, double> group;
        for (const auto& r : rows) group[r.id] = r.risk > theta ? 1.0 : 0.0;
        CovariateColumn c{"Risk group", {}};
        for (const auto& row : clinical) {
            auto it = group.find(row.id);
            if (it == group.end()) throw ValidationError(risks + ": no risk for patient '" + row.id + "'");
            c.values.push_back(it->second);
        }
        cols.push_back(std::move(c));
    }
    if (cols.empty()) throw ValidationError("coxph: no covariates");
    std::vector<SurvivalRecord> rec;
    for (const auto& row : clinical) rec.push_back(row.record);
    const std::size_t n = rec.size();

    std::vector<HazardSection> sections{{"Univariate", {}}, {"Multivariate", {}}};
    Covariates joint{n, cols.size(), std::vector<double>(n * cols.size()), {}};
    for (std::size_t j = 0; j < cols.size(); ++j) {
        auto row = hazard_table(fit_coxph(Covariates{n, 1, cols[j].values, {cols[j].label}}, rec)).front();
        row.n_per_group = group_counts(cols[j].values);
        sections[0].rows.push_back(row);
        joint.labels.push_back(cols[j].label);
        for (std::size_t i = 0; i < n; ++i) joint.values[i * cols.size() + j] = cols[j].values[i];
    }
    auto multi = hazard_table(fit_coxph(joint, rec));
    for (std::size_t j = 0; j < multi.size(); ++j) multi[j].n_per_group = group_counts(cols[j].values);
    sections[1].rows = std::move(multi);

    std::ofstream csv(out);
    if (!csv) throw ValidationError("cannot write " + out);
    write_hazard_csv(csv, sections);
    write_hazard_text(std::cout, sections);
    if (!text_out.empty()) {
        std::ofstream txt(text_out);
        write_hazard_text(txt, sections);
    }
    return 0;
}

// ---------------------------------------------------------------------------
// Finite-difference suite

Tensor random_leaf(std::size_t r, std::size_t c, Rng& rng, bool requires_grad = true) {
    std::vector<double> v(r * c);
    for (auto& x : v) x = rng.normal();
    return Tensor(Shape{r, c}, std::move(v), requires_grad);
}

Tensor contract(const Tensor& out, const Tensor& w) { return sum(mul(out, w)); }

int cmd_gradcheck(double tol, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<std::pair<std::string, double>> results;
    auto check = [&](const std::string& name, const std::function<Tensor()>& f, std::vector<Tensor> params) {
        results.emplace_back(name, check_gradients(f, std::move(params)));
    };

    {
        const auto a = random_leaf(3, 4, rng), b = random_leaf(4, 2, rng), p = random_leaf(3, 2, rng, false);
        check("matmul", [&] { return contract(matmul(a, b), p); }, {a, b});
    }
    {
        const auto x = random_leaf(3, 5, rng), p = random_leaf(3, 5, rng, false);
        check("softmax_rows", [&] { return contract(softmax_rows(x), p); }, {x});
        const auto g = random_leaf(1, 5, rng), b = random_leaf(1, 5, rng);
        check("layer_norm", [&] { return contract(layer_norm(x, g, b), p); }, {x, g, b});
        check("exp_log_square", [&] { return contract(log(add_scalar(exp(x), 1.0)), square(p)); }, {x});
        check("relu", [&] { return contract(relu(x), p); }, {x});
    }
    for (auto mode : {CoxMode::time_sorted, CoxMode::verbatim_alg1}) {
        std::vector<SurvivalRecord> rec(10);
        for (auto& r : rec) r = {double(1 + rng.below(6)), rng.uniform() < 0.4 ? 1 : 0, 1.0};
        rec[0].event = 1;
        rec = with_event_weights(rec, 3.0);
        const auto r = random_leaf(10, 1, rng);
        check(std::string("cox_loss/") + to_string(mode), [&] { return cox_loss(r, rec, mode); }, {r});
    }

    FusionConfig c;
    c.feat_dim_per_extractor = 4;
    c.latent_dim = 8;
    c.vae_hidden = 8;
    c.patches_per_patient = 4;
    c.gene_dim = 6;
    c.d_model = 16;
    c.n_image_tokens = 2;
    c.n_gene_tokens = 2;
    c.n_heads = 2;
    c.n_encoder_layers = 1;
    c.ffn_hidden = 16;
    c.fc_dims = {8, 8, 4, 4};
    {
        auto vae = VaeParams<double>::init(c, rng);
        const auto x = random_leaf(4, c.concat_dim(), rng, false);
        const auto eps = random_leaf(4, c.latent_dim, rng, false);
        check("vae_loss", [&] {
            const auto enc = vae_encode(x, vae);
            return vae_loss(x, vae_decode(reparameterize(enc.mu, enc.sigma, eps), vae), enc.mu, enc.sigma, 0.5);
        }, trainable(vae));
    }
    auto m = ModelParams<double>::init(c, rng);
    // Move parameters off exact zeros so no pre-activation sits on a ReLU kink.
    m.visit([&](const std::string&, Tensor& t, bool trainable) {
        if (trainable)
            for (auto& v : t.mutable_data()) v += 0.1 * rng.normal();
    });
    {
        const auto z = random_leaf(5, c.latent_dim, rng), p = random_leaf(1, c.latent_dim, rng, false);
        check("self_attention_pool", [&] { return contract(self_attention_pool(z, m.pool), p); },
              {z, m.pool.q, m.pool.k, m.pool.v});
    }
    {
        const auto img = random_leaf(2, c.d_model, rng), gene = random_leaf(2, c.d_model, rng);
        const auto p1 = random_leaf(2, c.d_model, rng, false), p2 = random_leaf(2, c.d_model, rng, false);
        check("co_attention", [&] {
            const auto o = co_attention(img, gene, m.co);
            return add(contract(o.image_to_gene, p1), contract(o.gene_to_image, p2));
        }, {img, gene, m.co.q_i, m.co.k_i, m.co.v_i, m.co.q_g, m.co.k_g, m.co.v_g});
        const auto a_ig = random_leaf(2, c.d_model, rng), a_gi = random_leaf(2, c.d_model, rng);
        check("dual_cross_attention", [&] {
            const auto o = dual_cross_attention(a_ig, a_gi, img, gene, c.key_dim());
            return add(contract(o.image, p1), contract(o.gene, p2));
        }, {a_ig, a_gi, img, gene});
    }
    {
        auto& l = m.layers.front();
        const auto x = random_leaf(4, c.d_model, rng), p = random_leaf(4, c.d_model, rng, false);
        check("multi_head_self_attention", [&] { return contract(multi_head_self_attention(x, l, c.n_heads), p); },
              {x, l.wq, l.wk, l.wv, l.wo, l.bo});
        check("transformer_encode", [&] { return contract(transformer_encode<double>(x, m.layers, c.n_heads), p); },
              {x, l.wq, l.wk, l.wv, l.wo, l.bo, l.ln1_g, l.ln1_b, l.ffn_w1, l.ffn_b1, l.ffn_w2, l.ffn_b2, l.ln2_g,
               l.ln2_b});
    }
    {
        const auto vae = VaeParams<double>::init(c, rng);
        std::vector<Tensor> latents;
        std::vector<std::vector<double>> genes, clin;
        std::vector<SurvivalRecord> rec;
        for (int i = 0; i < 6; ++i) {
            latents.push_back(random_leaf(1, c.latent_dim, rng, false));
            genes.emplace_back();
            for (std::size_t g = 0; g < c.gene_dim; ++g) genes.back().push_back(rng.normal());
            clin.push_back({double(rng.below(2)), double(rng.below(2)), double(rng.below(2)), double(rng.below(2))});
            rec.push_back({rng.uniform(1, 100), i % 2, 1.0});
        }
        rec = with_event_weights(rec, 3.0);
        check("stage2_forward_cox", [&] {
            std::vector<Tensor> risks;
            for (std::size_t i = 0; i < latents.size(); ++i)
                risks.push_back(forward_from_latent(latents[i], genes[i], clin[i], m, c));
            return cox_loss(concat_rows(risks), rec);
        }, trainable(m));
    }

    bool ok = true;
    for (const auto& [name, err] : results) {
        const bool pass = err < tol;
        ok = ok && pass;
        std::printf("%-34s %.3e  %s\n", name.c_str(), err, pass ? "ok" : "FAIL");
    }
    std::printf("%s: max relative error threshold %.0e\n", ok ? "all gradients agree" : "gradient mismatch", tol);
    return ok ? 0 : 2;
}

template <template <typename> class Impl, typename... Args>
int dispatch(const std::string& precision, Args&&... args) {
    if (precision == "float32") return Impl<float>::run(std::forward<Args>(args)...);
    return Impl<double>::run(std::forward<Args>(args)...);
}

template <typename Real>
struct Stage1Cmd {
    static int run(const DataArgs& a, const std::string& out) { return stage1_impl<Real>(a, out); }
};
template <typename Real>
struct Stage2Cmd {
    static int run(const DataArgs& a, const std::string& vae, const std::string& out,
                   const std::optional<std::string>& loss, const std::optional<std::string>& mode) {
        return stage2_impl<Real>(a, vae, out, loss, mode);
    }
};
template <typename Real>
struct EvalCmd {
    static int run(const DataArgs& a, const std::string& vae, const std::string& model, const std::string& report,
                   const std::string& risks) {
        return eval_impl<Real>(a, vae, model, report, risks);
    }
};
template <typename Real>
struct CvCmd {
    static int run(const DataArgs& a, int k, const std::vector<std::string>& variants, const std::string& report) {
        return cv_impl<Real>(a, k, variants, report);
    }
};

std::string precision_of(const DataArgs& a) { return load_run_config(a).train.precision; }

void add_data_options(CLI::App* app, DataArgs& a, bool need_config) {
    app->add_option("--data", a.data, "Cohort directory (clinical.csv, genes.csv, patches/)")->required();
    auto* cfg = app->add_option("--config", a.config, "Run config JSON {\"fusion\": ..., \"train\": ...}");
    if (need_config) cfg->required();
    app->add_option("--folds", a.folds, "Folds JSON; omit to train on every patient");
    app->add_option("--fold", a.fold, "1-based fold index within --folds (default 1)");
    app->add_option("--seed", a.seed, "Seed overriding train.seed");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"biofusion: multimodal survival modelling with a weighted Cox loss"};
    app.require_subcommand(1);

    std::string spec_path, out, vae, model, report, risks, theta = "auto", summary, covariates = "grade,size,age,ln",
                                                                 text_out;
    std::vector<std::string> outs;
    std::vector<std::string> variants{"full", "image_only"};
    std::optional<std::uint64_t> seed;
    std::optional<std::string> loss, loss_mode;
    std::uint64_t gc_seed = 1;
    double tol = 1e-4;
    int k = 5;
    DataArgs data;

    auto* synth = app.add_subcommand("synth", "Generate a synthetic cohort directory");
    synth->add_option("--spec", spec_path, "Synthetic spec JSON (defaults when omitted)");
    synth->add_option("--out", out, "Output directory")->required();
    synth->add_option("--seed", seed, "Seed overriding the cohort JSON");

    auto* folds = app.add_subcommand("folds", "Write an event-stratified k-fold split");
    folds->add_option("--data", data.data, "Cohort directory")->required();
    folds->add_option("--k", k, "Number of folds");
    folds->add_option("--seed", gc_seed, "Shuffle seed");
    folds->add_option("--out", out, "Folds JSON")->required();

    auto* s1 = app.add_subcommand("train-stage1", "Pretrain the patch VAE");
    add_data_options(s1, data, false);
    s1->add_option("--out", out, "VAE checkpoint path")->required();

    auto* s2 = app.add_subcommand("train-stage2", "Train the fusion network on frozen VAE latents");
    add_data_options(s2, data, false);
    s2->add_option("--vae", vae, "Stage-1 checkpoint")->required();
    s2->add_option("--out", out, "Model checkpoint path")->required();
    s2->add_option("--loss", loss, "weighted or unweighted (overrides config)");
    s2->add_option("--loss-mode", loss_mode, "time_sorted or verbatim_alg1 (overrides config)");

    auto* ev = app.add_subcommand("eval", "Evaluate a trained model on one fold");
    add_data_options(ev, data, false);
    ev->add_option("--vae", vae, "Stage-1 checkpoint")->required();
    ev->add_option("--model", model, "Stage-2 checkpoint")->required();
    ev->add_option("--report", report, "Report JSON path")->required();
    ev->add_option("--risks", risks, "Risk CSV path (default: risks.csv next to the report)");

    auto* cv = app.add_subcommand("cv", "Cross-validate both stages for one or more variants");
    add_data_options(cv, data, false);
    cv->add_option("--k", k, "Folds to create when --folds is omitted");
    cv->add_option("--variants", variants, "full, full_unweighted, image_only, image_gene, image_clinical")
        ->delimiter(',');
    cv->add_option("--report", report, "Report JSON path")->required();

    auto* km = app.add_subcommand("km", "Kaplan-Meier curves and log-rank test for risk groups");
    km->add_option("--risks", risks, "Risk CSV (patient_id, split, risk, time, event)")->required();
    km->add_option("--theta", theta, "Threshold, or 'auto' for the median training risk");
    km->add_option("--out", outs, "One combined CSV, or high and low CSVs")->required()->expected(1, 2);
    km->add_option("--summary", summary, "Optional JSON summary with the log-rank result");

    auto* cox = app.add_subcommand("coxph", "Univariate and multivariate CoxPH hazard table");
    cox->add_option("--clinical", spec_path, "Clinical CSV")->required();
    cox->add_option("--covariates", covariates, "Comma-separated subset of grade,size,age,ln");
    cox->add_option("--risks", risks, "Optional risk CSV adding a high/low risk-group covariate");
    cox->add_option("--theta", theta, "Risk threshold for --risks, or 'auto'");
    cox->add_option("--out", out, "Hazard CSV path")->required();
    cox->add_option("--text", text_out, "Optional text rendering of the table");

    auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of every differentiable block");
    gc->add_option("--tol", tol, "Maximum relative error");
    gc->add_option("--seed", gc_seed, "Seed for the random inputs");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 1;
    }

    try {
        if (*synth) return cmd_synth(spec_path, out, seed);
        if (*folds) return cmd_folds(data.data, k, gc_seed, out);
        if (*s1) return dispatch<Stage1Cmd>(precision_of(data), data, out);
        if (*s2) return dispatch<Stage2Cmd>(precision_of(data), data, vae, out, loss, loss_mode);
        if (*ev) return dispatch<EvalCmd>(precision_of(data), data, vae, model, report, risks);
        if (*cv) return dispatch<CvCmd>(precision_of(data), data, k, variants, report);
        if (*km) return cmd_km(risks, theta, outs, summary);
        if (*cox) return cmd_coxph(spec_path, covariates, risks, theta, out, text_out);
        if (*gc) return cmd_gradcheck(tol, gc_seed);
    } catch (const ValidationError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    } catch (const NumericError& e) {
        std::fprintf(stderr, "numeric error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 1;
}
