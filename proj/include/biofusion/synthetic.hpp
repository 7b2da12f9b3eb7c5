#pragma once

// Seeded synthetic multimodal cohorts with a known generating log-hazard.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

#include "biofusion/data.hpp"
#include "biofusion/errors.hpp"
#include "biofusion/rng.hpp"
#include "json.hpp"

namespace biofusion {

struct ModalityWeights {
    double image = 1.0;
    double gene = 1.0;
    double clinical = 0.8;
};

struct SyntheticSpec {
    std::size_t n_patients = 240;
    std::size_t patches = 32;
    std::size_t feat_dim = 48;   // concatenated patch-feature width
    std::size_t gene_dim = 16;
    std::size_t clinical_dim = kClinicalDim;
    ModalityWeights true_weights;
    double weibull_shape = 1.2;
    double weibull_scale = 100.0;  // months
    double censoring_fraction = 0.67;
    double patch_noise = 1.0;
    double gene_noise = 0.5;
    double ln_missing_fraction = 0.0;
    std::uint64_t seed = 1;

    void validate() const {
        if (n_patients < 2) throw ValidationError("synthetic spec: need at least 2 patients");
        if (patches < 1 || feat_dim < 1 || gene_dim < 1) throw ValidationError("synthetic spec: dimensions must be >= 1");
        if (clinical_dim != kClinicalDim) throw ValidationError("synthetic spec: clinical_dim must be 4");
        if (!(censoring_fraction > 0 && censoring_fraction < 1))
            throw ValidationError("synthetic spec: censoring fraction must lie in (0, 1)");
        if (!(weibull_shape > 0 && weibull_scale > 0)) throw ValidationError("synthetic spec: Weibull parameters must be positive");
        if (!(ln_missing_fraction >= 0 && ln_missing_fraction < 1))
            throw ValidationError("synthetic spec: ln_missing_fraction must lie in [0, 1)");
    }
};

inline void from_json(const nlohmann::json& j, SyntheticSpec& s) {
    auto get = [&](const char* key, auto& field) {
        if (j.contains(key)) j.at(key).get_to(field);
    };
    get("n_patients", s.n_patients);
    get("patches", s.patches);
    get("feat_dim", s.feat_dim);
    get("gene_dim", s.gene_dim);
    get("clinical_dim", s.clinical_dim);
    if (j.contains("true_weights")) {
        const auto& w = j.at("true_weights");
        if (w.contains("image")) w.at("image").get_to(s.true_weights.image);
        if (w.contains("gene")) w.at("gene").get_to(s.true_weights.gene);
        if (w.contains("clinical")) w.at("clinical").get_to(s.true_weights.clinical);
    }
    get("weibull_shape", s.weibull_shape);
    get("weibull_scale", s.weibull_scale);
    get("censoring_fraction", s.censoring_fraction);
    get("patch_noise", s.patch_noise);
    get("gene_noise", s.gene_noise);
    get("ln_missing_fraction", s.ln_missing_fraction);
    get("seed", s.seed);
}

inline void to_json(nlohmann::json& j, const SyntheticSpec& s) {
    j = nlohmann::json{{"n_patients", s.n_patients},
                       {"patches", s.patches},
                       {"feat_dim", s.feat_dim},
                       {"gene_dim", s.gene_dim},
                       {"clinical_dim", s.clinical_dim},
                       {"true_weights",
                        {{"image", s.true_weights.image},
                         {"gene", s.true_weights.gene},
                         {"clinical", s.true_weights.clinical}}},
                       {"weibull_shape", s.weibull_shape},
                       {"weibull_scale", s.weibull_scale},
                       {"censoring_fraction", s.censoring_fraction},
                       {"patch_noise", s.patch_noise},
                       {"gene_noise", s.gene_noise},
                       {"ln_missing_fraction", s.ln_missing_fraction},
                       {"seed", s.seed}};
}

struct SyntheticCohort {
    std::vector<PatientBundle> bundles;
    std::vector<double> true_log_hazard;
    std::vector<std::string> gene_names;
    double realized_censoring = 0;
};

/// Patient i has independent standard-normal image and gene factors and four
/// fair clinical bits. The true log-hazard is
///   w_image * u_image + w_gene * u_gene + w_clinical * sum(2b - 1) / 2,
/// each term with unit variance before weighting. Patch rows carry u_image
/// along a fixed direction plus a non-prognostic nuisance factor and noise;
/// genes carry u_gene along another direction around an expression offset.
/// Event times are Weibull with hazard proportional to exp(eta); exponential
/// censoring times are calibrated by bisection on their rate.
inline SyntheticCohort synthesize_cohort(const SyntheticSpec& spec) {
    spec.validate();
    Rng rng(spec.seed);
    auto dir_rng = rng.fork();
    auto patient_rng = rng.fork();
    auto censor_rng = rng.fork();

    std::vector<double> img_dir(spec.feat_dim), nuisance_dir(spec.feat_dim), gene_dir(spec.gene_dim),
        gene_offset(spec.gene_dim);
    for (auto& v : img_dir) v = dir_rng.normal();
    for (auto& v : nuisance_dir) v = dir_rng.normal();
    for (auto& v : gene_dir) v = dir_rng.normal();
    for (auto& v : gene_offset) v = dir_rng.uniform(4.0, 10.0);

    SyntheticCohort out;
    for (std::size_t g = 0; g < spec.gene_dim; ++g) {
        char name[32];
        std::snprintf(name, sizeof name, "GENE%03zu", g + 1);
        out.gene_names.emplace_back(name);
    }

    const std::size_t n = spec.n_patients;
    std::vector<double> event_time(n);
    for (std::size_t i = 0; i < n; ++i) {
        PatientBundle b;
        char id[32];
        std::snprintf(id, sizeof id, "P%04zu", i + 1);
        b.id = id;

        const double u_img = patient_rng.normal();
        const double u_gene = patient_rng.normal();
        const double nuisance = patient_rng.normal();
        std::array<int, 4> bits{};
        double clin_score = 0;
        for (auto& bit : bits) {
            bit = patient_rng.uniform() < 0.5 ? 1 : 0;
            clin_score += 2.0 * bit - 1.0;
        }
        clin_score /= 2.0;
        const double eta = spec.true_weights.image * u_img + spec.true_weights.gene * u_gene +
                           spec.true_weights.clinical * clin_score;
        out.true_log_hazard.push_back(eta);

        b.patches.rows = static_cast<std::uint32_t>(spec.patches);
        b.patches.cols = static_cast<std::uint32_t>(spec.feat_dim);
        b.patches.values.resize(spec.patches * spec.feat_dim);
        for (std::size_t p = 0; p < spec.patches; ++p) {
            const double amplitude = patient_rng.uniform(0.5, 1.5);
            for (std::size_t f = 0; f < spec.feat_dim; ++f)
                b.patches.values[p * spec.feat_dim + f] = static_cast<float>(
                    amplitude * u_img * img_dir[f] + nuisance * nuisance_dir[f] + spec.patch_noise * patient_rng.normal());
        }

        b.genes.resize(spec.gene_dim);
        for (std::size_t g = 0; g < spec.gene_dim; ++g)
            b.genes[g] = gene_offset[g] + u_gene * gene_dir[g] + spec.gene_noise * patient_rng.normal();

        RawClinical raw;
        raw.grade = bits[0] ? 3 : (patient_rng.uniform() < 0.5 ? 1 : 2);
        raw.size_mm = bits[1] ? patient_rng.uniform(21.0, 60.0) : patient_rng.uniform(5.0, 20.0);
        raw.age_years = bits[2] ? patient_rng.uniform(56.0, 85.0) : patient_rng.uniform(30.0, 55.0);
        raw.ln = bits[3] ? LnStatus::positive : LnStatus::negative;
        if (patient_rng.uniform() < spec.ln_missing_fraction) raw.ln = LnStatus::missing;
        b.raw_clinical = raw;
        const auto f = binarize_clinical(raw);
        b.clinical = f.network;
        b.clinical_missing = f.missing;

        const double u = patient_rng.uniform_open_low();
        event_time[i] = std::max(1e-6, spec.weibull_scale * std::pow(-std::log(u) / std::exp(eta), 1.0 / spec.weibull_shape));
        out.bundles.push_back(std::move(b));
    }

    // Censoring C_i = E_i / rate with E_i standard exponential.
    std::vector<double> unit_exp(n);
    for (auto& e : unit_exp) e = -std::log(censor_rng.uniform_open_low());
    const auto censored_fraction = [&](double log_rate) {
        const double rate = std::exp(log_rate);
        std::size_t c = 0;
        for (std::size_t i = 0; i < n; ++i) c += unit_exp[i] / rate < event_time[i];
        return double(c) / double(n);
    };
    double lo = -40, hi = 40;
    for (int it = 0; it < 200; ++it) {
        const double mid = 0.5 * (lo + hi);
        (censored_fraction(mid) < spec.censoring_fraction ? lo : hi) = mid;
    }
    const double log_rate = hi;
    out.realized_censoring = censored_fraction(log_rate);
    const double tolerance = std::max(0.02, 1.5 / double(n));
    if (std::abs(out.realized_censoring - spec.censoring_fraction) > tolerance)
        throw ValidationError("synthetic spec: censoring fraction " + std::to_string(spec.censoring_fraction) +
                              " is unachievable (closest " + std::to_string(out.realized_censoring) + ")");
    const double rate = std::exp(log_rate);
    for (std::size_t i = 0; i < n; ++i) {
        const double c = std::max(1e-6, unit_exp[i] / rate);
        auto& r = out.bundles[i].record;
        r.event = event_time[i] <= c ? 1 : 0;
        r.time = r.event ? event_time[i] : c;
        r.weight = 1.0;
    }
    return out;
}

}  // namespace biofusion
