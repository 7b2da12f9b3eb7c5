#pragma once

// Multimodal fusion network: VAE over concatenated patch features,
// self-attention patch pooling with sum aggregation, image/gene co-attention,
// dual cross attention, a post-norm transformer encoder and a risk head that
// injects clinical variables at its third fully-connected layer.

#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "biofusion/data.hpp"
#include "biofusion/errors.hpp"
#include "biofusion/rng.hpp"
#include "biofusion/tensor.hpp"
#include "json.hpp"

namespace biofusion {

struct FusionConfig {
    std::size_t feat_dim_per_extractor = 384;
    std::size_t n_extractors = 3;
    std::size_t latent_dim = 256;
    std::size_t vae_hidden = 512;
    std::size_t patches_per_patient = 500;
    std::size_t gene_dim = 138;
    std::size_t clinical_dim = kClinicalDim;
    std::size_t d_model = 256;          // token width on both modalities
    std::size_t n_image_tokens = 8;
    std::size_t n_gene_tokens = 8;
    std::size_t n_heads = 4;
    std::size_t n_encoder_layers = 2;
    std::size_t ffn_hidden = 1024;
    std::size_t d_k = 0;                // co-attention key width; 0 means d_model / n_heads
    std::array<std::size_t, 4> fc_dims{256, 128, 64, 32};
    double vae_beta = 1e-3;
    bool use_genes = true;
    bool use_clinical = true;
    bool standardize_genes = true;

    std::size_t concat_dim() const { return feat_dim_per_extractor * n_extractors; }
    std::size_t key_dim() const { return d_k ? d_k : d_model / n_heads; }

    void validate() const {
        const std::size_t dims[] = {feat_dim_per_extractor, n_extractors, latent_dim, vae_hidden, patches_per_patient,
                                    gene_dim, clinical_dim, d_model, n_image_tokens, n_gene_tokens, n_heads, ffn_hidden};
        for (auto d : dims)
            if (d < 1) throw ValidationError("fusion config: every dimension must be >= 1");
        for (auto d : fc_dims)
            if (d < 1) throw ValidationError("fusion config: fc_dims must be >= 1");
        if (d_model % n_heads != 0)
            throw ValidationError("fusion config: d_model " + std::to_string(d_model) + " is not divisible by n_heads " +
                                  std::to_string(n_heads));
        if (key_dim() < 1) throw ValidationError("fusion config: key width must be >= 1");
        if (use_genes && n_image_tokens != n_gene_tokens)
            throw ValidationError("fusion config: dual cross attention needs n_image_tokens == n_gene_tokens");
        if (!(vae_beta >= 0)) throw ValidationError("fusion config: vae_beta must be >= 0");
    }
};

inline void to_json(nlohmann::json& j, const FusionConfig& c) {
    j = nlohmann::json{{"feat_dim_per_extractor", c.feat_dim_per_extractor},
                       {"n_extractors", c.n_extractors},
                       {"concat_dim", c.concat_dim()},
                       {"latent_dim", c.latent_dim},
                       {"vae_hidden", c.vae_hidden},
                       {"patches_per_patient", c.patches_per_patient},
                       {"gene_dim", c.gene_dim},
                       {"clinical_dim", c.clinical_dim},
                       {"d_model", c.d_model},
                       {"n_image_tokens", c.n_image_tokens},
                       {"n_gene_tokens", c.n_gene_tokens},
                       {"n_heads", c.n_heads},
                       {"n_encoder_layers", c.n_encoder_layers},
                       {"ffn_hidden", c.ffn_hidden},
                       {"d_k", c.key_dim()},
                       {"fc_dims", c.fc_dims},
                       {"vae_beta", c.vae_beta},
                       {"use_genes", c.use_genes},
                       {"use_clinical", c.use_clinical},
                       {"standardize_genes", c.standardize_genes}};
}

inline void from_json(const nlohmann::json& j, FusionConfig& c) {
    auto get = [&](const char* key, auto& field) {
        if (j.contains(key)) j.at(key).get_to(field);
    };
    get("feat_dim_per_extractor", c.feat_dim_per_extractor);
    get("n_extractors", c.n_extractors);
    get("latent_dim", c.latent_dim);
    get("vae_hidden", c.vae_hidden);
    get("patches_per_patient", c.patches_per_patient);
    get("gene_dim", c.gene_dim);
    get("clinical_dim", c.clinical_dim);
    get("d_model", c.d_model);
    get("n_image_tokens", c.n_image_tokens);
    get("n_gene_tokens", c.n_gene_tokens);
    get("n_heads", c.n_heads);
    get("n_encoder_layers", c.n_encoder_layers);
    get("ffn_hidden", c.ffn_hidden);
    get("d_k", c.d_k);
    get("fc_dims", c.fc_dims);
    get("vae_beta", c.vae_beta);
    get("use_genes", c.use_genes);
    get("use_clinical", c.use_clinical);
    get("standardize_genes", c.standardize_genes);
    if (j.contains("concat_dim") && j.at("concat_dim").get<std::size_t>() != c.concat_dim())
        throw ValidationError("fusion config: concat_dim must equal n_extractors * feat_dim_per_extractor");
}

// ---------------------------------------------------------------------------
// Parameters

template <typename Real>
BasicTensor<Real> glorot(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
    const double a = std::sqrt(6.0 / double(fan_in + fan_out));
    std::vector<Real> v(fan_in * fan_out);
    for (auto& x : v) x = static_cast<Real>(rng.uniform(-a, a));
    return BasicTensor<Real>(Shape{fan_in, fan_out}, std::move(v), true);
}

template <typename Real>
BasicTensor<Real> zero_bias(std::size_t n) {
    return BasicTensor<Real>::zeros(Shape{1, n}, true);
}

template <typename Real>
BasicTensor<Real> one_gain(std::size_t n) {
    return BasicTensor<Real>::ones(Shape{1, n}, true);
}

template <typename Real>
struct VaeParams {
    BasicTensor<Real> enc_w, enc_b, mu_w, mu_b, logsig_w, logsig_b;
    BasicTensor<Real> dec_w1, dec_b1, dec_w2, dec_b2;

    static VaeParams init(const FusionConfig& c, Rng& rng) {
        const auto x = c.concat_dim(), h = c.vae_hidden, z = c.latent_dim;
        VaeParams p;
        p.enc_w = glorot<Real>(x, h, rng);
        p.enc_b = zero_bias<Real>(h);
        p.mu_w = glorot<Real>(h, z, rng);
        p.mu_b = zero_bias<Real>(z);
        p.logsig_w = glorot<Real>(h, z, rng);
        p.logsig_b = zero_bias<Real>(z);
        p.dec_w1 = glorot<Real>(z, h, rng);
        p.dec_b1 = zero_bias<Real>(h);
        p.dec_w2 = glorot<Real>(h, x, rng);
        p.dec_b2 = zero_bias<Real>(x);
        return p;
    }

    /// Calls f(name, tensor, trainable) for every parameter in a fixed order.
    template <typename F>
    void visit(F&& f) {
        f("vae.enc_w", enc_w, true);
        f("vae.enc_b", enc_b, true);
        f("vae.mu_w", mu_w, true);
        f("vae.mu_b", mu_b, true);
        f("vae.logsig_w", logsig_w, true);
        f("vae.logsig_b", logsig_b, true);
        f("vae.dec_w1", dec_w1, true);
        f("vae.dec_b1", dec_b1, true);
        f("vae.dec_w2", dec_w2, true);
        f("vae.dec_b2", dec_b2, true);
    }
};

template <typename Real>
struct PoolWeights {
    BasicTensor<Real> q, k, v;  // latent x latent
};

template <typename Real>
struct CoAttentionWeights {
    BasicTensor<Real> q_i, k_i, v_i;  // image side: d x d_k, d x d_k, d x d
    BasicTensor<Real> q_g, k_g, v_g;  // gene side
};

template <typename Real>
struct EncoderLayer {
    BasicTensor<Real> wq, wk, wv, wo, bo;
    BasicTensor<Real> ln1_g, ln1_b;
    BasicTensor<Real> ffn_w1, ffn_b1, ffn_w2, ffn_b2;
    BasicTensor<Real> ln2_g, ln2_b;

    static EncoderLayer init(std::size_t d, std::size_t ffn, Rng& rng) {
        EncoderLayer l;
        l.wq = glorot<Real>(d, d, rng);
        l.wk = glorot<Real>(d, d, rng);
        l.wv = glorot<Real>(d, d, rng);
        l.wo = glorot<Real>(d, d, rng);
        l.bo = zero_bias<Real>(d);
        l.ln1_g = one_gain<Real>(d);
        l.ln1_b = zero_bias<Real>(d);
        l.ffn_w1 = glorot<Real>(d, ffn, rng);
        l.ffn_b1 = zero_bias<Real>(ffn);
        l.ffn_w2 = glorot<Real>(ffn, d, rng);
        l.ffn_b2 = zero_bias<Real>(d);
        l.ln2_g = one_gain<Real>(d);
        l.ln2_b = zero_bias<Real>(d);
        return l;
    }
};

template <typename Real>
struct RiskHeadWeights {
    BasicTensor<Real> fc1_w, fc1_b, fc2_w, fc2_b;
    BasicTensor<Real> fc3_w, fc3_b;  // input is [fc2 output | clinical]
    BasicTensor<Real> fc4_w, fc4_b, out_w, out_b;
};

template <typename Real>
struct ModelParams {
    PoolWeights<Real> pool;
    BasicTensor<Real> image_tok_w, image_tok_b;
    BasicTensor<Real> gene_tok_w, gene_tok_b;
    CoAttentionWeights<Real> co;
    std::vector<EncoderLayer<Real>> layers;
    RiskHeadWeights<Real> head;
    // Per-gene standardisation fitted on the training fold; not trained.
    BasicTensor<Real> gene_mean, gene_scale;

    static ModelParams init(const FusionConfig& c, Rng& rng) {
        c.validate();
        const auto z = c.latent_dim, d = c.d_model, dk = c.key_dim();
        ModelParams p;
        p.pool = {glorot<Real>(z, z, rng), glorot<Real>(z, z, rng), glorot<Real>(z, z, rng)};
        p.image_tok_w = glorot<Real>(z, c.n_image_tokens * d, rng);
        p.image_tok_b = zero_bias<Real>(c.n_image_tokens * d);
        p.gene_tok_w = glorot<Real>(c.gene_dim, c.n_gene_tokens * d, rng);
        p.gene_tok_b = zero_bias<Real>(c.n_gene_tokens * d);
        p.co = {glorot<Real>(d, dk, rng), glorot<Real>(d, dk, rng), glorot<Real>(d, d, rng),
                glorot<Real>(d, dk, rng), glorot<Real>(d, dk, rng), glorot<Real>(d, d, rng)};
        for (std::size_t i = 0; i < c.n_encoder_layers; ++i) p.layers.push_back(EncoderLayer<Real>::init(d, c.ffn_hidden, rng));
        const auto& f = c.fc_dims;
        p.head.fc1_w = glorot<Real>(d, f[0], rng);
        p.head.fc1_b = zero_bias<Real>(f[0]);
        p.head.fc2_w = glorot<Real>(f[0], f[1], rng);
        p.head.fc2_b = zero_bias<Real>(f[1]);
        p.head.fc3_w = glorot<Real>(f[1] + c.clinical_dim, f[2], rng);
        p.head.fc3_b = zero_bias<Real>(f[2]);
        p.head.fc4_w = glorot<Real>(f[2], f[3], rng);
        p.head.fc4_b = zero_bias<Real>(f[3]);
        p.head.out_w = glorot<Real>(f[3], 1, rng);
        p.head.out_b = zero_bias<Real>(1);
        p.gene_mean = BasicTensor<Real>::zeros(Shape{1, c.gene_dim});
        p.gene_scale = BasicTensor<Real>::ones(Shape{1, c.gene_dim});
        return p;
    }

    template <typename F>
    void visit(F&& f) {
        f("pool.q", pool.q, true);
        f("pool.k", pool.k, true);
        f("pool.v", pool.v, true);
        f("image_tok.w", image_tok_w, true);
        f("image_tok.b", image_tok_b, true);
        f("gene_tok.w", gene_tok_w, true);
        f("gene_tok.b", gene_tok_b, true);
        f("co.q_i", co.q_i, true);
        f("co.k_i", co.k_i, true);
        f("co.v_i", co.v_i, true);
        f("co.q_g", co.q_g, true);
        f("co.k_g", co.k_g, true);
        f("co.v_g", co.v_g, true);
        for (std::size_t i = 0; i < layers.size(); ++i) {
            auto& l = layers[i];
            const std::string pre = "enc" + std::to_string(i) + ".";
            f(pre + "wq", l.wq, true);
            f(pre + "wk", l.wk, true);
            f(pre + "wv", l.wv, true);
            f(pre + "wo", l.wo, true);
            f(pre + "bo", l.bo, true);
            f(pre + "ln1_g", l.ln1_g, true);
            f(pre + "ln1_b", l.ln1_b, true);
            f(pre + "ffn_w1", l.ffn_w1, true);
            f(pre + "ffn_b1", l.ffn_b1, true);
            f(pre + "ffn_w2", l.ffn_w2, true);
            f(pre + "ffn_b2", l.ffn_b2, true);
            f(pre + "ln2_g", l.ln2_g, true);
            f(pre + "ln2_b", l.ln2_b, true);
        }
        f("head.fc1_w", head.fc1_w, true);
        f("head.fc1_b", head.fc1_b, true);
        f("head.fc2_w", head.fc2_w, true);
        f("head.fc2_b", head.fc2_b, true);
        f("head.fc3_w", head.fc3_w, true);
        f("head.fc3_b", head.fc3_b, true);
        f("head.fc4_w", head.fc4_w, true);
        f("head.fc4_b", head.fc4_b, true);
        f("head.out_w", head.out_w, true);
        f("head.out_b", head.out_b, true);
        f("gene.mean", gene_mean, false);
        f("gene.scale", gene_scale, false);
    }
};

/// Trainable tensors of a parameter struct, in visit order.
template <typename Real, template <typename> class Params>
std::vector<BasicTensor<Real>> trainable(Params<Real>& params) {
    std::vector<BasicTensor<Real>> out;
    params.visit([&](const std::string&, BasicTensor<Real>& t, bool is_trainable) {
        if (is_trainable) out.push_back(t);
    });
    return out;
}

template <typename Real, template <typename> class Params>
std::size_t parameter_count(Params<Real>& params) {
    std::size_t n = 0;
    params.visit([&](const std::string&, BasicTensor<Real>& t, bool is_trainable) {
        if (is_trainable) n += t.numel();
    });
    return n;
}

/// Fresh leaves holding copies of every tensor (used for best-checkpoint snapshots).
template <typename Real, template <typename> class Params>
Params<Real> clone_params(const Params<Real>& params) {
    Params<Real> copy = params;
    copy.visit([](const std::string&, BasicTensor<Real>& t, bool is_trainable) { t = t.clone_leaf(is_trainable); });
    return copy;
}

// ---------------------------------------------------------------------------
// Building blocks

/// a || b || c for the three extractor outputs of one patch.
inline std::vector<float> concat_patch_features(std::span<const float> a, std::span<const float> b,
                                                std::span<const float> c, std::size_t per_extractor = 384) {
    for (auto s : {a.size(), b.size(), c.size()})
        if (s != per_extractor)
            throw ShapeError("concat_patch_features: expected " + std::to_string(per_extractor) + " values, got " +
                             std::to_string(s));
    std::vector<float> out;
    out.reserve(3 * per_extractor);
    out.insert(out.end(), a.begin(), a.end());
    out.insert(out.end(), b.begin(), b.end());
    out.insert(out.end(), c.begin(), c.end());
    return out;
}

template <typename Real>
BasicTensor<Real> linear(const BasicTensor<Real>& x, const BasicTensor<Real>& w, const BasicTensor<Real>& b) {
    return add_row(matmul(x, w), b);
}

template <typename Real>
BasicTensor<Real> to_tensor(const FeatureMatrix& m) {
    return BasicTensor<Real>(Shape{m.rows, m.cols}, std::vector<Real>(m.values.begin(), m.values.end()));
}

template <typename Real>
BasicTensor<Real> row_tensor(std::span<const double> v) {
    return BasicTensor<Real>(Shape{1, v.size()}, std::vector<Real>(v.begin(), v.end()));
}

template <typename Real>
struct VaeEncoding {
    BasicTensor<Real> mu;
    BasicTensor<Real> sigma;
};

template <typename Real>
BasicTensor<Real> vae_hidden(const BasicTensor<Real>& x, const VaeParams<Real>& vae) {
    return relu(linear(x, vae.enc_w, vae.enc_b));
}

/// (mu, sigma) per patch; sigma = exp(log-sigma head) > 0.
template <typename Real>
VaeEncoding<Real> vae_encode(const BasicTensor<Real>& x, const VaeParams<Real>& vae) {
    const auto h = vae_hidden(x, vae);
    return {linear(h, vae.mu_w, vae.mu_b), exp(linear(h, vae.logsig_w, vae.logsig_b))};
}

/// Mean head only; the deterministic latent used at inference.
template <typename Real>
BasicTensor<Real> vae_encode_mean(const BasicTensor<Real>& x, const VaeParams<Real>& vae) {
    return linear(vae_hidden(x, vae), vae.mu_w, vae.mu_b);
}

template <typename Real>
BasicTensor<Real> vae_decode(const BasicTensor<Real>& z, const VaeParams<Real>& vae) {
    return linear(relu(linear(z, vae.dec_w1, vae.dec_b1)), vae.dec_w2, vae.dec_b2);
}

/// z = mu + sigma * eps.
template <typename Real>
BasicTensor<Real> reparameterize(const BasicTensor<Real>& mu, const BasicTensor<Real>& sigma,
                                 const BasicTensor<Real>& eps) {
    return add(mu, mul(sigma, eps));
}

/// MSE (mean over all elements) + beta * KL(N(mu, sigma^2) || N(0, I)), the KL
/// summed over latent dims and averaged over patches.
template <typename Real>
BasicTensor<Real> vae_loss(const BasicTensor<Real>& x, const BasicTensor<Real>& x_hat, const BasicTensor<Real>& mu,
                           const BasicTensor<Real>& sigma, double beta) {
    for (const Real s : sigma.data())
        if (!(s > Real(0))) throw NumericError("vae_loss: sigma must be strictly positive");
    const auto mse = mean(square(sub(x_hat, x)));
    // sigma^2 + mu^2 - 1 - log sigma^2
    const auto kl_terms = add_scalar(sub(add(square(sigma), square(mu)), scale(log(sigma), Real(2))), Real(-1));
    const auto kl = scale(sum(kl_terms), Real(0.5) / Real(mu.rows()));
    return add(mse, scale(kl, static_cast<Real>(beta)));
}

/// Collects attention weight matrices when passed to the forward functions.
template <typename Real>
struct AttentionTrace {
    std::vector<std::pair<std::string, BasicTensor<Real>>> weights;
    void record(std::string name, const BasicTensor<Real>& w) { weights.emplace_back(std::move(name), w); }
};

/// softmax(q k^T / sqrt(key_width)) v.
template <typename Real>
BasicTensor<Real> scaled_dot_attention(const BasicTensor<Real>& q, const BasicTensor<Real>& k,
                                       const BasicTensor<Real>& v, std::size_t key_width,
                                       AttentionTrace<Real>* trace = nullptr, const char* name = "attention") {
    const auto scores = scale(matmul(q, transpose(k)), Real(1) / std::sqrt(static_cast<Real>(key_width)));
    const auto w = softmax_rows(scores);
    if (trace) trace->record(name, w);
    return matmul(w, v);
}

/// y_i = sum_j softmax_j(Q_i K_j^T / sqrt(d)) V_j over patches, then sum over i.
template <typename Real>
BasicTensor<Real> self_attention_pool(const BasicTensor<Real>& z, const PoolWeights<Real>& w,
                                      AttentionTrace<Real>* trace = nullptr) {
    const auto y = scaled_dot_attention(matmul(z, w.q), matmul(z, w.k), matmul(z, w.v), w.k.cols(), trace, "pool");
    return sum_rows(y);
}

template <typename Real>
struct CoAttentionOutput {
    BasicTensor<Real> image_to_gene;  // A_IG, n_i x d_v
    BasicTensor<Real> gene_to_image;  // A_GI, n_g x d_v
};

template <typename Real>
CoAttentionOutput<Real> co_attention(const BasicTensor<Real>& image, const BasicTensor<Real>& gene,
                                     const CoAttentionWeights<Real>& w, AttentionTrace<Real>* trace = nullptr) {
    if (image.cols() != w.q_i.rows() || gene.cols() != w.q_g.rows())
        throw ShapeError("co_attention: token width does not match projection weights");
    const auto qi = matmul(image, w.q_i), ki = matmul(image, w.k_i), vi = matmul(image, w.v_i);
    const auto qg = matmul(gene, w.q_g), kg = matmul(gene, w.k_g), vg = matmul(gene, w.v_g);
    const std::size_t dk = w.k_g.cols();
    return {scaled_dot_attention(qi, kg, vg, dk, trace, "co.image_to_gene"),
            scaled_dot_attention(qg, ki, vi, dk, trace, "co.gene_to_image")};
}

template <typename Real>
struct DualCrossOutput {
    BasicTensor<Real> image;  // D_IG
    BasicTensor<Real> gene;   // D_GI
};

/// C_IG = softmax(A_IG A_GI^T / sqrt(dk)) A_IG, C_GI symmetric; then
/// D_IG = softmax(C_IG I^T / sqrt(dk)) I and D_GI = softmax(C_GI G^T / sqrt(dk)) G.
template <typename Real>
DualCrossOutput<Real> dual_cross_attention(const BasicTensor<Real>& a_ig, const BasicTensor<Real>& a_gi,
                                           const BasicTensor<Real>& image, const BasicTensor<Real>& gene,
                                           std::size_t key_width, AttentionTrace<Real>* trace = nullptr) {
    if (a_ig.rows() != a_gi.rows())
        throw ShapeError("dual_cross_attention: image and gene token counts must match");
    if (a_ig.cols() != image.cols() || a_gi.cols() != gene.cols())
        throw ShapeError("dual_cross_attention: co-attention width must equal the token width");
    const auto c_ig = scaled_dot_attention(a_ig, a_gi, a_ig, key_width, trace, "dca.c_ig");
    const auto c_gi = scaled_dot_attention(a_gi, a_ig, a_gi, key_width, trace, "dca.c_gi");
    return {scaled_dot_attention(c_ig, image, image, key_width, trace, "dca.d_ig"),
            scaled_dot_attention(c_gi, gene, gene, key_width, trace, "dca.d_gi")};
}

template <typename Real>
BasicTensor<Real> multi_head_self_attention(const BasicTensor<Real>& x, const EncoderLayer<Real>& l,
                                            std::size_t n_heads, AttentionTrace<Real>* trace = nullptr) {
    const std::size_t d = x.cols();
    if (n_heads == 0 || d % n_heads != 0)
        throw ValidationError("multi_head_self_attention: width " + std::to_string(d) + " not divisible by " +
                              std::to_string(n_heads) + " heads");
    const std::size_t hd = d / n_heads;
    const auto q = matmul(x, l.wq), k = matmul(x, l.wk), v = matmul(x, l.wv);
    std::vector<BasicTensor<Real>> heads;
    for (std::size_t h = 0; h < n_heads; ++h) {
        const auto lo = h * hd, hi = lo + hd;
        heads.push_back(scaled_dot_attention(slice_cols(q, lo, hi), slice_cols(k, lo, hi), slice_cols(v, lo, hi), hd,
                                             trace, "encoder.head"));
    }
    const auto merged = n_heads == 1 ? heads.front() : concat_cols(heads);
    return linear(merged, l.wo, l.bo);
}

/// max(0, x W1 + b1) W2 + b2.
template <typename Real>
BasicTensor<Real> position_wise_ffn(const BasicTensor<Real>& x, const EncoderLayer<Real>& l) {
    return linear(relu(linear(x, l.ffn_w1, l.ffn_b1)), l.ffn_w2, l.ffn_b2);
}

/// Post-norm layers: x = LN(x + MHA(x)); x = LN(x + FFN(x)).
template <typename Real>
BasicTensor<Real> transformer_encode(const BasicTensor<Real>& tokens, std::span<const EncoderLayer<Real>> layers,
                                     std::size_t n_heads, AttentionTrace<Real>* trace = nullptr) {
    auto x = tokens;
    for (const auto& l : layers) {
        x = layer_norm(add(x, multi_head_self_attention(x, l, n_heads, trace)), l.ln1_g, l.ln1_b);
        x = layer_norm(add(x, position_wise_ffn(x, l)), l.ln2_g, l.ln2_b);
    }
    return x;
}

/// Mean over tokens, FC1 -> FC2 -> [.|clinical] -> FC3 -> FC4 -> linear risk.
template <typename Real>
BasicTensor<Real> risk_head(const BasicTensor<Real>& encoded, const BasicTensor<Real>& clinical,
                            const RiskHeadWeights<Real>& w) {
    const std::size_t clinical_dim = w.fc3_w.rows() - w.fc2_w.cols();
    if (clinical.numel() != clinical_dim)
        throw ShapeError("risk_head: expected " + std::to_string(clinical_dim) + " clinical values, got " +
                         std::to_string(clinical.numel()));
    auto h = mean_rows(encoded);
    h = relu(linear(h, w.fc1_w, w.fc1_b));
    h = relu(linear(h, w.fc2_w, w.fc2_b));
    h = concat_cols<Real>({h, reshape(clinical, Shape{1, clinical_dim})});
    h = relu(linear(h, w.fc3_w, w.fc3_b));
    h = relu(linear(h, w.fc4_w, w.fc4_b));
    return linear(h, w.out_w, w.out_b);
}

// ---------------------------------------------------------------------------
// Full stage-2 forward

template <typename Real>
BasicTensor<Real> image_tokens(const BasicTensor<Real>& embedding, const ModelParams<Real>& m, const FusionConfig& c) {
    return reshape(linear(embedding, m.image_tok_w, m.image_tok_b), Shape{c.n_image_tokens, c.d_model});
}

template <typename Real>
BasicTensor<Real> gene_tokens(std::span<const double> genes, const ModelParams<Real>& m, const FusionConfig& c) {
    if (genes.size() != c.gene_dim)
        throw ShapeError("gene vector has " + std::to_string(genes.size()) + " values, config expects " +
                         std::to_string(c.gene_dim));
    std::vector<Real> g(genes.size());
    for (std::size_t i = 0; i < g.size(); ++i)
        g[i] = c.standardize_genes ? (static_cast<Real>(genes[i]) - m.gene_mean[i]) / m.gene_scale[i]
                                   : static_cast<Real>(genes[i]);
    const std::size_t n = g.size();
    const BasicTensor<Real> row(Shape{1, n}, std::move(g));
    return reshape(linear(row, m.gene_tok_w, m.gene_tok_b), Shape{c.n_gene_tokens, c.d_model});
}

/// Risk for one patient given its latent patch matrix (P x latent_dim).
template <typename Real>
BasicTensor<Real> forward_from_latent(const BasicTensor<Real>& latent, std::span<const double> genes,
                                      std::span<const double> clinical, const ModelParams<Real>& m,
                                      const FusionConfig& c, AttentionTrace<Real>* trace = nullptr) {
    if (latent.cols() != c.latent_dim) throw ShapeError("forward: latent width does not match config");
    if (clinical.size() != c.clinical_dim)
        throw ShapeError("forward: expected " + std::to_string(c.clinical_dim) + " clinical values");
    const auto embedding = self_attention_pool(latent, m.pool, trace);
    const auto img = image_tokens(embedding, m, c);
    BasicTensor<Real> fused = img;
    if (c.use_genes) {
        const auto gen = gene_tokens(genes, m, c);
        const auto co = co_attention(img, gen, m.co, trace);
        const auto dca = dual_cross_attention(co.image_to_gene, co.gene_to_image, img, gen, c.key_dim(), trace);
        fused = concat_rows<Real>({dca.image, dca.gene});
    }
    const auto encoded = transformer_encode<Real>(fused, m.layers, c.n_heads, trace);
    std::vector<Real> clin(c.clinical_dim, Real(0));
    if (c.use_clinical)
        for (std::size_t i = 0; i < clin.size(); ++i) clin[i] = static_cast<Real>(clinical[i]);
    const std::size_t n_clin = clin.size();
    return risk_head(encoded, BasicTensor<Real>(Shape{1, n_clin}, std::move(clin)), m.head);
}

/// Deterministic latent (z = mu) for one patient's patches.
template <typename Real>
BasicTensor<Real> patient_latent(const PatientBundle& b, const VaeParams<Real>& vae, const FusionConfig& c) {
    if (b.patches.cols != c.concat_dim())
        throw ShapeError("patient '" + b.id + "': patch width " + std::to_string(b.patches.cols) + " != " +
                         std::to_string(c.concat_dim()));
    return vae_encode_mean(to_tensor<Real>(b.patches), vae).detach();
}

template <typename Real>
BasicTensor<Real> forward(const PatientBundle& b, const VaeParams<Real>& vae, const ModelParams<Real>& m,
                          const FusionConfig& c, AttentionTrace<Real>* trace = nullptr) {
    return forward_from_latent(patient_latent(b, vae, c), b.genes, b.clinical, m, c, trace);
}

/// Fits per-gene mean and scale on the given patients and stores them in `m`.
template <typename Real>
void fit_gene_standardizer(ModelParams<Real>& m, std::span<const PatientBundle> train, const FusionConfig& c) {
    std::vector<Real> mu(c.gene_dim, Real(0)), sd(c.gene_dim, Real(0));
    if (!train.empty()) {
        for (const auto& b : train)
            for (std::size_t g = 0; g < c.gene_dim; ++g) mu[g] += static_cast<Real>(b.genes[g]);
        for (auto& v : mu) v /= Real(train.size());
        for (const auto& b : train)
            for (std::size_t g = 0; g < c.gene_dim; ++g) {
                const Real d = static_cast<Real>(b.genes[g]) - mu[g];
                sd[g] += d * d;
            }
    }
    for (auto& v : sd) {
        v = train.empty() ? Real(1) : std::sqrt(v / Real(train.size()));
        if (!(v > Real(1e-8))) v = Real(1);
    }
    m.gene_mean = BasicTensor<Real>(Shape{1, c.gene_dim}, std::move(mu));
    m.gene_scale = BasicTensor<Real>(Shape{1, c.gene_dim}, std::move(sd));
}

}  // namespace biofusion
