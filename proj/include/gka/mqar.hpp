#pragma once

// MQAR synthetic task and a 2-layer toy sequence model with manual
// reverse-mode gradients. The model is embedding -> 2 x [RMSNorm -> mixer ->
// residual -> RMSNorm -> MLP -> residual] -> RMSNorm -> head, where the mixer
// is the GKA layer or one of the GLA / DeltaNet / Gated DeltaNet baselines.

#include <cstdio>
#include <cstring>
#include <fstream>
#include <memory>
#include <numeric>
#include <string>

#include <json.hpp>

#include "backward.hpp"
#include "kalman.hpp"

namespace gka {

// ---------------------------------------------------------------------------
// Task data
// ---------------------------------------------------------------------------

// Zoology-style MQAR: key tokens and value tokens come from disjoint halves of
// the vocabulary; N_kv distinct (key, value) pairs are listed first, then
// every remaining position queries one of the listed keys.
struct MqarConfig {
    int vocab = 64;
    int n_kv = 4;
    int seq_len = 64;
    int d_model = 64;
    int heads = 2;
    uint64_t seed = 0;

    int key_vocab() const { return vocab / 2; }
    void validate() const {
        if (vocab < 4 || vocab % 2 != 0) throw std::invalid_argument("MqarConfig: vocab must be even, >= 4");
        if (n_kv < 1 || n_kv > key_vocab()) throw std::invalid_argument("MqarConfig: n_kv exceeds key vocabulary");
        if (seq_len < 2 * n_kv + 1) throw std::invalid_argument("MqarConfig: sequence too short for n_kv pairs");
        if (d_model < 1 || heads < 1 || d_model % heads != 0)
            throw std::invalid_argument("MqarConfig: d_model must be divisible by heads");
    }
};

struct MqarBatch {
    int B = 0, T = 0;
    std::vector<int> tokens;   // B*T
    std::vector<int> targets;  // B*T, -1 outside query positions
};

inline MqarBatch generate_mqar(const MqarConfig& cfg, SeededRng& rng, int batch_size) {
    cfg.validate();
    check(batch_size > 0, "generate_mqar: batch_size must be positive");
    MqarBatch out;
    out.B = batch_size;
    out.T = cfg.seq_len;
    out.tokens.assign(static_cast<size_t>(batch_size) * cfg.seq_len, 0);
    out.targets.assign(out.tokens.size(), -1);

    const int kv = cfg.key_vocab();
    std::vector<int> pool(kv);
    for (int b = 0; b < batch_size; ++b) {
        // Distinct keys via partial Fisher-Yates over the key vocabulary.
        std::iota(pool.begin(), pool.end(), 0);
        std::vector<int> keys(cfg.n_kv), vals(cfg.n_kv);
        for (int i = 0; i < cfg.n_kv; ++i) {
            const int j = i + static_cast<int>(rng.below(static_cast<uint64_t>(kv - i)));
            std::swap(pool[i], pool[j]);
            keys[i] = pool[i];
            vals[i] = kv + static_cast<int>(rng.below(static_cast<uint64_t>(cfg.vocab - kv)));
        }
        const size_t base = static_cast<size_t>(b) * cfg.seq_len;
        for (int i = 0; i < cfg.n_kv; ++i) {
            out.tokens[base + 2 * i] = keys[i];
            out.tokens[base + 2 * i + 1] = vals[i];
        }
        for (int t = 2 * cfg.n_kv; t < cfg.seq_len; ++t) {
            const int pick = static_cast<int>(rng.below(static_cast<uint64_t>(cfg.n_kv)));
            out.tokens[base + t] = keys[pick];
            out.targets[base + t] = vals[pick];
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Parameter storage
// ---------------------------------------------------------------------------

struct ParamStore {
    struct Entry {
        std::string name;
        size_t offset = 0, size = 0;
    };
    Vector data, grad, first_moment, second_moment;
    std::vector<Entry> entries;

    size_t add(const std::string& name, size_t size) {
        const size_t off = data.size();
        entries.push_back({name, off, size});
        data.resize(off + size, 0.0);
        return off;
    }
    void finalize() {
        grad.assign(data.size(), 0.0);
        first_moment.assign(data.size(), 0.0);
        second_moment.assign(data.size(), 0.0);
    }
    double* p(size_t off) { return data.data() + off; }
    const double* p(size_t off) const { return data.data() + off; }
    double* g(size_t off) { return grad.data() + off; }
};

enum class MixerKind { Gka, Gla, DeltaNet, Gdn };

inline const char* mixer_name(MixerKind m) {
    switch (m) {
        case MixerKind::Gka: return "gka";
        case MixerKind::Gla: return "gla";
        case MixerKind::DeltaNet: return "deltanet";
        case MixerKind::Gdn: return "gdn";
    }
    return "?";
}

inline MixerKind mixer_from_name(const std::string& s) {
    if (s == "gka") return MixerKind::Gka;
    if (s == "gla") return MixerKind::Gla;
    if (s == "deltanet") return MixerKind::DeltaNet;
    if (s == "gdn") return MixerKind::Gdn;
    throw std::invalid_argument("unknown mixer: " + s);
}

struct ModelConfig {
    int vocab = 64;
    int d_model = 64;
    int heads = 2;
    int blocks = 2;
    MixerKind mixer = MixerKind::Gka;
    LayerConfig layer;            // GKA solver settings; head_dim filled in
    double gate_bias_init = 2.9444389791664403;  // sigmoid -> 0.95
    double alpha_bias_init = 0.0;                // GKA alpha / GDN-DeltaNet beta logit bias
    bool fix_alpha_zero = false;  // GKA ablation: alpha pinned to 0
    uint64_t init_seed = 1;

    int head_dim() const { return d_model / heads; }
    bool uses_gamma() const { return mixer != MixerKind::DeltaNet; }
    bool uses_second_gate() const { return mixer != MixerKind::Gla; }  // alpha or beta
};

struct BlockParams {
    size_t rms1, shift, wq, wk, wv, wo, wg, bg, wa, ba, rms2, w1, b1, w2, b2;
};

struct ToyModel {
    ModelConfig cfg;
    ParamStore ps;
    size_t emb = 0, rms_f = 0, head = 0;
    std::vector<BlockParams> blocks;

    explicit ToyModel(const ModelConfig& c) : cfg(c) {
        const int E = cfg.d_model, V = cfg.vocab, Hn = cfg.heads, F = 4 * E;
        emb = ps.add("embedding", static_cast<size_t>(V) * E);
        for (int l = 0; l < cfg.blocks; ++l) {
            const std::string p = "block" + std::to_string(l) + ".";
            BlockParams bp{};
            bp.rms1 = ps.add(p + "rms1", E);
            bp.shift = ps.add(p + "shift", E);
            bp.wq = ps.add(p + "wq", static_cast<size_t>(E) * E);
            bp.wk = ps.add(p + "wk", static_cast<size_t>(E) * E);
            bp.wv = ps.add(p + "wv", static_cast<size_t>(E) * E);
            bp.wo = ps.add(p + "wo", static_cast<size_t>(E) * E);
            bp.wg = ps.add(p + "wg", static_cast<size_t>(E) * Hn);
            bp.bg = ps.add(p + "bg", Hn);
            bp.wa = ps.add(p + "wa", static_cast<size_t>(E) * Hn);
            bp.ba = ps.add(p + "ba", Hn);
            bp.rms2 = ps.add(p + "rms2", E);
            bp.w1 = ps.add(p + "w1", static_cast<size_t>(E) * F);
            bp.b1 = ps.add(p + "b1", F);
            bp.w2 = ps.add(p + "w2", static_cast<size_t>(F) * E);
            bp.b2 = ps.add(p + "b2", E);
            blocks.push_back(bp);
        }
        rms_f = ps.add("rms_f", E);
        head = ps.add("head", static_cast<size_t>(E) * V);
        ps.finalize();
        init_params();
    }

    void init_params() {
        SeededRng rng(cfg.init_seed);
        const int E = cfg.d_model, V = cfg.vocab, Hn = cfg.heads, F = 4 * E;
        auto fill = [&](size_t off, size_t n, double scale) {
            for (size_t i = 0; i < n; ++i) ps.data[off + i] = scale * rng.normal();
        };
        auto ones = [&](size_t off, size_t n) {
            for (size_t i = 0; i < n; ++i) ps.data[off + i] = 1.0;
        };
        fill(emb, static_cast<size_t>(V) * E, 1.0);
        for (const BlockParams& bp : blocks) {
            ones(bp.rms1, E);
            ones(bp.rms2, E);
            // Half-and-half token shift: the mixer branch starts with equal
            // access to the current and previous token.
            for (int i = 0; i < E; ++i) ps.data[bp.shift + i] = 0.5;
            const double se = 1.0 / std::sqrt(static_cast<double>(E));
            fill(bp.wq, static_cast<size_t>(E) * E, se);
            fill(bp.wk, static_cast<size_t>(E) * E, se);
            fill(bp.wv, static_cast<size_t>(E) * E, se);
            fill(bp.wo, static_cast<size_t>(E) * E, se);
            fill(bp.wg, static_cast<size_t>(E) * Hn, se);
            fill(bp.wa, static_cast<size_t>(E) * Hn, se);
            for (int i = 0; i < Hn; ++i) ps.data[bp.bg + i] = cfg.gate_bias_init;
            for (int i = 0; i < Hn; ++i) ps.data[bp.ba + i] = cfg.alpha_bias_init;
            fill(bp.w1, static_cast<size_t>(E) * F, se);
            fill(bp.w2, static_cast<size_t>(F) * E, 1.0 / std::sqrt(static_cast<double>(F)));
        }
        ones(rms_f, E);
        // Zero-initialized readout: the untrained model predicts the uniform
        // distribution and the first update only touches the head.
        for (size_t i = 0; i < static_cast<size_t>(E) * V; ++i) ps.data[head + i] = 0.0;
    }

    size_t param_count() const { return ps.data.size(); }
};

// ---------------------------------------------------------------------------
// Forward / backward primitives
// ---------------------------------------------------------------------------

namespace toy {

constexpr double kRmsEps = 1e-6;
constexpr double kNormEps = 1e-8;

// out[j] = sum_i x[i] W(i, j) + b[j]; W row-major (in_dim x out_dim).
inline void affine(const double* w, const double* b, const double* x, int in_dim, int out_dim, double* out) {
    for (int j = 0; j < out_dim; ++j) out[j] = b ? b[j] : 0.0;
    for (int i = 0; i < in_dim; ++i) {
        const double xi = x[i];
        if (xi == 0.0) continue;
        const double* row = w + static_cast<size_t>(i) * out_dim;
        for (int j = 0; j < out_dim; ++j) out[j] += xi * row[j];
    }
}

inline void affine_backward(const double* w, const double* x, const double* dout, int in_dim, int out_dim,
                            double* dw, double* db, double* dx) {
    if (db)
        for (int j = 0; j < out_dim; ++j) db[j] += dout[j];
    for (int i = 0; i < in_dim; ++i) {
        const double* row = w + static_cast<size_t>(i) * out_dim;
        double* drow = dw + static_cast<size_t>(i) * out_dim;
        double acc = 0.0;
        for (int j = 0; j < out_dim; ++j) {
            drow[j] += x[i] * dout[j];
            acc += row[j] * dout[j];
        }
        if (dx) dx[i] += acc;
    }
}

inline void rmsnorm(const double* s, const double* x, int n, double* y, double* inv_rms_out) {
    double m = 0.0;
    for (int i = 0; i < n; ++i) m += x[i] * x[i];
    const double inv = 1.0 / std::sqrt(m / n + kRmsEps);
    for (int i = 0; i < n; ++i) y[i] = s[i] * x[i] * inv;
    *inv_rms_out = inv;
}

inline void rmsnorm_backward(const double* s, const double* x, double inv_rms, const double* dy, int n,
                             double* ds, double* dx) {
    double corr = 0.0;
    for (int i = 0; i < n; ++i) corr += dy[i] * s[i] * x[i];
    corr *= inv_rms * inv_rms * inv_rms / n;
    for (int i = 0; i < n; ++i) {
        ds[i] += dy[i] * x[i] * inv_rms;
        dx[i] += dy[i] * s[i] * inv_rms - x[i] * corr;
    }
}

inline void l2norm(const double* x, int n, double* y, double* inv_norm_out) {
    double m = kNormEps;
    for (int i = 0; i < n; ++i) m += x[i] * x[i];
    const double inv = 1.0 / std::sqrt(m);
    for (int i = 0; i < n; ++i) y[i] = x[i] * inv;
    *inv_norm_out = inv;
}

inline void l2norm_backward(const double* x, double inv_norm, const double* dy, int n, double* dx) {
    double xd = 0.0;
    for (int i = 0; i < n; ++i) xd += x[i] * dy[i];
    xd *= inv_norm * inv_norm * inv_norm;
    for (int i = 0; i < n; ++i) dx[i] += dy[i] * inv_norm - x[i] * xd;
}

inline double softplus(double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); }
inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace toy

// Per-step caches kept alive between forward and backward.
struct ToyActivations {
    int B = 0, T = 0;
    Vector x_emb;                             // B*T*E
    struct BlockCache {
        Vector normed1, inv_rms1;             // B*T*E, B*T
        Vector shifted;                       // B*T*E, token-shifted mixer input
        Vector q_raw, k_raw, v_proj;          // B*T*E (pre-normalization q/k)
        Vector q_inv, k_inv;                  // B*H*T inverse norms (per head)
        Vector g_logit, a_logit;              // B*T*H
        SequenceBatch sb;                     // mixer inputs (B, H, T, D)
        ForwardState gka_state;               // GKA only
        std::vector<Matrix> baseline_states;  // baselines: (b*H*T) dense S_t
        Vector mixer_y;                       // B*H*T*D (head-major mixer output)
        Vector mixer_cat;                     // B*T*E, concatenated heads
        Vector after_wo;                      // B*T*E
        Vector x_mid;                         // residual after mixer
        Vector normed2, inv_rms2;
        Vector hidden;                        // B*T*4E, post-ReLU
        Vector pre_act;                       // B*T*4E
        Vector x_out;                         // residual after MLP
    };
    std::vector<BlockCache> blocks;
    Vector normed_f, inv_rms_f;
    Vector logits;                            // B*T*V
};

struct NanLossError : std::runtime_error {
    explicit NanLossError(const std::string& msg) : std::runtime_error(msg) {}
};

inline void toy_forward(ToyModel& model, const MqarBatch& batch, ToyActivations& acts) {
    const ModelConfig& cfg = model.cfg;
    const int B = batch.B, T = batch.T, E = cfg.d_model, Hn = cfg.heads, D = cfg.head_dim();
    const int F = 4 * E, V = cfg.vocab;
    ParamStore& ps = model.ps;

    acts.B = B;
    acts.T = T;
    acts.x_emb.assign(static_cast<size_t>(B) * T * E, 0.0);
    for (int b = 0; b < B; ++b)
        for (int t = 0; t < T; ++t) {
            const int tok = batch.tokens[static_cast<size_t>(b) * T + t];
            check(tok >= 0 && tok < V, "toy_forward: token out of range");
            std::memcpy(&acts.x_emb[(static_cast<size_t>(b) * T + t) * E],
                        ps.p(model.emb + static_cast<size_t>(tok) * E), sizeof(double) * E);
        }

    acts.blocks.assign(cfg.blocks, {});
    const Vector* x_in = &acts.x_emb;
    for (int l = 0; l < cfg.blocks; ++l) {
        const BlockParams& bp = model.blocks[l];
        ToyActivations::BlockCache& bc = acts.blocks[l];
        const size_t n_tok = static_cast<size_t>(B) * T;
        bc.normed1.assign(n_tok * E, 0.0);
        bc.inv_rms1.assign(n_tok, 0.0);
        bc.shifted.assign(n_tok * E, 0.0);
        bc.q_raw.assign(n_tok * E, 0.0);
        bc.k_raw.assign(n_tok * E, 0.0);
        bc.v_proj.assign(n_tok * E, 0.0);
        bc.g_logit.assign(n_tok * Hn, 0.0);
        bc.a_logit.assign(n_tok * Hn, 0.0);
        bc.q_inv.assign(static_cast<size_t>(B) * Hn * T, 0.0);
        bc.k_inv.assign(bc.q_inv.size(), 0.0);
        bc.sb = SequenceBatch(B, Hn, T, D);

        parallel_for(B, [&](int b) {
            for (int t = 0; t < T; ++t) {
                const size_t tok = static_cast<size_t>(b) * T + t;
                const double* x = &(*x_in)[tok * E];
                toy::rmsnorm(ps.p(bp.rms1), x, E, &bc.normed1[tok * E], &bc.inv_rms1[tok]);
                // Token shift: per-channel causal blend of the current and
                // previous normalized token feeding the mixer projections.
                const double* sft = ps.p(bp.shift);
                const double* cur = &bc.normed1[tok * E];
                const double* prev = t > 0 ? &bc.normed1[(tok - 1) * E] : nullptr;
                double* sh = &bc.shifted[tok * E];
                for (int i = 0; i < E; ++i)
                    sh[i] = cur[i] + sft[i] * ((prev ? prev[i] : 0.0) - cur[i]);
                const double* nx = sh;
                toy::affine(ps.p(bp.wq), nullptr, nx, E, E, &bc.q_raw[tok * E]);
                toy::affine(ps.p(bp.wk), nullptr, nx, E, E, &bc.k_raw[tok * E]);
                toy::affine(ps.p(bp.wv), nullptr, nx, E, E, &bc.v_proj[tok * E]);
                toy::affine(ps.p(bp.wg), ps.p(bp.bg), nx, E, Hn, &bc.g_logit[tok * Hn]);
                toy::affine(ps.p(bp.wa), ps.p(bp.ba), nx, E, Hn, &bc.a_logit[tok * Hn]);
                for (int h = 0; h < Hn; ++h) {
                    const size_t hi = bc.sb.idx(b, h, t);
                    if (cfg.layer.normalize_qk) {
                        toy::l2norm(&bc.q_raw[tok * E + static_cast<size_t>(h) * D], D,
                                    &bc.sb.q[hi * D], &bc.q_inv[hi]);
                        toy::l2norm(&bc.k_raw[tok * E + static_cast<size_t>(h) * D], D,
                                    &bc.sb.k[hi * D], &bc.k_inv[hi]);
                    } else {
                        std::memcpy(&bc.sb.q[hi * D], &bc.q_raw[tok * E + static_cast<size_t>(h) * D],
                                    sizeof(double) * D);
                        std::memcpy(&bc.sb.k[hi * D], &bc.k_raw[tok * E + static_cast<size_t>(h) * D],
                                    sizeof(double) * D);
                    }
                    std::memcpy(&bc.sb.v[hi * D], &bc.v_proj[tok * E + static_cast<size_t>(h) * D],
                                sizeof(double) * D);
                    const double gl = bc.g_logit[tok * Hn + h];
                    bc.sb.log_gate[hi] = cfg.uses_gamma() ? -toy::softplus(-gl) : 0.0;
                    bc.sb.alpha_logit[hi] = cfg.fix_alpha_zero ? -40.0 : bc.a_logit[tok * Hn + h];
                }
            }
        });

        bc.mixer_y.assign(static_cast<size_t>(B) * Hn * T * D, 0.0);
        if (cfg.mixer == MixerKind::Gka) {
            LayerConfig lc = cfg.layer;
            lc.head_dim = D;
            bc.gka_state = forward_chunkwise(bc.sb, lc);
            bc.mixer_y = layer_outputs(bc.gka_state);
        } else {
            bc.baseline_states.assign(static_cast<size_t>(B) * Hn * T, Matrix());
            parallel_for(B * Hn, [&](int bh) {
                const int b = bh / Hn, h = bh % Hn;
                Matrix s(D, D);
                for (int t = 0; t < T; ++t) {
                    const size_t hi = bc.sb.idx(b, h, t);
                    const size_t tok = static_cast<size_t>(b) * T + t;
                    const Vector kv = bc.sb.vec(bc.sb.k, b, h, t);
                    const Vector vv = bc.sb.vec(bc.sb.v, b, h, t);
                    const double gamma =
                        cfg.uses_gamma() ? toy::sigmoid(bc.g_logit[tok * Hn + h]) : 1.0;
                    const double beta =
                        cfg.uses_second_gate() ? toy::sigmoid(bc.a_logit[tok * Hn + h]) : 1.0;
                    switch (cfg.mixer) {
                        case MixerKind::Gla: gla_step(s, kv, vv, gamma, 1.0); break;
                        case MixerKind::DeltaNet: deltanet_step(s, kv, vv, beta); break;
                        case MixerKind::Gdn: gdn_step(s, kv, vv, gamma, beta); break;
                        default: break;
                    }
                    bc.baseline_states[static_cast<size_t>(bh) * T + t] = s;
                    Vector y = matvec(s, bc.sb.vec(bc.sb.q, b, h, t));
                    std::memcpy(&bc.mixer_y[hi * D], y.data(), sizeof(double) * D);
                }
            });
        }

        bc.mixer_cat.assign(n_tok * E, 0.0);
        bc.after_wo.assign(n_tok * E, 0.0);
        bc.x_mid.assign(n_tok * E, 0.0);
        bc.normed2.assign(n_tok * E, 0.0);
        bc.inv_rms2.assign(n_tok, 0.0);
        bc.pre_act.assign(n_tok * F, 0.0);
        bc.hidden.assign(n_tok * F, 0.0);
        bc.x_out.assign(n_tok * E, 0.0);

        parallel_for(B, [&](int b) {
            for (int t = 0; t < T; ++t) {
                const size_t tok = static_cast<size_t>(b) * T + t;
                for (int h = 0; h < Hn; ++h)
                    std::memcpy(&bc.mixer_cat[tok * E + static_cast<size_t>(h) * D],
                                &bc.mixer_y[bc.sb.idx(b, h, t) * static_cast<size_t>(D)], sizeof(double) * D);
                toy::affine(ps.p(bp.wo), nullptr, &bc.mixer_cat[tok * E], E, E, &bc.after_wo[tok * E]);
                for (int i = 0; i < E; ++i)
                    bc.x_mid[tok * E + i] = (*x_in)[tok * E + i] + bc.after_wo[tok * E + i];
                toy::rmsnorm(ps.p(bp.rms2), &bc.x_mid[tok * E], E, &bc.normed2[tok * E], &bc.inv_rms2[tok]);
                toy::affine(ps.p(bp.w1), ps.p(bp.b1), &bc.normed2[tok * E], E, F, &bc.pre_act[tok * F]);
                for (int i = 0; i < F; ++i)
                    bc.hidden[tok * F + i] = bc.pre_act[tok * F + i] > 0.0 ? bc.pre_act[tok * F + i] : 0.0;
                toy::affine(ps.p(bp.w2), ps.p(bp.b2), &bc.hidden[tok * F], F, E, &bc.x_out[tok * E]);
                for (int i = 0; i < E; ++i) bc.x_out[tok * E + i] += bc.x_mid[tok * E + i];
            }
        });
        x_in = &bc.x_out;
    }

    const size_t n_tok = static_cast<size_t>(B) * T;
    acts.normed_f.assign(n_tok * E, 0.0);
    acts.inv_rms_f.assign(n_tok, 0.0);
    acts.logits.assign(n_tok * V, 0.0);
    parallel_for(B, [&](int b) {
        for (int t = 0; t < T; ++t) {
            const size_t tok = static_cast<size_t>(b) * T + t;
            toy::rmsnorm(ps.p(model.rms_f), &(*x_in)[tok * E], E, &acts.normed_f[tok * E],
                         &acts.inv_rms_f[tok]);
            toy::affine(ps.p(model.head), nullptr, &acts.normed_f[tok * E], E, V, &acts.logits[tok * V]);
        }
    });
}

// Cross-entropy over query positions; fills dlogits (callee-allocated) for the
// backward pass. Returns (loss, accuracy).
inline std::pair<double, double> toy_loss(const ToyActivations& acts, const MqarBatch& batch, int vocab,
                                          Vector* dlogits) {
    int n_query = 0;
    for (int v : batch.targets)
        if (v >= 0) ++n_query;
    check(n_query > 0, "toy_loss: no query positions");
    if (dlogits) dlogits->assign(acts.logits.size(), 0.0);

    double loss = 0.0;
    int correct = 0;
    for (size_t tok = 0; tok < batch.targets.size(); ++tok) {
        const int target = batch.targets[tok];
        if (target < 0) continue;
        const double* lg = &acts.logits[tok * vocab];
        double mx = lg[0];
        int arg = 0;
        for (int v = 1; v < vocab; ++v)
            if (lg[v] > mx) {
                mx = lg[v];
                arg = v;
            }
        double z = 0.0;
        for (int v = 0; v < vocab; ++v) z += std::exp(lg[v] - mx);
        loss += std::log(z) - (lg[target] - mx);
        if (arg == target) ++correct;
        if (dlogits) {
            double* dl = &(*dlogits)[tok * vocab];
            for (int v = 0; v < vocab; ++v) dl[v] = std::exp(lg[v] - mx) / z / n_query;
            dl[target] -= 1.0 / n_query;
        }
    }
    return {loss / n_query, static_cast<double>(correct) / n_query};
}

inline void toy_backward(ToyModel& model, const MqarBatch& batch, ToyActivations& acts,
                         const Vector& dlogits) {
    const ModelConfig& cfg = model.cfg;
    const int B = batch.B, T = batch.T, E = cfg.d_model, Hn = cfg.heads, D = cfg.head_dim();
    const int F = 4 * E, V = cfg.vocab;
    ParamStore& ps = model.ps;
    const size_t n_tok = static_cast<size_t>(B) * T;

    const Vector* x_last = cfg.blocks > 0 ? &acts.blocks.back().x_out : &acts.x_emb;
    Vector dx(n_tok * E, 0.0);
    for (size_t tok = 0; tok < n_tok; ++tok) {
        Vector dnormed(E, 0.0);
        toy::affine_backward(ps.p(model.head), &acts.normed_f[tok * E], &dlogits[tok * V], E, V,
                             ps.g(model.head), nullptr, dnormed.data());
        toy::rmsnorm_backward(ps.p(model.rms_f), &(*x_last)[tok * E], acts.inv_rms_f[tok], dnormed.data(),
                              E, ps.g(model.rms_f), &dx[tok * E]);
    }

    for (int l = cfg.blocks - 1; l >= 0; --l) {
        const BlockParams& bp = model.blocks[l];
        ToyActivations::BlockCache& bc = acts.blocks[l];
        const Vector* x_in = l > 0 ? &acts.blocks[l - 1].x_out : &acts.x_emb;

        Vector dx_mid(n_tok * E, 0.0);
        Vector dmixer_cat(n_tok * E, 0.0);
        for (size_t tok = 0; tok < n_tok; ++tok) {
            // MLP branch: dx_out feeds both residual and the MLP input.
            for (int i = 0; i < E; ++i) dx_mid[tok * E + i] += dx[tok * E + i];
            Vector dhidden(F, 0.0), dpre(F, 0.0), dnormed2(E, 0.0);
            toy::affine_backward(ps.p(bp.w2), &bc.hidden[tok * F], &dx[tok * E], F, E, ps.g(bp.w2),
                                 ps.g(bp.b2), dhidden.data());
            for (int i = 0; i < F; ++i) dpre[i] = bc.pre_act[tok * F + i] > 0.0 ? dhidden[i] : 0.0;
            toy::affine_backward(ps.p(bp.w1), &bc.normed2[tok * E], dpre.data(), E, F, ps.g(bp.w1),
                                 ps.g(bp.b1), dnormed2.data());
            toy::rmsnorm_backward(ps.p(bp.rms2), &bc.x_mid[tok * E], bc.inv_rms2[tok], dnormed2.data(), E,
                                  ps.g(bp.rms2), &dx_mid[tok * E]);
            // Mixer output projection.
            toy::affine_backward(ps.p(bp.wo), &bc.mixer_cat[tok * E], &dx_mid[tok * E], E, E, ps.g(bp.wo),
                                 nullptr, &dmixer_cat[tok * E]);
        }

        // dmixer_cat -> per-head dy -> mixer backward -> dq/dk/dv/dgates.
        Vector dy_mixer(static_cast<size_t>(B) * Hn * T * D, 0.0);
        for (int b = 0; b < B; ++b)
            for (int h = 0; h < Hn; ++h)
                for (int t = 0; t < T; ++t)
                    std::memcpy(&dy_mixer[bc.sb.idx(b, h, t) * static_cast<size_t>(D)],
                                &dmixer_cat[(static_cast<size_t>(b) * T + t) * E + static_cast<size_t>(h) * D],
                                sizeof(double) * D);

        Vector dq_h(dy_mixer.size(), 0.0), dk_h(dy_mixer.size(), 0.0), dv_h(dy_mixer.size(), 0.0);
        Vector dg_logit(n_tok * Hn, 0.0), da_logit(n_tok * Hn, 0.0);

        if (cfg.mixer == MixerKind::Gka) {
            UpstreamGrads up;
            up.dy = dy_mixer;
            GradientBundle gb = backward_chunkwise(bc.gka_state, up);
            dq_h = gb.dq;
            dk_h = gb.dk;
            dv_h = gb.dv;
            for (int b = 0; b < B; ++b)
                for (int h = 0; h < Hn; ++h)
                    for (int t = 0; t < T; ++t) {
                        const size_t tok = static_cast<size_t>(b) * T + t;
                        const size_t hi = bc.sb.idx(b, h, t);
                        const double gl = bc.g_logit[tok * Hn + h];
                        // d log sigmoid(x) / dx = 1 - sigmoid(x)
                        dg_logit[tok * Hn + h] = gb.d_log_gate[hi] * (1.0 - toy::sigmoid(gl));
                        if (!cfg.fix_alpha_zero) da_logit[tok * Hn + h] = gb.d_alpha_logit[hi];
                    }
        } else {
            parallel_for(B * Hn, [&](int bh) {
                const int b = bh / Hn, h = bh % Hn;
                Matrix p(D, D);  // adjoint of S_t
                for (int t = T - 1; t >= 0; --t) {
                    const size_t hi = bc.sb.idx(b, h, t);
                    const size_t tok = static_cast<size_t>(b) * T + t;
                    const Vector kv = bc.sb.vec(bc.sb.k, b, h, t);
                    const Vector vv = bc.sb.vec(bc.sb.v, b, h, t);
                    const Vector qv = bc.sb.vec(bc.sb.q, b, h, t);
                    const Matrix& s_t = bc.baseline_states[static_cast<size_t>(bh) * T + t];
                    const Matrix s_prev = t > 0 ? bc.baseline_states[static_cast<size_t>(bh) * T + t - 1]
                                                : Matrix(D, D);
                    const double gamma =
                        cfg.uses_gamma() ? toy::sigmoid(bc.g_logit[tok * Hn + h]) : 1.0;
                    const double beta =
                        cfg.uses_second_gate() ? toy::sigmoid(bc.a_logit[tok * Hn + h]) : 1.0;

                    Vector dy(dy_mixer.begin() + hi * D, dy_mixer.begin() + (hi + 1) * D);
                    // y_t = S_t q_t.
                    Vector dq = matvec_t(s_t, dy);
                    std::memcpy(&dq_h[hi * D], dq.data(), sizeof(double) * D);
                    detail::add_outer(p, 1.0, dy, qv);

                    Vector sk = matvec(s_prev, kv);
                    Vector pk = matvec(p, kv);
                    Vector ptv = matvec_t(p, vv);
                    Vector dk(D, 0.0), dv(D, 0.0);
                    double dgamma = 0.0, dbeta = 0.0;
                    if (cfg.mixer == MixerKind::Gla) {
                        // S_t = gamma S_{t-1} + v k^T
                        for (int d = 0; d < D; ++d) {
                            dv[d] = pk[d];
                            dk[d] = ptv[d];
                        }
                        dgamma = frobenius_inner(p, s_prev);
                        detail::scale_matrix(p, gamma);
                    } else {
                        // S_t = gamma S_{t-1} (I - beta k k^T) + beta v k^T
                        Vector stpk = matvec_t(s_prev, pk);   // S_{t-1}^T P k
                        Vector pstk = matvec_t(p, sk);        // P^T S_{t-1} k
                        for (int d = 0; d < D; ++d) {
                            dv[d] = beta * pk[d];
                            dk[d] = -gamma * beta * (stpk[d] + pstk[d]) + beta * ptv[d];
                        }
                        if (cfg.uses_gamma()) {
                            dgamma = frobenius_inner(p, s_prev) - beta * dot(pk, sk);
                            dbeta = dot(pk, vv) - gamma * dot(pk, sk);
                        } else {
                            dbeta = dot(pk, vv) - dot(pk, sk);
                        }
                        // dS_{t-1} = gamma P (I - beta k k^T)
                        Vector col = pk;  // P k
                        for (int r = 0; r < D; ++r)
                            for (int c2 = 0; c2 < D; ++c2)
                                p(r, c2) = gamma * (p(r, c2) - beta * col[r] * kv[c2]);
                    }
                    std::memcpy(&dk_h[hi * D], dk.data(), sizeof(double) * D);
                    std::memcpy(&dv_h[hi * D], dv.data(), sizeof(double) * D);
                    if (cfg.uses_gamma()) {
                        const double g = toy::sigmoid(bc.g_logit[tok * Hn + h]);
                        dg_logit[tok * Hn + h] = dgamma * g * (1.0 - g);
                    }
                    if (cfg.uses_second_gate()) {
                        const double a = toy::sigmoid(bc.a_logit[tok * Hn + h]);
                        da_logit[tok * Hn + h] = dbeta * a * (1.0 - a);
                    }
                }
            });
        }

        // Head-split gradients back through qk-normalization and projections.
        Vector dx_new(n_tok * E, 0.0);
        Vector dshifted(n_tok * E, 0.0);
        for (size_t tok = 0; tok < n_tok; ++tok) {
            const int b = static_cast<int>(tok) / T;
            const int t = static_cast<int>(tok) % T;
            Vector dq_raw(E, 0.0), dk_raw(E, 0.0), dv_raw(E, 0.0);
            for (int h = 0; h < Hn; ++h) {
                const size_t hi = bc.sb.idx(b, h, t);
                if (cfg.layer.normalize_qk) {
                    toy::l2norm_backward(&bc.q_raw[tok * E + static_cast<size_t>(h) * D], bc.q_inv[hi],
                                         &dq_h[hi * D], D, &dq_raw[static_cast<size_t>(h) * D]);
                    toy::l2norm_backward(&bc.k_raw[tok * E + static_cast<size_t>(h) * D], bc.k_inv[hi],
                                         &dk_h[hi * D], D, &dk_raw[static_cast<size_t>(h) * D]);
                } else {
                    for (int d = 0; d < D; ++d) {
                        dq_raw[static_cast<size_t>(h) * D + d] = dq_h[hi * D + d];
                        dk_raw[static_cast<size_t>(h) * D + d] = dk_h[hi * D + d];
                    }
                }
                for (int d = 0; d < D; ++d) dv_raw[static_cast<size_t>(h) * D + d] = dv_h[hi * D + d];
            }
            const double* nx = &bc.shifted[tok * E];
            double* dsh = &dshifted[tok * E];
            toy::affine_backward(ps.p(bp.wq), nx, dq_raw.data(), E, E, ps.g(bp.wq), nullptr, dsh);
            toy::affine_backward(ps.p(bp.wk), nx, dk_raw.data(), E, E, ps.g(bp.wk), nullptr, dsh);
            toy::affine_backward(ps.p(bp.wv), nx, dv_raw.data(), E, E, ps.g(bp.wv), nullptr, dsh);
            toy::affine_backward(ps.p(bp.wg), nx, &dg_logit[tok * Hn], E, Hn, ps.g(bp.wg), ps.g(bp.bg),
                                 dsh);
            if (cfg.uses_second_gate() && !cfg.fix_alpha_zero)
                toy::affine_backward(ps.p(bp.wa), nx, &da_logit[tok * Hn], E, Hn, ps.g(bp.wa), ps.g(bp.ba),
                                     dsh);
        }

        // Token shift backward: shifted_t = (1-s) n_t + s n_{t-1}.
        const double* sft = ps.p(bp.shift);
        double* gsft = ps.g(bp.shift);
        for (size_t tok = 0; tok < n_tok; ++tok) {
            const int t = static_cast<int>(tok) % T;
            const double* cur = &bc.normed1[tok * E];
            const double* prev = t > 0 ? &bc.normed1[(tok - 1) * E] : nullptr;
            const double* dsh = &dshifted[tok * E];
            const double* dsh_next = t + 1 < T ? &dshifted[(tok + 1) * E] : nullptr;
            Vector dnormed(E, 0.0);
            for (int i = 0; i < E; ++i) {
                gsft[i] += ((prev ? prev[i] : 0.0) - cur[i]) * dsh[i];
                dnormed[i] = (1.0 - sft[i]) * dsh[i] + (dsh_next ? sft[i] * dsh_next[i] : 0.0);
            }
            toy::rmsnorm_backward(ps.p(bp.rms1), &(*x_in)[tok * E], bc.inv_rms1[tok], dnormed.data(), E,
                                  ps.g(bp.rms1), &dx_new[tok * E]);
            for (int i = 0; i < E; ++i) dx_new[tok * E + i] += dx_mid[tok * E + i];  // residual
        }
        dx = std::move(dx_new);
    }

    for (size_t tok = 0; tok < n_tok; ++tok) {
        const int token = batch.tokens[tok];
        double* ge = ps.g(model.emb + static_cast<size_t>(token) * E);
        for (int i = 0; i < E; ++i) ge[i] += dx[tok * E + i];
    }
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct TrainConfig {
    std::vector<double> learning_rates{1e-4, 4.64e-4, 2.15e-3, 1e-2};
    int steps = 400;
    int batch_size = 32;
    int eval_sequences = 2048;
    int eval_batch = 64;
    double clip_norm = 1.0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    uint64_t seed = 0;
    bool fixed_batch = false;  // overfit a single batch (smoke tests)

    void validate() const {
        for (double lr : learning_rates)
            if (lr < 1e-4 - 1e-12 || lr > 1e-2 + 1e-12)
                throw std::invalid_argument("TrainConfig: learning rate outside [1e-4, 1e-2]");
        if (steps < 1 || batch_size < 1) throw std::invalid_argument("TrainConfig: bad steps/batch");
    }
};

struct TrainResult {
    double accuracy = 0.0;
    double final_loss = 0.0;
    bool diverged = false;
    std::string diagnostics;
    Vector grad_norms;           // per-step pre-clip global norms
    double median_grad_norm = 0.0;
    int spike_count = 0;         // steps with norm > 10x median
};

// Adam update with bias correction on both moments.
inline void optimizer_step(ParamStore& ps, double lr, double beta1, double beta2, double eps,
                           int step_index) {
    const double corr1 = 1.0 - std::pow(beta1, step_index);
    const double corr2 = 1.0 - std::pow(beta2, step_index);
    for (size_t i = 0; i < ps.data.size(); ++i) {
        const double g = ps.grad[i];
        ps.first_moment[i] = beta1 * ps.first_moment[i] + (1.0 - beta1) * g;
        ps.second_moment[i] = beta2 * ps.second_moment[i] + (1.0 - beta2) * g * g;
        ps.data[i] -= lr * (ps.first_moment[i] / corr1) /
                      (std::sqrt(ps.second_moment[i] / corr2) + eps);
    }
}

inline double clip_gradients(ParamStore& ps, double max_norm) {
    double n2 = 0.0;
    for (double g : ps.grad) n2 += g * g;
    const double norm = std::sqrt(n2);
    if (max_norm > 0.0 && norm > max_norm) {
        const double s = max_norm / norm;
        for (double& g : ps.grad) g *= s;
    }
    return norm;
}

inline double evaluate(ToyModel& model, const MqarConfig& mcfg, uint64_t eval_seed, int n_sequences,
                       int eval_batch) {
    SeededRng rng(eval_seed);
    double correct = 0.0, total = 0.0;
    int done = 0;
    while (done < n_sequences) {
        const int bs = std::min(eval_batch, n_sequences - done);
        MqarBatch batch = generate_mqar(mcfg, rng, bs);
        ToyActivations acts;
        toy_forward(model, batch, acts);
        for (size_t tok = 0; tok < batch.targets.size(); ++tok) {
            const int target = batch.targets[tok];
            if (target < 0) continue;
            const double* lg = &acts.logits[tok * model.cfg.vocab];
            int arg = 0;
            for (int v = 1; v < model.cfg.vocab; ++v)
                if (lg[v] > lg[arg]) arg = v;
            correct += (arg == target) ? 1.0 : 0.0;
            total += 1.0;
        }
        done += bs;
    }
    return correct / total;
}

inline TrainResult train_one(const ModelConfig& model_cfg, const MqarConfig& mcfg, const TrainConfig& tcfg,
                             double lr, std::unique_ptr<ToyModel>* model_out = nullptr) {
    tcfg.validate();
    ModelConfig mc = model_cfg;
    mc.vocab = mcfg.vocab;
    mc.d_model = mcfg.d_model;
    mc.heads = mcfg.heads;
    mc.init_seed = tcfg.seed * 7919 + 13;
    ToyModel model(mc);

    TrainResult res;
    SeededRng data_rng(tcfg.seed * 104729 + 7);
    MqarBatch fixed;
    if (tcfg.fixed_batch) fixed = generate_mqar(mcfg, data_rng, tcfg.batch_size);

    try {
        for (int step = 1; step <= tcfg.steps; ++step) {
            MqarBatch batch = tcfg.fixed_batch ? fixed : generate_mqar(mcfg, data_rng, tcfg.batch_size);
            ToyActivations acts;
            toy_forward(model, batch, acts);
            Vector dlogits;
            auto [loss, acc] = toy_loss(acts, batch, model.cfg.vocab, &dlogits);
            if (!std::isfinite(loss)) {
                std::ostringstream os;
                os << "NaN/inf loss at step " << step << " (lr=" << lr
                   << ", last grad norm=" << (res.grad_norms.empty() ? 0.0 : res.grad_norms.back()) << ")";
                throw NanLossError(os.str());
            }
            std::fill(model.ps.grad.begin(), model.ps.grad.end(), 0.0);
            toy_backward(model, batch, acts, dlogits);
            const double gnorm = clip_gradients(model.ps, tcfg.clip_norm);
            if (!std::isfinite(gnorm)) throw NanLossError("non-finite gradient norm at step " + std::to_string(step));
            res.grad_norms.push_back(gnorm);
            optimizer_step(model.ps, lr, tcfg.beta1, tcfg.beta2, tcfg.adam_eps, step);
            res.final_loss = loss;
        }
    } catch (const NanLossError& e) {
        res.diverged = true;
        res.diagnostics = e.what();
        res.accuracy = 0.0;
        return res;
    }

    Vector sorted = res.grad_norms;
    std::sort(sorted.begin(), sorted.end());
    res.median_grad_norm = sorted.empty() ? 0.0 : sorted[sorted.size() / 2];
    for (double g : res.grad_norms)
        if (g > 10.0 * res.median_grad_norm) ++res.spike_count;

    res.accuracy = evaluate(model, mcfg, tcfg.seed * 65537 + 991, tcfg.eval_sequences, tcfg.eval_batch);
    if (model_out) *model_out = std::make_unique<ToyModel>(std::move(model));
    return res;
}

struct SweepResult {
    std::vector<double> lrs;
    std::vector<TrainResult> runs;
    double best_accuracy = 0.0;
    double best_lr = 0.0;
};

inline SweepResult train_eval(const ModelConfig& model_cfg, const MqarConfig& mcfg, const TrainConfig& tcfg) {
    SweepResult sweep;
    for (double lr : tcfg.learning_rates) {
        TrainResult r = train_one(model_cfg, mcfg, tcfg, lr);
        if (r.accuracy >= sweep.best_accuracy) {
            sweep.best_accuracy = r.accuracy;
            sweep.best_lr = lr;
        }
        sweep.lrs.push_back(lr);
        sweep.runs.push_back(std::move(r));
    }
    return sweep;
}

// ---------------------------------------------------------------------------
// Checkpoints: flat binary of doubles + JSON manifest.
// ---------------------------------------------------------------------------

inline void save_checkpoint(const ToyModel& model, const std::string& prefix, uint64_t seed) {
    std::ofstream bin(prefix + ".bin", std::ios::binary);
    check(bin.good(), ("save_checkpoint: cannot open " + prefix + ".bin").c_str());
    bin.write(reinterpret_cast<const char*>(model.ps.data.data()),
              static_cast<std::streamsize>(model.ps.data.size() * sizeof(double)));

    uint64_t hash = 1469598103934665603ull;
    auto mix = [&hash](uint64_t v) {
        hash ^= v;
        hash *= 1099511628211ull;
    };
    mix(model.cfg.vocab);
    mix(model.cfg.d_model);
    mix(model.cfg.heads);
    mix(static_cast<uint64_t>(model.cfg.mixer));

    nlohmann::json manifest;
    manifest["dtype"] = "f64";
    manifest["seed"] = seed;
    manifest["config_hash"] = hash;
    manifest["mixer"] = mixer_name(model.cfg.mixer);
    manifest["vocab"] = model.cfg.vocab;
    manifest["d_model"] = model.cfg.d_model;
    manifest["heads"] = model.cfg.heads;
    manifest["param_count"] = model.ps.data.size();
    nlohmann::json tensors = nlohmann::json::array();
    for (const auto& e : model.ps.entries)
        tensors.push_back({{"name", e.name}, {"offset", e.offset}, {"size", e.size}});
    manifest["tensors"] = tensors;
    std::ofstream js(prefix + ".json");
    js << manifest.dump(2) << "\n";
}

inline void load_checkpoint(ToyModel& model, const std::string& prefix) {
    std::ifstream js(prefix + ".json");
    check(js.good(), ("load_checkpoint: missing manifest " + prefix + ".json").c_str());
    nlohmann::json manifest = nlohmann::json::parse(js);
    check(manifest["param_count"].get<size_t>() == model.ps.data.size(),
          "load_checkpoint: parameter count mismatch");
    std::ifstream bin(prefix + ".bin", std::ios::binary);
    check(bin.good(), ("load_checkpoint: missing " + prefix + ".bin").c_str());
    bin.read(reinterpret_cast<char*>(model.ps.data.data()),
             static_cast<std::streamsize>(model.ps.data.size() * sizeof(double)));
    check(static_cast<size_t>(bin.gcount()) == model.ps.data.size() * sizeof(double),
          "load_checkpoint: truncated tensor archive");
}

}  // namespace gka
