#pragma once

// GKA layer forward pass. Maintains gated covariance states
//   H_t = gamma_t H_{t-1} + k_t k_t^T,  U_t = gamma_t U_{t-1} + v_t k_t^T,
// solves (H_t + lambda_t I) x = q_t by Chebyshev Iteration with adaptive
// regularization lambda_t = a ||H_t||_F, blends the solution with the raw
// query through the alpha-connection and projects through U_t. Two paths are
// provided: the chunk-wise production path (chunk initial states + implicit
// intra-chunk operators) and a token-by-token sequential reference.

#include <sstream>

#include "parallel.hpp"
#include "solvers.hpp"

namespace gka {

struct LayerConfig {
    int head_dim = 0;
    int chunk_size = 16;
    double reg_coeff = 0.02;  // a in lambda_t = a ||H_t||_F
    int iters = 30;
    bool normalize_qk = true;
    bool alpha_after_projection = false;  // y = alpha U xhat + (1-alpha) q instead
    Precision mode = Precision::Full;
    double lambda_floor = 1e-6;    // lambda = a * floor when ||H_t||_F = 0
    double constant_lambda = -1.0; // > 0 replaces the adaptive rule (ablation)

    void validate() const {
        if (head_dim <= 0) throw std::invalid_argument("LayerConfig: head_dim must be positive");
        if (chunk_size <= 0) throw std::invalid_argument("LayerConfig: chunk_size must be positive");
        if (reg_coeff <= 0.0) throw std::invalid_argument("LayerConfig: reg_coeff must be positive");
        if (iters < 1) throw std::invalid_argument("LayerConfig: iters must be >= 1");
    }
};

// (batch, head, time, dim) row-major arrays plus per-token scalar gates and
// alpha logits. Gates are stored as log gamma_t <= 0.
struct SequenceBatch {
    int batch = 0, heads = 0, time = 0, dim = 0;
    Vector q, k, v;        // B*H*T*D
    Vector log_gate;       // B*H*T
    Vector alpha_logit;    // B*H*T

    SequenceBatch() = default;
    SequenceBatch(int b, int h, int t, int d)
        : batch(b), heads(h), time(t), dim(d),
          q(static_cast<size_t>(b) * h * t * d, 0.0),
          k(q.size(), 0.0), v(q.size(), 0.0),
          log_gate(static_cast<size_t>(b) * h * t, 0.0),
          alpha_logit(log_gate.size(), 0.0) {}

    size_t idx(int b, int h, int t) const {
        return (static_cast<size_t>(b) * heads + h) * time + t;
    }
    size_t idx(int b, int h, int t, int d) const { return idx(b, h, t) * dim + d; }

    double gate(int b, int h, int t) const { return std::exp(log_gate[idx(b, h, t)]); }

    Vector vec(const Vector& src, int b, int h, int t) const {
        Vector out(dim);
        const size_t base = idx(b, h, t, 0);
        for (int d = 0; d < dim; ++d) out[d] = src[base + d];
        return out;
    }

    void validate() const {
        check(batch > 0 && heads > 0 && time > 0 && dim > 0, "SequenceBatch: empty shape");
        const size_t n = static_cast<size_t>(batch) * heads * time;
        check(q.size() == n * dim && k.size() == n * dim && v.size() == n * dim,
              "SequenceBatch: q/k/v size mismatch");
        check(log_gate.size() == n && alpha_logit.size() == n, "SequenceBatch: gate size mismatch");
        for (double g : log_gate)
            if (g > 1e-12) throw std::invalid_argument("SequenceBatch: log gate must be <= 0 (gamma in [0,1])");
    }
};

// Per-(batch, head) chunk decomposition: chunk initial states, in-chunk
// cumulative gate products zeta, decay masks M and per-token ||H_t||_F.
struct ChunkPlan {
    int chunks = 0, C = 0, D = 0;
    std::vector<Matrix> H0, U0;  // state entering each chunk
    std::vector<Matrix> mask;    // C x C upper triangular, M(j,c) = prod gamma_{j+1..c}
    Vector zeta;                 // chunks*C, zeta_c = prod_{i<=c in chunk} gamma_i
    Vector hnorm;                // per padded token ||H_t||_F
    int clamp_events = 0;        // negative-radicand clamps in the norm recursion
};

struct AdaptiveBounds {
    double lambda, mu, L;
};

// lambda_t = a ||H_t||_F with mu = lambda_t, L = ||H_t||_F + lambda_t, so the
// condition number of H_t + lambda_t I is at most (a+1)/a.
inline AdaptiveBounds adaptive_lambda(double hnorm, const LayerConfig& cfg) {
    check(hnorm >= 0.0, "adaptive_lambda: negative norm");
    if (cfg.constant_lambda > 0.0) {
        const double lam = cfg.constant_lambda;
        return {lam, lam, hnorm + lam};
    }
    double lam = cfg.reg_coeff * (hnorm > 0.0 ? hnorm : cfg.lambda_floor);
    return {lam, lam, hnorm + lam};
}

// ||H_1||_F .. ||H_C||_F for one chunk via the three-term expansion
//   zeta_c^2 ||H_0||_F^2 + 2 zeta_c sum_j M_{j,c} k_j^T H_0 k_j
//     + colsum(((G (.) G) M) (.) M)
// with G = K^T K the in-chunk Gram matrix.
inline void chunkwise_frobenius(const Matrix& h0, const std::vector<Vector>& keys, const Vector& zeta,
                                const Matrix& mask, Vector& out, int* clamp_events) {
    const int C = static_cast<int>(keys.size());
    const double h0_sq = frobenius_norm(h0) * frobenius_norm(h0);
    Vector quad(C);  // k_j^T H_0 k_j
    for (int j = 0; j < C; ++j) quad[j] = dot(keys[j], matvec(h0, keys[j]));
    Matrix gram(C, C);
    for (int i = 0; i < C; ++i)
        for (int j = 0; j < C; ++j) gram(i, j) = dot(keys[i], keys[j]);

    for (int c = 0; c < C; ++c) {
        double term1 = zeta[c] * zeta[c] * h0_sq;
        double term2 = 0.0;
        for (int j = 0; j <= c; ++j) term2 += mask(j, c) * quad[j];
        term2 *= 2.0 * zeta[c];
        double term3 = 0.0;  // colsum(((G (.) G) M) (.) M) column c
        for (int i = 0; i <= c; ++i) {
            double acc = 0.0;
            for (int j = 0; j <= c; ++j) acc += gram(i, j) * gram(i, j) * mask(j, c);
            term3 += acc * mask(i, c);
        }
        double sq = term1 + term2 + term3;
        if (sq < 0.0) {
            sq = 0.0;
            if (clamp_events) ++(*clamp_events);
        }
        out[c] = std::sqrt(sq);
    }
}

// Sequential scan over chunks: stores H_[n], U_[n] at every chunk boundary
// and the per-token Frobenius norms. `batch` must already be padded to a
// multiple of the chunk size.
inline ChunkPlan chunk_initial_states(const SequenceBatch& batch, const LayerConfig& cfg, int b, int h) {
    const int C = cfg.chunk_size;
    const int D = batch.dim;
    check(batch.time % C == 0, "chunk_initial_states: time not a multiple of chunk size");
    const int chunks = batch.time / C;

    ChunkPlan plan;
    plan.chunks = chunks;
    plan.C = C;
    plan.D = D;
    plan.H0.reserve(chunks);
    plan.U0.reserve(chunks);
    plan.mask.reserve(chunks);
    plan.zeta.resize(static_cast<size_t>(chunks) * C);
    plan.hnorm.resize(batch.time);

    Matrix hstate(D, D), ustate(D, D);
    for (int n = 0; n < chunks; ++n) {
        plan.H0.push_back(hstate);
        plan.U0.push_back(ustate);

        // In-chunk gate products. Direct products rather than exp(cumsum)
        // differences so that gamma = 0 stays exact.
        Vector gamma(C);
        for (int c = 0; c < C; ++c) gamma[c] = batch.gate(b, h, n * C + c);
        Matrix mask(C, C);
        for (int j = 0; j < C; ++j) {
            double prod = 1.0;
            mask(j, j) = 1.0;
            for (int c = j + 1; c < C; ++c) {
                prod *= gamma[c];
                mask(j, c) = prod;
            }
        }
        double zprod = 1.0;
        for (int c = 0; c < C; ++c) {
            zprod *= gamma[c];
            plan.zeta[static_cast<size_t>(n) * C + c] = zprod;
        }

        std::vector<Vector> keys(C);
        for (int c = 0; c < C; ++c) keys[c] = batch.vec(batch.k, b, h, n * C + c);

        Vector norms(C);
        chunkwise_frobenius(hstate, keys, Vector(plan.zeta.begin() + static_cast<size_t>(n) * C,
                                                 plan.zeta.begin() + static_cast<size_t>(n + 1) * C),
                            mask, norms, &plan.clamp_events);
        for (int c = 0; c < C; ++c) plan.hnorm[static_cast<size_t>(n) * C + c] = norms[c];
        plan.mask.push_back(std::move(mask));

        // Advance boundary states: H_[n+1] = zeta_C H_[n] + sum_j M_{j,C} k_j k_j^T.
        const double zC = plan.zeta[static_cast<size_t>(n) * C + C - 1];
        Matrix hnew(D, D), unew(D, D);
        for (int i = 0; i < D; ++i)
            for (int j = 0; j < D; ++j) {
                hnew(i, j) = zC * hstate(i, j);
                unew(i, j) = zC * ustate(i, j);
            }
        for (int c = 0; c < C; ++c) {
            const double m = plan.mask[n](c, C - 1);
            Vector kv = keys[c];
            Vector vv = batch.vec(batch.v, b, h, n * C + c);
            for (int i = 0; i < D; ++i)
                for (int j = 0; j < D; ++j) {
                    hnew(i, j) += m * kv[i] * kv[j];
                    unew(i, j) += m * vv[i] * kv[j];
                }
        }
        hstate = std::move(hnew);
        ustate = std::move(unew);
    }
    return plan;
}

struct ForwardState {
    LayerConfig cfg;
    int B = 0, H = 0, T = 0, Tpad = 0, D = 0;
    SequenceBatch padded;
    std::vector<ChunkPlan> plans;  // B*H
    Vector lambda, mu, L;          // B*H*Tpad
    Vector xhat;                   // B*H*Tpad*D
    Vector alpha;                  // B*H*Tpad
    Vector combined;               // B*H*Tpad*D
    Vector y;                      // B*H*Tpad*D

    const ChunkPlan& plan(int b, int h) const { return plans[static_cast<size_t>(b) * H + h]; }
};

inline SequenceBatch pad_batch(const SequenceBatch& batch, int chunk_size) {
    if (batch.time % chunk_size == 0) return batch;
    const int tpad = ((batch.time + chunk_size - 1) / chunk_size) * chunk_size;
    SequenceBatch out(batch.batch, batch.heads, tpad, batch.dim);
    for (int b = 0; b < batch.batch; ++b)
        for (int h = 0; h < batch.heads; ++h)
            for (int t = 0; t < batch.time; ++t) {
                for (int d = 0; d < batch.dim; ++d) {
                    out.q[out.idx(b, h, t, d)] = batch.q[batch.idx(b, h, t, d)];
                    out.k[out.idx(b, h, t, d)] = batch.k[batch.idx(b, h, t, d)];
                    out.v[out.idx(b, h, t, d)] = batch.v[batch.idx(b, h, t, d)];
                }
                out.log_gate[out.idx(b, h, t)] = batch.log_gate[batch.idx(b, h, t)];
                out.alpha_logit[out.idx(b, h, t)] = batch.alpha_logit[batch.idx(b, h, t)];
            }
    // Padded tail: gamma = 1 (log 0), k = v = q = 0; states pass through.
    return out;
}

namespace detail {

// H_t x evaluated chunk-locally: zeta_c (H_0 x) + sum_{j<=c} M_{j,c} (k_j^T x) k_j,
// plus lambda x, without forming H_t.
struct ChunkLocalOperator {
    const Matrix* h0;
    const std::vector<Vector>* keys;  // in-chunk keys
    const Matrix* mask;
    double zeta_c;
    int c;  // local index, inclusive
    double lambda;
    Precision mode;

    Vector operator()(const Vector& x) const {
        Vector y = matvec(*h0, x, mode);
        for (double& e : y) e = round_scalar(zeta_c * e, mode);
        for (int j = 0; j <= c; ++j) {
            const double coeff = round_scalar((*mask)(j, c) * round_scalar(dot((*keys)[j], x), mode), mode);
            axpy(coeff, (*keys)[j], y);
        }
        round_inplace(y, mode);
        for (size_t i = 0; i < y.size(); ++i) y[i] = round_scalar(y[i] + lambda * x[i], mode);
        return y;
    }
};

inline Vector chunk_local_apply(const Matrix& state0, const std::vector<Vector>& lhs,
                                const std::vector<Vector>& rhs, const Matrix& mask, double zeta_c, int c,
                                const Vector& x, Precision mode) {
    // zeta_c (S_0 x) + sum_{j<=c} M_{j,c} (rhs_j^T x) lhs_j; with lhs=values,
    // rhs=keys this is U_t x.
    Vector y = matvec(state0, x, mode);
    for (double& e : y) e = round_scalar(zeta_c * e, mode);
    for (int j = 0; j <= c; ++j) {
        const double coeff = round_scalar(mask(j, c) * round_scalar(dot(rhs[j], x), mode), mode);
        axpy(coeff, lhs[j], y);
    }
    round_inplace(y, mode);
    return y;
}

}  // namespace detail

inline ForwardState forward_chunkwise(const SequenceBatch& input, const LayerConfig& cfg) {
    cfg.validate();
    input.validate();
    check(input.dim == cfg.head_dim, "forward_chunkwise: head_dim mismatch");

    ForwardState st;
    st.cfg = cfg;
    st.B = input.batch;
    st.H = input.heads;
    st.T = input.time;
    st.D = input.dim;
    st.padded = pad_batch(input, cfg.chunk_size);
    st.Tpad = st.padded.time;

    const int BH = st.B * st.H;
    const size_t n_tok = static_cast<size_t>(BH) * st.Tpad;
    st.plans.resize(BH);
    st.lambda.assign(n_tok, 0.0);
    st.mu.assign(n_tok, 0.0);
    st.L.assign(n_tok, 0.0);
    st.alpha.assign(n_tok, 0.0);
    st.xhat.assign(n_tok * st.D, 0.0);
    st.combined.assign(n_tok * st.D, 0.0);
    st.y.assign(n_tok * st.D, 0.0);

    const SequenceBatch& pb = st.padded;
    parallel_for(BH, [&](int bh) {
        const int b = bh / st.H;
        const int h = bh % st.H;
        ChunkPlan& plan = st.plans[bh];
        plan = chunk_initial_states(pb, cfg, b, h);
        const int C = cfg.chunk_size;

        for (int n = 0; n < plan.chunks; ++n) {
            std::vector<Vector> keys(C), vals(C);
            for (int c = 0; c < C; ++c) {
                keys[c] = pb.vec(pb.k, b, h, n * C + c);
                vals[c] = pb.vec(pb.v, b, h, n * C + c);
            }
            for (int c = 0; c < C; ++c) {
                const int t = n * C + c;
                const size_t ti = pb.idx(b, h, t);
                const AdaptiveBounds ab = adaptive_lambda(plan.hnorm[t], cfg);
                st.lambda[ti] = ab.lambda;
                st.mu[ti] = ab.mu;
                st.L[ti] = ab.L;

                detail::ChunkLocalOperator hop{&plan.H0[n], &keys, &plan.mask[n],
                                               plan.zeta[static_cast<size_t>(n) * C + c], c, ab.lambda, cfg.mode};
                SpdProblem prob;
                prob.op.dim = st.D;
                prob.op.apply = hop;
                prob.rhs = pb.vec(pb.q, b, h, t);
                prob.mu = ab.mu;
                prob.L = ab.L;
                prob.iters = cfg.iters;
                prob.mode = cfg.mode;

                Vector xhat;
                try {
                    xhat = chebyshev_solve(prob).x;
                } catch (const std::exception& e) {
                    std::ostringstream os;
                    os << "forward_chunkwise: solver failed at (batch=" << b << ", head=" << h << ", t=" << t
                       << "): " << e.what();
                    throw std::runtime_error(os.str());
                }

                const double alpha = 1.0 / (1.0 + std::exp(-pb.alpha_logit[ti]));
                st.alpha[ti] = alpha;
                const Vector& qv = prob.rhs;
                const double zc = plan.zeta[static_cast<size_t>(n) * C + c];

                Vector yv;
                Vector comb(st.D);
                if (cfg.alpha_after_projection) {
                    // y = alpha (U xhat) + (1 - alpha) q
                    for (int d = 0; d < st.D; ++d) comb[d] = xhat[d];
                    Vector ux = detail::chunk_local_apply(plan.U0[n], vals, keys, plan.mask[n], zc, c, xhat, cfg.mode);
                    yv.resize(st.D);
                    for (int d = 0; d < st.D; ++d) yv[d] = alpha * ux[d] + (1.0 - alpha) * qv[d];
                } else {
                    // y = U (alpha xhat + (1 - alpha) q)
                    for (int d = 0; d < st.D; ++d) comb[d] = alpha * xhat[d] + (1.0 - alpha) * qv[d];
                    yv = detail::chunk_local_apply(plan.U0[n], vals, keys, plan.mask[n], zc, c, comb, cfg.mode);
                }

                for (int d = 0; d < st.D; ++d) {
                    st.xhat[ti * st.D + d] = xhat[d];
                    st.combined[ti * st.D + d] = comb[d];
                    st.y[ti * st.D + d] = yv[d];
                }
            }
        }
    });
    return st;
}

// Outputs restricted to the original (unpadded) positions, (B,H,T,D).
inline Vector layer_outputs(const ForwardState& st) {
    Vector out(static_cast<size_t>(st.B) * st.H * st.T * st.D);
    for (int b = 0; b < st.B; ++b)
        for (int h = 0; h < st.H; ++h)
            for (int t = 0; t < st.T; ++t)
                for (int d = 0; d < st.D; ++d)
                    out[((static_cast<size_t>(b) * st.H + h) * st.T + t) * st.D + d] =
                        st.y[st.padded.idx(b, h, t, d)];
    return out;
}

enum class ReferenceSolver { Exact, Chebyshev };

// Token-by-token recurrence with explicit dense states; the ground-truth
// oracle when solver = Exact.
inline Vector forward_sequential_reference(const SequenceBatch& batch, const LayerConfig& cfg,
                                           ReferenceSolver solver = ReferenceSolver::Exact) {
    cfg.validate();
    batch.validate();
    const int D = batch.dim;
    Vector out(static_cast<size_t>(batch.batch) * batch.heads * batch.time * D, 0.0);

    parallel_for(batch.batch * batch.heads, [&](int bh) {
        const int b = bh / batch.heads;
        const int h = bh % batch.heads;
        Matrix hstate(D, D), ustate(D, D);
        for (int t = 0; t < batch.time; ++t) {
            const double gamma = batch.gate(b, h, t);
            const Vector kv = batch.vec(batch.k, b, h, t);
            const Vector vv = batch.vec(batch.v, b, h, t);
            const Vector qv = batch.vec(batch.q, b, h, t);
            for (int i = 0; i < D; ++i)
                for (int j = 0; j < D; ++j) {
                    hstate(i, j) = gamma * hstate(i, j) + kv[i] * kv[j];
                    ustate(i, j) = gamma * ustate(i, j) + vv[i] * kv[j];
                }
            const AdaptiveBounds ab = adaptive_lambda(frobenius_norm(hstate), cfg);
            Matrix reg = hstate;
            for (int i = 0; i < D; ++i) reg(i, i) += ab.lambda;

            Vector xhat;
            if (solver == ReferenceSolver::Exact) {
                xhat = solve_exact(reg, qv);
            } else {
                SpdProblem prob;
                prob.op = make_operator(reg, cfg.mode);
                prob.rhs = qv;
                prob.mu = ab.mu;
                prob.L = ab.L;
                prob.iters = cfg.iters;
                prob.mode = cfg.mode;
                xhat = chebyshev_solve(prob).x;
            }

            const double alpha = 1.0 / (1.0 + std::exp(-batch.alpha_logit[batch.idx(b, h, t)]));
            Vector yv(D);
            if (cfg.alpha_after_projection) {
                Vector ux = matvec(ustate, xhat);
                for (int d = 0; d < D; ++d) yv[d] = alpha * ux[d] + (1.0 - alpha) * qv[d];
            } else {
                Vector comb(D);
                for (int d = 0; d < D; ++d) comb[d] = alpha * xhat[d] + (1.0 - alpha) * qv[d];
                yv = matvec(ustate, comb);
            }
            for (int d = 0; d < D; ++d) out[batch.idx(b, h, t, d)] = yv[d];
        }
    });
    return out;
}

}  // namespace gka
