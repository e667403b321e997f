#pragma once

// GKA layer backward pass. dq comes from implicit differentiation (a second
// Chebyshev solve against the cached operator), dk from the rank-1 A-recursion
// plus the Frobenius-coupling B-term assembled through M_w = M diag(w) M^T,
// gate gradients from the Appendix-style inner-product sums, and dv through
// the U_t recurrence. Cross-chunk information flows through three reverse
// accumulators (A-tilde, B-tilde, U-tilde) updated once per chunk.

#include "forward.hpp"

namespace gka {

struct UpstreamGrads {
    Vector dy;            // (B, H, T, D); may be empty when dxhat is given
    Vector dxhat_direct;  // optional (B, H, T, D): bypass the U/alpha head
};

struct GradientBundle {
    Vector dq, dk, dv;    // (B, H, T, D)
    Vector d_log_gate;    // (B, H, T)
    Vector d_alpha_logit; // (B, H, T)
    double max_mw_asymmetry = 0.0;
};

namespace detail {

// zeta_c (S0^T x) + sum_{j<=c} M_{j,c} (lhs_j^T x) rhs_j: the transpose of
// chunk_local_apply, so with lhs=values, rhs=keys this is U_t^T x.
inline Vector chunk_local_apply_t(const Matrix& s0, const std::vector<Vector>& lhs,
                                  const std::vector<Vector>& rhs, const Matrix& mask, double zeta_c, int c,
                                  const Vector& x) {
    Vector y = matvec_t(s0, x);
    for (double& e : y) e *= zeta_c;
    for (int j = 0; j <= c; ++j) axpy(mask(j, c) * dot(lhs[j], x), rhs[j], y);
    return y;
}

inline void add_outer(Matrix& m, double s, const Vector& a, const Vector& b) {
    for (int i = 0; i < m.rows; ++i)
        for (int j = 0; j < m.cols; ++j) m(i, j) += s * a[i] * b[j];
}

inline void scale_matrix(Matrix& m, double s) {
    for (double& e : m.data) e *= s;
}

}  // namespace detail

// Isolated implicit-differentiation step for one token: dq = CH(H_t + lambda_t I,
// dxhat, r) against the same chunk-local operator and bounds as the forward.
inline Vector backward_dq_token(const ForwardState& st, int b, int h, int t, const Vector& dxhat) {
    const SequenceBatch& pb = st.padded;
    check(t >= 0 && t < st.Tpad, "backward_dq_token: t out of range");
    const ChunkPlan& plan = st.plan(b, h);
    const int C = st.cfg.chunk_size;
    const int n = t / C, c = t % C;
    check(!plan.hnorm.empty(), "backward_dq_token: missing cached norms");

    std::vector<Vector> keys(C);
    for (int j = 0; j < C; ++j) keys[j] = pb.vec(pb.k, b, h, n * C + j);
    const size_t ti = pb.idx(b, h, t);

    detail::ChunkLocalOperator hop{&plan.H0[n], &keys, &plan.mask[n],
                                   plan.zeta[static_cast<size_t>(n) * C + c], c, st.lambda[ti], st.cfg.mode};
    SpdProblem prob;
    prob.op.dim = st.D;
    prob.op.apply = hop;
    prob.rhs = dxhat;
    prob.mu = st.mu[ti];
    prob.L = st.L[ti];
    prob.iters = st.cfg.iters;
    prob.mode = st.cfg.mode;
    return chebyshev_solve(prob).x;
}

inline GradientBundle backward_chunkwise(const ForwardState& st, const UpstreamGrads& up) {
    const SequenceBatch& pb = st.padded;
    const LayerConfig& cfg = st.cfg;
    const int D = st.D, C = cfg.chunk_size, BH = st.B * st.H;
    const size_t n_tok_in = static_cast<size_t>(st.B) * st.H * st.T;
    const bool direct = !up.dxhat_direct.empty();
    if (direct)
        check(up.dxhat_direct.size() == n_tok_in * D, "backward_chunkwise: dxhat shape mismatch");
    else
        check(up.dy.size() == n_tok_in * D, "backward_chunkwise: dy shape mismatch");
    check(!st.plans.empty() && !st.plans[0].hnorm.empty(), "backward_chunkwise: missing cached norms");

    // Pad upstream with zeros; padded tokens then contribute nothing.
    const size_t n_tok = static_cast<size_t>(BH) * st.Tpad;
    Vector dq(n_tok * D, 0.0), dk(n_tok * D, 0.0), dv(n_tok * D, 0.0);
    Vector dgate(n_tok, 0.0), dalpha(n_tok, 0.0);
    std::vector<double> mw_asym(BH, 0.0);

    parallel_for(BH, [&](int bh) {
        const int b = bh / st.H;
        const int h = bh % st.H;
        const ChunkPlan& plan = st.plans[bh];
        const int chunks = plan.chunks;

        Matrix a_fut(D, D), b_fut(D, D), u_fut(D, D);

        for (int n = chunks - 1; n >= 0; --n) {
            std::vector<Vector> keys(C), vals(C), xh(C), zz(C), uu(C), cv(C);
            Vector gamma(C), zeta(C), ww(C), phi(C), lam(C);
            const Matrix& M = plan.mask[n];
            for (int c = 0; c < C; ++c) {
                keys[c] = pb.vec(pb.k, b, h, n * C + c);
                vals[c] = pb.vec(pb.v, b, h, n * C + c);
                gamma[c] = pb.gate(b, h, n * C + c);
                zeta[c] = plan.zeta[static_cast<size_t>(n) * C + c];
            }

            // Per-token solves and scalars.
            for (int c = 0; c < C; ++c) {
                const int t = n * C + c;
                const size_t ti = pb.idx(b, h, t);
                xh[c] = Vector(st.xhat.begin() + ti * D, st.xhat.begin() + (ti + 1) * D);
                lam[c] = st.lambda[ti];
                const double alpha = st.alpha[ti];
                const Vector qv = pb.vec(pb.q, b, h, t);

                Vector dxhat(D, 0.0), dq_extra(D, 0.0);
                double dalpha_raw = 0.0;
                if (direct) {
                    uu[c] = Vector(D, 0.0);
                    cv[c] = Vector(D, 0.0);
                    if (t < st.T) {
                        const size_t gi = ((static_cast<size_t>(b) * st.H + h) * st.T + t) * D;
                        dxhat.assign(up.dxhat_direct.begin() + gi, up.dxhat_direct.begin() + gi + D);
                    }
                } else {
                    Vector dy(D, 0.0);
                    if (t < st.T) {
                        const size_t gi = ((static_cast<size_t>(b) * st.H + h) * st.T + t) * D;
                        dy.assign(up.dy.begin() + gi, up.dy.begin() + gi + D);
                    }
                    Vector dm = detail::chunk_local_apply_t(plan.U0[n], vals, keys, M, zeta[c], c, dy);
                    for (int d = 0; d < D; ++d) dxhat[d] = alpha * dm[d];
                    if (cfg.alpha_after_projection) {
                        uu[c] = scaled(dy, alpha);
                        cv[c] = xh[c];
                        Vector ux = detail::chunk_local_apply(plan.U0[n], vals, keys, M, zeta[c], c, xh[c],
                                                              Precision::Full);
                        for (int d = 0; d < D; ++d) dalpha_raw += dy[d] * (ux[d] - qv[d]);
                        dq_extra = scaled(dy, 1.0 - alpha);
                    } else {
                        uu[c] = dy;
                        const size_t base = ti * D;
                        cv[c].resize(D);
                        for (int d = 0; d < D; ++d) cv[c][d] = st.combined[base + d];
                        for (int d = 0; d < D; ++d) dalpha_raw += dm[d] * (xh[c][d] - qv[d]);
                        dq_extra = scaled(dm, 1.0 - alpha);
                    }
                }

                detail::ChunkLocalOperator hop{&plan.H0[n], &keys, &M, zeta[c], c, lam[c], cfg.mode};
                SpdProblem prob;
                prob.op.dim = D;
                prob.op.apply = hop;
                prob.rhs = dxhat;
                prob.mu = st.mu[ti];
                prob.L = st.L[ti];
                prob.iters = cfg.iters;
                prob.mode = cfg.mode;
                zz[c] = chebyshev_solve(prob).x;

                for (int d = 0; d < D; ++d) dq[ti * D + d] = zz[c][d] + dq_extra[d];
                dalpha[ti] = dalpha_raw * alpha * (1.0 - alpha);

                const double hn = plan.hnorm[t];
                ww[c] = (cfg.constant_lambda > 0.0 || hn <= 0.0) ? 0.0
                                                                 : 2.0 * cfg.reg_coeff * dot(xh[c], zz[c]) / hn;

                // phi_t = <dH_t, H_t> = -z^T H_t xhat - w_t ||H_t||^2 / 2.
                Vector hx = detail::chunk_local_apply(plan.H0[n], keys, keys, M, zeta[c], c, xh[c],
                                                      Precision::Full);
                phi[c] = -dot(zz[c], hx) - 0.5 * ww[c] * hn * hn;
            }

            // Rank-1 A-scan (H path) and U-scan, seeded by the cross-chunk
            // accumulators: A_i = gamma_{i+1} A_{i+1} + z_i xhat_i^T.
            {
                Matrix sa = a_fut, su = u_fut;
                for (int i = C - 1; i >= 0; --i) {
                    Matrix ai = sa, ui = su;
                    detail::add_outer(ai, 1.0, zz[i], xh[i]);
                    detail::add_outer(ui, 1.0, uu[i], cv[i]);
                    const size_t ti = pb.idx(b, h, n * C + i);
                    for (int r = 0; r < D; ++r) {
                        double acc = 0.0, accv = 0.0;
                        for (int col = 0; col < D; ++col) {
                            acc += -(ai(r, col) + ai(col, r)) * keys[i][col] + ui(col, r) * vals[i][col];
                            accv += ui(r, col) * keys[i][col];
                        }
                        dk[ti * D + r] += acc;
                        dv[ti * D + r] = accv;
                    }
                    if (i > 0) {
                        detail::scale_matrix(ai, gamma[i]);
                        detail::scale_matrix(ui, gamma[i]);
                        sa = std::move(ai);
                        su = std::move(ui);
                    }
                }
            }

            // B-term: dk_i -= b_i H_0 k_i + sum_j (G (.) M_w)(j, i) k_j + M(i,C) Btilde k_i
            // with b_i = sum_t M(i,t) w_t zeta_t and M_w = M diag(w) M^T.
            Matrix gram(C, C);
            for (int i = 0; i < C; ++i)
                for (int j = 0; j < C; ++j) gram(i, j) = dot(keys[i], keys[j]);
            Matrix mw(C, C);
            for (int t = 0; t < C; ++t)
                for (int i = 0; i <= t; ++i)
                    for (int j = 0; j <= t; ++j) mw(i, j) += M(i, t) * ww[t] * M(j, t);
            for (int i = 0; i < C; ++i)
                for (int j = 0; j < C; ++j)
                    mw_asym[bh] = std::max(mw_asym[bh], std::abs(mw(i, j) - mw(j, i)));
            check(mw_asym[bh] <= 1e-12 * (1.0 + std::abs(mw(0, 0))), "backward_chunkwise: M_w not symmetric");

            Vector bcoef(C, 0.0);
            for (int i = 0; i < C; ++i)
                for (int t = i; t < C; ++t) bcoef[i] += M(i, t) * ww[t] * zeta[t];

            for (int i = 0; i < C; ++i) {
                const size_t ti = pb.idx(b, h, n * C + i);
                Vector bk = matvec(plan.H0[n], keys[i]);
                for (double& e : bk) e *= bcoef[i];
                for (int j = 0; j < C; ++j) axpy(gram(j, i) * mw(j, i), keys[j], bk);
                Vector bfk = matvec(b_fut, keys[i]);
                axpy(M(i, C - 1), bfk, bk);
                for (int d = 0; d < D; ++d) dk[ti * D + d] -= bk[d];
            }

            // Gate gradients. dg_i sums <dH_t, H_t> and <dU_t, U_t> over t >= i
            // minus the decay-weighted quadratic forms over j in [i, t], plus
            // the same structure against the boundary adjoints.
            Vector quad0(C);
            for (int j = 0; j < C; ++j) quad0[j] = dot(keys[j], matvec(plan.H0[n], keys[j]));
            // khk(j, t) = k_j^T H_t k_j; psi_h/psi_u are k_j^T dH_t k_j and <dU_t, v_j k_j^T>.
            Matrix psi_h(C, C), psi_u(C, C);
            Vector phi_u(C);
            for (int t = 0; t < C; ++t) {
                Vector uc = detail::chunk_local_apply(plan.U0[n], vals, keys, M, zeta[t], t, cv[t],
                                                      Precision::Full);
                phi_u[t] = dot(uu[t], uc);
                for (int j = 0; j <= t; ++j) {
                    double khk = zeta[t] * quad0[j];
                    for (int l = 0; l <= t; ++l) khk += M(l, t) * gram(j, l) * gram(j, l);
                    psi_h(j, t) = -dot(zz[t], keys[j]) * dot(xh[t], keys[j]) - 0.5 * ww[t] * khk;
                    psi_u(j, t) = dot(vals[j], uu[t]) * dot(keys[j], cv[t]);
                }
            }

            const bool has_future = n < chunks - 1;
            Matrix dh_fut(D, D);
            double phi_bnd = 0.0;
            Vector psi_bnd(C, 0.0), psiu_bnd(C, 0.0);
            if (has_future) {
                for (int r = 0; r < D; ++r)
                    for (int col = 0; col < D; ++col) dh_fut(r, col) = -a_fut(r, col) - 0.5 * b_fut(r, col);
                phi_bnd = frobenius_inner(dh_fut, plan.H0[n + 1]) + frobenius_inner(u_fut, plan.U0[n + 1]);
                for (int j = 0; j < C; ++j) {
                    psi_bnd[j] = dot(keys[j], matvec(dh_fut, keys[j]));
                    psiu_bnd[j] = dot(vals[j], matvec(u_fut, keys[j]));
                }
            }

            for (int i = 0; i < C; ++i) {
                double g = 0.0;
                for (int t = i; t < C; ++t) {
                    g += phi[t] + phi_u[t];
                    for (int j = i; j <= t; ++j) g -= M(j, t) * (psi_h(j, t) + psi_u(j, t));
                }
                if (has_future) {
                    g += phi_bnd;
                    for (int j = i; j < C; ++j) g -= M(j, C - 1) * (psi_bnd[j] + psiu_bnd[j]);
                }
                dgate[pb.idx(b, h, n * C + i)] = g;
            }

            // Cross-chunk accumulators for the next-older chunk:
            //   Atilde <- zeta_C Atilde + sum_c zeta_c z_c xhat_c^T
            //   Btilde <- zeta_C Btilde + sum_c zeta_c w_c H_c   (expanded over H_0 and keys)
            //   Utilde <- zeta_C Utilde + sum_c zeta_c dU_c
            const double zC = zeta[C - 1];
            detail::scale_matrix(a_fut, zC);
            detail::scale_matrix(u_fut, zC);
            detail::scale_matrix(b_fut, zC);
            double s_h0 = 0.0;
            for (int c = 0; c < C; ++c) {
                detail::add_outer(a_fut, zeta[c], zz[c], xh[c]);
                detail::add_outer(u_fut, zeta[c], uu[c], cv[c]);
                s_h0 += zeta[c] * zeta[c] * ww[c];
            }
            for (int r = 0; r < D; ++r)
                for (int col = 0; col < D; ++col) b_fut(r, col) += s_h0 * plan.H0[n](r, col);
            for (int l = 0; l < C; ++l) {
                double beta = 0.0;
                for (int t = l; t < C; ++t) beta += zeta[t] * ww[t] * M(l, t);
                detail::add_outer(b_fut, beta, keys[l], keys[l]);
            }
        }
    });

    // Strip padding back to the input shape.
    GradientBundle out;
    out.dq.resize(n_tok_in * D);
    out.dk.resize(n_tok_in * D);
    out.dv.resize(n_tok_in * D);
    out.d_log_gate.resize(n_tok_in);
    out.d_alpha_logit.resize(n_tok_in);
    for (int b = 0; b < st.B; ++b)
        for (int h = 0; h < st.H; ++h)
            for (int t = 0; t < st.T; ++t) {
                const size_t src = pb.idx(b, h, t);
                const size_t dst = (static_cast<size_t>(b) * st.H + h) * st.T + t;
                out.d_log_gate[dst] = dgate[src];
                out.d_alpha_logit[dst] = dalpha[src];
                for (int d = 0; d < D; ++d) {
                    out.dq[dst * D + d] = dq[src * D + d];
                    out.dk[dst * D + d] = dk[src * D + d];
                    out.dv[dst * D + d] = dv[src * D + d];
                }
            }
    for (double a : mw_asym) out.max_mw_asymmetry = std::max(out.max_mw_asymmetry, a);
    return out;
}

// Token-by-token oracle with dense stored states; exact solves by default.
inline GradientBundle backward_sequential_reference(const SequenceBatch& batch, const LayerConfig& cfg,
                                                    const UpstreamGrads& up,
                                                    ReferenceSolver solver = ReferenceSolver::Exact) {
    cfg.validate();
    batch.validate();
    const int D = batch.dim, T = batch.time;
    const bool direct = !up.dxhat_direct.empty();
    const size_t n_tok = static_cast<size_t>(batch.batch) * batch.heads * T;

    GradientBundle out;
    out.dq.assign(n_tok * D, 0.0);
    out.dk.assign(n_tok * D, 0.0);
    out.dv.assign(n_tok * D, 0.0);
    out.d_log_gate.assign(n_tok, 0.0);
    out.d_alpha_logit.assign(n_tok, 0.0);

    parallel_for(batch.batch * batch.heads, [&](int bh) {
        const int b = bh / batch.heads;
        const int h = bh % batch.heads;

        std::vector<Matrix> hs(T + 1, Matrix(D, D)), us(T + 1, Matrix(D, D));
        std::vector<Vector> xh(T);
        Vector lamv(T), hn(T);
        for (int t = 0; t < T; ++t) {
            const double gamma = batch.gate(b, h, t);
            hs[t + 1] = hs[t];
            us[t + 1] = us[t];
            detail::scale_matrix(hs[t + 1], gamma);
            detail::scale_matrix(us[t + 1], gamma);
            const Vector kv = batch.vec(batch.k, b, h, t);
            detail::add_outer(hs[t + 1], 1.0, kv, kv);
            detail::add_outer(us[t + 1], 1.0, batch.vec(batch.v, b, h, t), kv);
            hn[t] = frobenius_norm(hs[t + 1]);
            const AdaptiveBounds ab = adaptive_lambda(hn[t], cfg);
            lamv[t] = ab.lambda;
            Matrix reg = hs[t + 1];
            for (int i = 0; i < D; ++i) reg(i, i) += ab.lambda;
            const Vector qv = batch.vec(batch.q, b, h, t);
            if (solver == ReferenceSolver::Exact) {
                xh[t] = solve_exact(reg, qv);
            } else {
                SpdProblem prob;
                prob.op = make_operator(reg, cfg.mode);
                prob.rhs = qv;
                prob.mu = ab.mu;
                prob.L = ab.L;
                prob.iters = cfg.iters;
                prob.mode = cfg.mode;
                xh[t] = chebyshev_solve(prob).x;
            }
        }

        Matrix ha(D, D), ua(D, D);
        for (int t = T - 1; t >= 0; --t) {
            const size_t ti = batch.idx(b, h, t);
            const double alpha = 1.0 / (1.0 + std::exp(-batch.alpha_logit[ti]));
            const Vector qv = batch.vec(batch.q, b, h, t);
            const Vector kv = batch.vec(batch.k, b, h, t);
            const Vector vv = batch.vec(batch.v, b, h, t);

            Vector dxhat(D, 0.0), dq_extra(D, 0.0), u_vec(D, 0.0), c_vec(D, 0.0);
            double dalpha_raw = 0.0;
            if (direct) {
                dxhat = Vector(up.dxhat_direct.begin() + ti * D, up.dxhat_direct.begin() + (ti + 1) * D);
            } else {
                Vector dy(up.dy.begin() + ti * D, up.dy.begin() + (ti + 1) * D);
                Vector dm = matvec_t(us[t + 1], dy);
                for (int d = 0; d < D; ++d) dxhat[d] = alpha * dm[d];
                if (cfg.alpha_after_projection) {
                    u_vec = scaled(dy, alpha);
                    c_vec = xh[t];
                    Vector ux = matvec(us[t + 1], xh[t]);
                    for (int d = 0; d < D; ++d) dalpha_raw += dy[d] * (ux[d] - qv[d]);
                    dq_extra = scaled(dy, 1.0 - alpha);
                } else {
                    u_vec = dy;
                    for (int d = 0; d < D; ++d) c_vec[d] = alpha * xh[t][d] + (1.0 - alpha) * qv[d];
                    for (int d = 0; d < D; ++d) dalpha_raw += dm[d] * (xh[t][d] - qv[d]);
                    dq_extra = scaled(dm, 1.0 - alpha);
                }
            }

            Matrix reg = hs[t + 1];
            for (int i = 0; i < D; ++i) reg(i, i) += lamv[t];
            Vector z;
            if (solver == ReferenceSolver::Exact) {
                z = solve_exact(reg, dxhat);
            } else {
                SpdProblem prob;
                prob.op = make_operator(reg, cfg.mode);
                prob.rhs = dxhat;
                prob.mu = lamv[t];
                prob.L = hn[t] + lamv[t];
                prob.iters = cfg.iters;
                prob.mode = cfg.mode;
                z = chebyshev_solve(prob).x;
            }
            const double w = (cfg.constant_lambda > 0.0 || hn[t] <= 0.0)
                                 ? 0.0
                                 : 2.0 * cfg.reg_coeff * dot(xh[t], z) / hn[t];

            for (int d = 0; d < D; ++d) out.dq[ti * D + d] = z[d] + dq_extra[d];
            out.d_alpha_logit[ti] = dalpha_raw * alpha * (1.0 - alpha);

            // Ha_t = dH_t + gamma_{t+1} Ha_{t+1}; the loop order makes ha hold
            // gamma_{t+1} Ha_{t+1} on entry.
            detail::add_outer(ha, -1.0, z, xh[t]);
            for (int r = 0; r < D; ++r)
                for (int col = 0; col < D; ++col) ha(r, col) -= 0.5 * w * hs[t + 1](r, col);
            detail::add_outer(ua, 1.0, u_vec, c_vec);

            for (int d = 0; d < D; ++d) {
                double acc = 0.0, accv = 0.0;
                for (int col = 0; col < D; ++col) {
                    acc += (ha(d, col) + ha(col, d)) * kv[col] + ua(col, d) * vv[col];
                    accv += ua(d, col) * kv[col];
                }
                out.dk[ti * D + d] = acc;
                out.dv[ti * D + d] = accv;
            }
            const double gamma = batch.gate(b, h, t);
            out.d_log_gate[ti] = gamma * (frobenius_inner(ha, hs[t]) + frobenius_inner(ua, us[t]));

            detail::scale_matrix(ha, gamma);
            detail::scale_matrix(ua, gamma);
        }
    });
    return out;
}

struct FiniteDifferenceReport {
    double dq = 0.0, dk = 0.0, dv = 0.0, d_log_gate = 0.0, d_alpha_logit = 0.0;
    double max_rel() const {
        return std::max({dq, dk, dv, d_log_gate, d_alpha_logit});
    }
};

// Central finite differences of the scalar loss sum_t <c_t, y_t> at 64-bit
// against the exact sequential forward; compares the analytic chunk-wise
// gradients parameter group by parameter group. Gates must sit strictly
// inside (0, 1) so that the +/- step stays feasible.
inline FiniteDifferenceReport finite_difference_check(const SequenceBatch& batch, const LayerConfig& cfg,
                                                      const Vector& dy, const GradientBundle& analytic,
                                                      double step = 1e-4) {
    auto loss = [&](const SequenceBatch& bt) {
        Vector y = forward_sequential_reference(bt, cfg, ReferenceSolver::Exact);
        return dot(y, dy);
    };
    auto probe = [&](Vector SequenceBatch::* field, size_t idx) {
        SequenceBatch p = batch;
        (p.*field)[idx] += step;
        SequenceBatch m = batch;
        (m.*field)[idx] -= step;
        return (loss(p) - loss(m)) / (2.0 * step);
    };
    auto group = [&](Vector SequenceBatch::* field, const Vector& grad) {
        double num = 0.0, den = 0.0;
        for (size_t i = 0; i < grad.size(); ++i) {
            const double fd = probe(field, i);
            num = std::max(num, std::abs(fd - grad[i]));
            den = std::max(den, std::abs(fd));
        }
        return num / std::max(den, 1e-12);
    };
    FiniteDifferenceReport rep;
    rep.dq = group(&SequenceBatch::q, analytic.dq);
    rep.dk = group(&SequenceBatch::k, analytic.dk);
    rep.dv = group(&SequenceBatch::v, analytic.dv);
    rep.d_log_gate = group(&SequenceBatch::log_gate, analytic.d_log_gate);
    rep.d_alpha_logit = group(&SequenceBatch::alpha_logit, analytic.d_alpha_logit);
    return rep;
}

}  // namespace gka
