#pragma once

// Sequential oracles and baselines: recursive-least-squares Kalman filter with
// Woodbury inverse updates, the per-channel steady-state reduction, and the
// GLA / DeltaNet / Gated DeltaNet recurrences.

#include "numerics.hpp"

namespace gka {

struct KfState {
    Matrix S;    // D x D state (the running ridge solution, S = U (H + lambda I)^{-1})
    Matrix Phi;  // D x D inverse of (sum eta k k^T + lambda I)
    int breakdown_count = 0;

    KfState() = default;
    KfState(int d, double lambda) : S(d, d), Phi(d, d) {
        check(lambda > 0.0, "KfState: lambda must be positive");
        for (int i = 0; i < d; ++i) Phi(i, i) = 1.0 / lambda;
    }
};

// One recursive-least-squares step with observation weight eta:
//   S_t = S_{t-1} - (S_{t-1} k - v) k^T Phi / (1/eta + k^T Phi k),
//   Phi_t = Phi - Phi k k^T Phi / (1/eta + k^T Phi k).
// eta = 0 is a hard skip. A nonpositive denominator throws at full precision
// and is counted as a breakdown in emulated-bf16 mode.
inline void kf_step(KfState& st, const Vector& k, const Vector& v, double eta,
                    Precision mode = Precision::Full) {
    const int d = st.S.rows;
    check(static_cast<int>(k.size()) == d && static_cast<int>(v.size()) == d, "kf_step: dimension mismatch");
    check(eta >= 0.0, "kf_step: negative weight");
    if (eta == 0.0) return;

    Vector pk = matvec(st.Phi, k, mode);
    double denom = round_scalar(1.0 / eta + round_scalar(dot(k, pk), mode), mode);
    if (denom <= 0.0 || !std::isfinite(denom)) {
        ++st.breakdown_count;
        if (mode == Precision::Full) throw std::runtime_error("kf_step: nonpositive update denominator");
        return;  // bf16 narrative mode: record and keep the previous state
    }

    Vector resid(d);  // S k - v
    Vector sk = matvec(st.S, k, mode);
    for (int i = 0; i < d; ++i) resid[i] = round_scalar(sk[i] - v[i], mode);
    for (int i = 0; i < d; ++i)
        for (int j = 0; j < d; ++j)
            st.S(i, j) = round_scalar(st.S(i, j) - round_scalar(resid[i] * pk[j] / denom, mode), mode);
    for (int i = 0; i < d; ++i)
        for (int j = 0; j < d; ++j)
            st.Phi(i, j) = round_scalar(st.Phi(i, j) - round_scalar(pk[i] * pk[j] / denom, mode), mode);
}

// Per-channel steady-state KF with scalar measurements: each output channel i
// keeps its own mean s_i with shared covariance Sigma,
//   G_t = Sigma k / (k^T Sigma k + r_t),  s_t = s_{t-1} + G_t (v_{t,i} - k^T s_{t-1}),
//   Sigma_t = (I - G_t k^T) Sigma.
// Returns the stacked S_t (rows = channels) after every step. With
// Sigma_0 = sigma I and r_t = 1/eta_t this is the kf_step trajectory.
inline std::vector<Matrix> steady_state_kf_run(const std::vector<Vector>& keys,
                                               const std::vector<Vector>& values, const Vector& r,
                                               double sigma) {
    check(keys.size() == values.size() && keys.size() == r.size(), "steady_state_kf_run: length mismatch");
    check(!keys.empty(), "steady_state_kf_run: empty sequence");
    check(sigma > 0.0, "steady_state_kf_run: sigma must be positive");
    const int d = static_cast<int>(keys[0].size());

    Matrix sigma_m = Matrix::identity(d);
    for (double& e : sigma_m.data) e *= sigma;
    Matrix s(d, d);
    std::vector<Matrix> out;
    out.reserve(keys.size());

    for (size_t t = 0; t < keys.size(); ++t) {
        const Vector& k = keys[t];
        Vector sk = matvec(sigma_m, k);
        const double denom = dot(k, sk) + r[t];
        if (denom <= 0.0 || !std::isfinite(denom))
            throw std::runtime_error("steady_state_kf_run: nonpositive innovation variance");
        Vector gain = scaled(sk, 1.0 / denom);
        // All channels share the gain; channel i updates with v_{t,i}.
        Vector pred = matvec(s, k);
        for (int i = 0; i < d; ++i) {
            const double innov = values[t][i] - pred[i];
            for (int j = 0; j < d; ++j) s(i, j) += gain[j] * innov;
        }
        Matrix next(d, d);
        for (int i = 0; i < d; ++i)
            for (int j = 0; j < d; ++j) next(i, j) = sigma_m(i, j) - gain[i] * sk[j];
        sigma_m = std::move(next);
        out.push_back(s);
    }
    return out;
}

// S_t = gamma_t S_{t-1} + beta_t v_t k_t^T.
inline void gla_step(Matrix& s, const Vector& k, const Vector& v, double gamma, double beta = 1.0) {
    const int d = s.rows;
    for (int i = 0; i < d; ++i)
        for (int j = 0; j < d; ++j) s(i, j) = gamma * s(i, j) + beta * v[i] * k[j];
}

// S_t = gamma S_{t-1} (I - beta k k^T) + beta v k^T; gamma = 1 is DeltaNet.
inline void gdn_step(Matrix& s, const Vector& k, const Vector& v, double gamma, double beta) {
    const int d = s.rows;
    Vector sk = matvec(s, k);
    for (int i = 0; i < d; ++i)
        for (int j = 0; j < d; ++j) s(i, j) = gamma * (s(i, j) - beta * sk[i] * k[j]) + beta * v[i] * k[j];
}

// S_t = S_{t-1} (I - beta k k^T) + beta v k^T: the gamma = 1 case above.
inline void deltanet_step(Matrix& s, const Vector& k, const Vector& v, double beta) {
    gdn_step(s, k, v, 1.0, beta);
}

}  // namespace gka
