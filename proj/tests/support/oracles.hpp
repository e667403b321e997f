#pragma once

// Test-only oracles: a cyclic Jacobi eigensolver for symmetric matrices,
// random batch builders, and error metrics. Kept out of the library proper.

#include "gka/backward.hpp"
#include "gka/problems.hpp"

namespace oracle {

// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations.
inline gka::Vector jacobi_eigenvalues(gka::Matrix a, int sweeps = 64, double tol = 1e-13) {
    const int n = a.rows;
    for (int s = 0; s < sweeps; ++s) {
        double off = 0.0;
        for (int p = 0; p < n; ++p)
            for (int q = p + 1; q < n; ++q) off += a(p, q) * a(p, q);
        if (off < tol * tol) break;
        for (int p = 0; p < n; ++p)
            for (int q = p + 1; q < n; ++q) {
                if (std::abs(a(p, q)) < 1e-300) continue;
                const double theta = (a(q, q) - a(p, p)) / (2.0 * a(p, q));
                const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                                 (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double sn = t * c;
                for (int k2 = 0; k2 < n; ++k2) {
                    const double akp = a(k2, p), akq = a(k2, q);
                    a(k2, p) = c * akp - sn * akq;
                    a(k2, q) = sn * akp + c * akq;
                }
                for (int k2 = 0; k2 < n; ++k2) {
                    const double apk = a(p, k2), aqk = a(q, k2);
                    a(p, k2) = c * apk - sn * aqk;
                    a(q, k2) = sn * apk + c * aqk;
                }
            }
    }
    gka::Vector ev(n);
    for (int i = 0; i < n; ++i) ev[i] = a(i, i);
    std::sort(ev.begin(), ev.end());
    return ev;
}

inline double condition_number(const gka::Matrix& a) {
    gka::Vector ev = jacobi_eigenvalues(a);
    return ev.back() / ev.front();
}

inline double rel_l2(const gka::Vector& a, const gka::Vector& b) {
    double num = 0.0, den = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        num += (a[i] - b[i]) * (a[i] - b[i]);
        den += b[i] * b[i];
    }
    return std::sqrt(num) / std::max(std::sqrt(den), 1e-300);
}

inline double max_abs_diff(const gka::Vector& a, const gka::Vector& b) {
    double m = 0.0;
    for (size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

// Random batch with gates strictly inside (0, 1) so finite differences on
// log-gates stay feasible.
inline gka::SequenceBatch random_batch(int B, int H, int T, int D, gka::SeededRng& rng,
                                       double gate_lo = 0.85, double gate_hi = 0.999) {
    gka::SequenceBatch sb(B, H, T, D);
    for (auto& e : sb.q) e = rng.normal();
    for (auto& e : sb.k) e = rng.normal();
    for (auto& e : sb.v) e = rng.normal();
    for (auto& e : sb.log_gate) e = std::log(gate_lo + (gate_hi - gate_lo) * rng.uniform());
    for (auto& e : sb.alpha_logit) e = rng.normal();
    return sb;
}

}  // namespace oracle
