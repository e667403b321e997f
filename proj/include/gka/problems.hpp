#pragma once

// Shared generators for benchmark and test problems: regularized key-covariance
// systems (unit keys, cumulative k k^T normalized to unit Frobenius norm, ridge
// on the diagonal) and generic random SPD instances.

#include "solvers.hpp"

namespace gka {

struct CovarianceProblem {
    Matrix h;  // includes the ridge on the diagonal
    Vector q;
    double lambda = 0.0;
    double mu = 0.0, L = 0.0;
};

// Sum of seq_len unit-key outer products, scaled to unit Frobenius norm, plus
// lambda = a on the diagonal. The spectrum then sits inside [a, 1 + a].
inline CovarianceProblem make_covariance_problem(int dim, int seq_len, double a, SeededRng& rng) {
    check(dim > 0 && seq_len > 0 && a > 0.0, "make_covariance_problem: bad arguments");
    Matrix h(dim, dim);
    for (int t = 0; t < seq_len; ++t) {
        Vector k = rng.normal_vector(dim);
        double n = std::sqrt(dot(k, k));
        for (double& e : k) e /= n;
        for (int i = 0; i < dim; ++i)
            for (int j = 0; j < dim; ++j) h(i, j) += k[i] * k[j];
    }
    const double fn = frobenius_norm(h);
    for (double& e : h.data) e /= fn;

    CovarianceProblem p;
    p.lambda = a;
    p.mu = a;
    p.L = 1.0 + a;
    for (int i = 0; i < dim; ++i) h(i, i) += a;
    p.h = std::move(h);
    p.q = rng.normal_vector(dim);
    double n = std::sqrt(dot(p.q, p.q));
    for (double& e : p.q) e /= n;
    return p;
}

inline SpdProblem as_spd_problem(const CovarianceProblem& p, int iters, Precision mode) {
    SpdProblem sp;
    sp.op = make_operator(p.h, mode);
    sp.rhs = p.q;
    sp.mu = p.mu;
    sp.L = p.L;
    sp.iters = iters;
    sp.mode = mode;
    return sp;
}

// Random SPD matrix with eigenvalues log-uniform in [lo, hi].
inline Matrix random_spd(int dim, double lo, double hi, SeededRng& rng) {
    check(dim > 0 && 0.0 < lo && lo <= hi, "random_spd: bad spectrum bounds");
    // Random orthogonal basis via Gram-Schmidt on a Gaussian matrix.
    std::vector<Vector> basis;
    while (static_cast<int>(basis.size()) < dim) {
        Vector v = rng.normal_vector(dim);
        for (const Vector& b : basis) axpy(-dot(b, v), b, v);
        const double n = std::sqrt(dot(v, v));
        if (n < 1e-8) continue;
        for (double& e : v) e /= n;
        basis.push_back(std::move(v));
    }
    Matrix h(dim, dim);
    for (int e = 0; e < dim; ++e) {
        const double u = dim == 1 ? 0.5 : static_cast<double>(e) / (dim - 1);
        const double ev = lo * std::pow(hi / lo, u);
        for (int i = 0; i < dim; ++i)
            for (int j = 0; j < dim; ++j) h(i, j) += ev * basis[e][i] * basis[e][j];
    }
    return h;
}

}  // namespace gka
