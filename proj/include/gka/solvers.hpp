#pragma once

// Iterative solvers for symmetric positive definite systems: Chebyshev
// Iteration with its weight schedule, the reverse (iterate-reconstructing)
// Chebyshev pass, implicit differentiation, and GD/AGD/CG baselines with
// optional trace capture.

#include <algorithm>
#include <functional>
#include <limits>
#include <optional>

#include "numerics.hpp"

namespace gka {

// Matrix-free SPD operator. `dense` is optional and only used for residual
// capture and the reverse pass.
struct LinearOperator {
    int dim = 0;
    std::function<Vector(const Vector&)> apply;
    const Matrix* dense = nullptr;
};

inline LinearOperator make_operator(const Matrix& h, Precision mode = Precision::Full) {
    check(h.rows == h.cols, "make_operator: matrix not square");
    LinearOperator op;
    op.dim = h.rows;
    op.dense = &h;
    op.apply = [&h, mode](const Vector& x) { return matvec(h, x, mode); };
    return op;
}

struct SpdProblem {
    LinearOperator op;
    Vector rhs;
    double mu = 0.0;   // lower spectral bound, > 0
    double L = 0.0;    // upper spectral bound, >= mu
    int iters = 0;
    Precision mode = Precision::Full;

    void validate() const {
        check(op.dim == static_cast<int>(rhs.size()), "SpdProblem: rhs dimension mismatch");
        if (mu <= 0.0) throw std::invalid_argument("SpdProblem: mu must be positive");
        if (L < mu) throw std::invalid_argument("SpdProblem: L must be >= mu");
        if (iters < 0) throw std::invalid_argument("SpdProblem: negative iteration count");
    }
};

struct SolverTrace {
    std::vector<Vector> iterates;   // xi_{-1}, xi_0, ..., xi_r
    std::vector<double> residuals;  // ||H xi_i - q|| for i = 0..r, exact arithmetic
    std::vector<double> weights;    // omega_0..omega_r (Chebyshev only)
    double omega1_star = 0.0;
    double omega2_star = 0.0;
    int breakdown_count = 0;        // CG near-zero curvature events
};

namespace detail {

inline double trace_residual(const SpdProblem& p, const Vector& x) {
    Vector hx = p.op.dense ? matvec(*p.op.dense, x) : p.op.apply(x);
    double s = 0.0;
    for (size_t i = 0; i < hx.size(); ++i) {
        double r = hx[i] - p.rhs[i];
        s += r * r;
    }
    return std::sqrt(s);
}

inline void trace_push(SolverTrace* tr, const SpdProblem& p, const Vector& x) {
    if (!tr) return;
    tr->iterates.push_back(x);
    tr->residuals.push_back(trace_residual(p, x));
}

}  // namespace detail

// omega_0 = 2, omega_i = 4 / (4 - rho^2 omega_{i-1}). Monotone nonincreasing,
// converging to omega1* = 2(1 - sqrt(1 - rho^2)) / rho^2 from above.
inline std::vector<double> chebyshev_weight_schedule(double rho, int r) {
    if (rho < 0.0 || rho >= 1.0) throw std::invalid_argument("chebyshev_weight_schedule: rho must be in [0, 1)");
    if (r < 0) throw std::invalid_argument("chebyshev_weight_schedule: negative iteration count");
    std::vector<double> w(static_cast<size_t>(r) + 1);
    w[0] = 2.0;
    for (int i = 1; i <= r; ++i) w[i] = 4.0 / (4.0 - rho * rho * w[i - 1]);
    return w;
}

inline double chebyshev_omega1_star(double rho) {
    if (rho == 0.0) return 1.0;
    return 2.0 * (1.0 - std::sqrt(1.0 - rho * rho)) / (rho * rho);
}

struct ChebyshevResult {
    Vector x;       // xi_r
    Vector x_prev;  // xi_{r-1}
    double omega_r = 2.0;
};

inline ChebyshevResult chebyshev_solve(const SpdProblem& p, SolverTrace* trace = nullptr) {
    p.validate();
    const double rho = (p.L - p.mu) / (p.L + p.mu);
    const double step0 = 2.0 / (p.L + p.mu);
    const Precision m = p.mode;

    Vector xi_prev(p.rhs.size(), 0.0);  // xi_{-1}
    Vector xi = scaled(p.rhs, step0);   // xi_0

    if (trace) {
        trace->weights.assign(1, 2.0);
        trace->omega1_star = chebyshev_omega1_star(rho);
        trace->omega2_star = (rho == 0.0) ? std::numeric_limits<double>::infinity()
                                          : 2.0 * (1.0 + std::sqrt(1.0 - rho * rho)) / (rho * rho);
        trace->iterates.push_back(xi_prev);
        detail::trace_push(trace, p, xi);
    }

    double omega = 2.0;
    for (int i = 1; i <= p.iters; ++i) {
        omega = 4.0 / (4.0 - rho * rho * omega);
        Vector hx = p.op.apply(xi);
        Vector next(xi.size());
        const double step = round_scalar(2.0 * omega / (p.L + p.mu), m);
        for (size_t j = 0; j < xi.size(); ++j) {
            double grad = round_scalar(hx[j] - p.rhs[j], m);
            next[j] = xi[j] - step * grad + (omega - 1.0) * (xi[j] - xi_prev[j]);
        }
        xi_prev = xi;
        xi = std::move(next);
        if (trace) {
            trace->weights.push_back(omega);
            detail::trace_push(trace, p, xi);
        }
    }
    return {std::move(xi), std::move(xi_prev), omega};
}

// dq = CH(H, dxhat, r): implicit differentiation through the solve, reusing
// the same operator and spectral bounds as the forward pass.
inline Vector implicit_backward(const SpdProblem& p, const Vector& dxhat) {
    SpdProblem bp = p;
    bp.rhs = dxhat;
    return chebyshev_solve(bp).x;
}

inline Vector gd_solve(const SpdProblem& p, SolverTrace* trace = nullptr) {
    p.validate();
    const double step = 2.0 / (p.L + p.mu);
    const Precision m = p.mode;
    Vector x(p.rhs.size(), 0.0);
    if (trace) {
        trace->iterates.push_back(x);
        detail::trace_push(trace, p, x);
    }
    for (int i = 1; i <= p.iters; ++i) {
        Vector hx = p.op.apply(x);
        for (size_t j = 0; j < x.size(); ++j)
            x[j] -= step * round_scalar(hx[j] - p.rhs[j], m);
        detail::trace_push(trace, p, x);
    }
    return x;
}

inline Vector agd_solve(const SpdProblem& p, SolverTrace* trace = nullptr) {
    p.validate();
    const double kappa = p.L / p.mu;
    const double momentum = (std::sqrt(kappa) - 1.0) / (std::sqrt(kappa) + 1.0);
    const double step = 1.0 / p.L;
    const Precision m = p.mode;
    Vector x(p.rhs.size(), 0.0), x_old(p.rhs.size(), 0.0), ypt(p.rhs.size(), 0.0);
    if (trace) {
        trace->iterates.push_back(x);
        detail::trace_push(trace, p, x);
    }
    for (int i = 1; i <= p.iters; ++i) {
        Vector hy = p.op.apply(ypt);
        Vector x_new(x.size());
        for (size_t j = 0; j < x.size(); ++j)
            x_new[j] = ypt[j] - step * round_scalar(hy[j] - p.rhs[j], m);
        for (size_t j = 0; j < x.size(); ++j)
            ypt[j] = x_new[j] + momentum * (x_new[j] - x[j]);
        x_old = std::move(x);
        x = std::move(x_new);
        detail::trace_push(trace, p, x);
    }
    return x;
}

// Textbook Hestenes-Stiefel CG, no preconditioning or re-orthogonalization:
// the low-precision fragility of the bare recurrence is intentional.
inline Vector cg_solve(const SpdProblem& p, SolverTrace* trace = nullptr) {
    p.validate();
    const Precision m = p.mode;
    Vector x(p.rhs.size(), 0.0);
    Vector r = p.rhs;
    Vector d = r;
    double rs = round_scalar(dot(r, r), m);
    const double rs0 = std::max(rs, 1e-300);
    if (trace) {
        trace->iterates.push_back(x);
        detail::trace_push(trace, p, x);
    }
    for (int i = 1; i <= p.iters; ++i) {
        if (rs < 1e-30 * rs0) {  // converged to machine zero; remaining steps are no-ops
            detail::trace_push(trace, p, x);
            continue;
        }
        Vector hd = p.op.apply(d);
        double curvature = round_scalar(dot(d, hd), m);
        if (std::abs(curvature) < 1e-30 || !std::isfinite(curvature)) {
            if (trace) ++trace->breakdown_count;
            detail::trace_push(trace, p, x);
            continue;
        }
        double alpha = round_scalar(rs / curvature, m);
        for (size_t j = 0; j < x.size(); ++j) x[j] += alpha * d[j];
        for (size_t j = 0; j < r.size(); ++j) r[j] -= alpha * hd[j];
        double rs_new = round_scalar(dot(r, r), m);
        double beta = round_scalar(rs_new / rs, m);
        if (!std::isfinite(beta)) {
            if (trace) ++trace->breakdown_count;
            beta = 0.0;
        }
        for (size_t j = 0; j < d.size(); ++j) d[j] = r[j] + beta * d[j];
        rs = rs_new;
        detail::trace_push(trace, p, x);
    }
    return x;
}

struct ReverseChebyshevResult {
    Vector dq;
    Matrix dH;
    std::vector<Vector> reconstructed;  // xi_{-1}..xi_r when requested
};

// Exact reverse-mode pass through the Chebyshev recursion, reconstructing
// iterates backwards from (xi_r, xi_{r-1}) instead of storing them. The
// weight schedule runs in reverse via nu_{i-1} = (4/rho^2)(1 - 1/nu_i).
inline ReverseChebyshevResult reverse_chebyshev(const Matrix& h, const Vector& q, const Vector& xi_r,
                                                const Vector& xi_rm1, double omega_r, double mu, double L, int r,
                                                const Vector& dxi_r, bool keep_iterates = false) {
    check(h.rows == h.cols && h.rows == static_cast<int>(q.size()), "reverse_chebyshev: shape mismatch");
    if (mu <= 0.0 || L < mu) throw std::invalid_argument("reverse_chebyshev: invalid spectral bounds");
    if (r < 0) throw std::invalid_argument("reverse_chebyshev: negative iteration count");
    const int n = h.rows;
    const double rho = (L - mu) / (L + mu);
    const double c0 = 2.0 / (L + mu);

    ReverseChebyshevResult out;
    out.dH = Matrix(n, n);

    if (r == 0) {
        out.dq = scaled(dxi_r, c0);
        if (keep_iterates) {
            out.reconstructed.push_back(Vector(n, 0.0));
            out.reconstructed.push_back(scaled(q, c0));
        }
        return out;
    }

    // Adjoint recursion: with xi_i = A_i xi_{i-1} + b_i xi_{i-2} + c_i q,
    //   dxi_{i-1} = A_i dxi_i + b_{i+1} dxi_{i+1},
    //   dq += c_i dxi_i,  dH -= (2 omega_i / (L+mu)) dxi_i xi_{i-1}^T.
    double nu = omega_r;             // omega_i for the current i
    double nu_next = 0.0;            // omega_{i+1} (b_{i+1} term source)
    Vector dxi = dxi_r;              // dxi_i
    Vector dxi_next(n, 0.0);         // dxi_{i+1}
    Vector xi_i = xi_r;              // xi_i
    Vector xi_im1 = xi_rm1;          // xi_{i-1}

    out.dq = Vector(n, 0.0);
    if (keep_iterates) {
        out.reconstructed.push_back(xi_r);
        out.reconstructed.push_back(xi_rm1);
    }

    for (int i = r; i >= 1; --i) {
        const double step = 2.0 * nu / (L + mu);
        const double b_i = -(nu - 1.0);
        // dH contribution of iteration i.
        for (int a = 0; a < n; ++a)
            for (int bcol = 0; bcol < n; ++bcol) out.dH(a, bcol) -= step * dxi[a] * xi_im1[bcol];
        // dq contribution of iteration i.
        axpy(step, dxi, out.dq);

        // Reconstruct xi_{i-2} = (xi_i - A_i xi_{i-1} - c_i q) / b_i.
        Vector xi_im2(n, 0.0);
        if (i >= 2) {
            if (std::abs(nu - 1.0) < 1e-6)
                throw std::runtime_error("reverse_chebyshev: degenerate reversal, |omega_i - 1| < 1e-6");
            Vector hx = matvec(h, xi_im1);
            for (int a = 0; a < n; ++a) {
                double axi = nu * xi_im1[a] - step * hx[a];
                xi_im2[a] = (xi_i[a] - axi - step * q[a]) / b_i;
            }
        }
        if (keep_iterates) out.reconstructed.push_back(xi_im2);

        // dxi_{i-1} = A_i dxi_i + b_{i+1} dxi_{i+1}.
        Vector hdx = matvec(h, dxi);
        Vector dxi_im1(n);
        for (int a = 0; a < n; ++a) {
            dxi_im1[a] = nu * dxi[a] - step * hdx[a];
            if (i < r) dxi_im1[a] -= (nu_next - 1.0) * dxi_next[a];
        }

        dxi_next = std::move(dxi);
        dxi = std::move(dxi_im1);
        nu_next = nu;
        if (i >= 2) nu = (4.0 / (rho * rho)) * (1.0 - 1.0 / nu);

        xi_i = xi_im1;
        xi_im1 = std::move(xi_im2);
    }

    // xi_0 = c_0 q closes the chain; no dH contribution from initialization.
    axpy(c0, dxi, out.dq);
    if (keep_iterates) std::reverse(out.reconstructed.begin(), out.reconstructed.end());
    return out;
}

}  // namespace gka
