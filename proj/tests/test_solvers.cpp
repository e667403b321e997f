#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "support/oracles.hpp"

using namespace gka;

namespace {

SpdProblem dense_problem(const Matrix& h, const Vector& q, double mu, double L, int iters,
                         Precision mode = Precision::Full) {
    SpdProblem p;
    p.op = make_operator(h, mode);
    p.rhs = q;
    p.mu = mu;
    p.L = L;
    p.iters = iters;
    p.mode = mode;
    return p;
}

}  // namespace

TEST_CASE("weight schedule: omega_0 = 2, monotone, bounded below by omega_1*") {
    const double kappa = 51.0;
    const double rho = (kappa - 1.0) / (kappa + 1.0);
    auto w = chebyshev_weight_schedule(rho, 50);
    CHECK(w[0] == 2.0);
    const double w1s = chebyshev_omega1_star(rho);
    for (size_t i = 1; i < w.size(); ++i) {
        CHECK(w[i] <= w[i - 1] + 1e-15);
        CHECK(w[i] > w1s);
    }
    // Fixed point: omega_1* = 2(1 - sqrt(1 - rho^2)) / rho^2 satisfies the update.
    CHECK(4.0 / (4.0 - rho * rho * w1s) == doctest::Approx(w1s).epsilon(1e-12));

    // Contraction of the schedule toward omega_1* at rate R (weight-sequence
    // contraction factor, kappa = 51).
    const double R = (kappa - 1.0) / (kappa + 1.0) * (std::sqrt(kappa) - 1.0) / (std::sqrt(kappa) + 1.0);
    CHECK(R == doctest::Approx(0.72533).epsilon(2e-4));
    for (size_t i = 1; i < w.size(); ++i) {
        if (w[i - 1] - w1s < 1e-14) break;
        CHECK((w[i] - w1s) / (w[i - 1] - w1s) <= R + 1e-9);
    }

    CHECK_THROWS(chebyshev_weight_schedule(1.0, 5));
    CHECK_THROWS(chebyshev_weight_schedule(-0.1, 5));
}

TEST_CASE("chebyshev matches exact solve at r=30 on a kappa<=51 system") {
    SeededRng rng(21);
    for (int trial = 0; trial < 5; ++trial) {
        CovarianceProblem cp = make_covariance_problem(32, 64, 0.05, rng);
        SpdProblem p = as_spd_problem(cp, 30, Precision::Full);
        Vector x = chebyshev_solve(p).x;
        Vector xs = solve_exact(cp.h, cp.q);
        CHECK(oracle::rel_l2(x, xs) <= 1e-5);
    }
}

TEST_CASE("solver traces: residuals decrease and iterates are captured") {
    SeededRng rng(5);
    CovarianceProblem cp = make_covariance_problem(16, 48, 0.05, rng);
    SpdProblem p = as_spd_problem(cp, 20, Precision::Full);
    SolverTrace tr;
    Vector x = chebyshev_solve(p, &tr).x;
    REQUIRE(tr.iterates.size() == 22);  // xi_{-1} .. xi_20
    REQUIRE(tr.residuals.size() == 21);
    CHECK(tr.residuals.back() < tr.residuals.front() * 1e-3);
    CHECK(tr.weights.front() == 2.0);
    CHECK(oracle::max_abs_diff(tr.iterates.back(), x) == 0.0);
}

TEST_CASE("GD, AGD, CG all converge at full precision; CG fastest") {
    SeededRng rng(31);
    CovarianceProblem cp = make_covariance_problem(24, 64, 0.05, rng);
    Vector xs = solve_exact(cp.h, cp.q);

    SolverTrace tg, ta, tc, tch;
    SpdProblem p = as_spd_problem(cp, 30, Precision::Full);
    Vector xg = gd_solve(p, &tg);
    Vector xa = agd_solve(p, &ta);
    Vector xc = cg_solve(p, &tc);
    Vector xh = chebyshev_solve(p, &tch).x;

    CHECK(oracle::rel_l2(xc, xs) <= 1e-10);
    CHECK(oracle::rel_l2(xh, xs) <= 1e-3);
    CHECK(oracle::rel_l2(xa, xs) <= 1e-2);
    CHECK(tc.residuals.back() <= tch.residuals.back() + 1e-14);
    CHECK(tch.residuals.back() < ta.residuals.back());
    CHECK(ta.residuals.back() < tg.residuals.back());
    CHECK(tc.breakdown_count == 0);
}

TEST_CASE("implicit backward equals exact-solver gradient to 1e-5") {
    SeededRng rng(77);
    CovarianceProblem cp = make_covariance_problem(32, 96, 0.05, rng);
    SpdProblem p = as_spd_problem(cp, 30, Precision::Full);
    Vector dxhat = rng.normal_vector(32);
    Vector dq = implicit_backward(p, dxhat);
    Vector dq_exact = solve_exact(cp.h, dxhat);
    CHECK(oracle::rel_l2(dq, dq_exact) <= 1e-5);
}

TEST_CASE("reverse chebyshev reconstructs iterates and reproduces implicit dq") {
    SeededRng rng(13);
    for (int r : {5, 10, 30}) {
        CovarianceProblem cp = make_covariance_problem(16, 48, 0.02, rng);
        SpdProblem p = as_spd_problem(cp, r, Precision::Full);
        SolverTrace tr;
        ChebyshevResult fwd = chebyshev_solve(p, &tr);
        Vector dxi = rng.normal_vector(16);

        ReverseChebyshevResult rev =
            reverse_chebyshev(cp.h, cp.q, fwd.x, fwd.x_prev, fwd.omega_r, p.mu, p.L, r, dxi, true);

        // Store-and-compare: every reconstructed iterate matches the stored one.
        REQUIRE(rev.reconstructed.size() == tr.iterates.size());
        for (size_t i = 0; i < tr.iterates.size(); ++i)
            CHECK(oracle::max_abs_diff(rev.reconstructed[i], tr.iterates[i]) <= 1e-6);

        // Lemma-2 equality: reverse dq == implicit dq.
        Vector dq_impl = implicit_backward(p, dxi);
        CHECK(oracle::rel_l2(rev.dq, dq_impl) <= 1e-10);
    }
}

TEST_CASE("reverse chebyshev dH matches finite differences") {
    SeededRng rng(99);
    const int n = 6, r = 12;
    CovarianceProblem cp = make_covariance_problem(n, 24, 0.05, rng);
    SpdProblem p = as_spd_problem(cp, r, Precision::Full);
    ChebyshevResult fwd = chebyshev_solve(p);
    Vector dxi = rng.normal_vector(n);
    ReverseChebyshevResult rev =
        reverse_chebyshev(cp.h, cp.q, fwd.x, fwd.x_prev, fwd.omega_r, p.mu, p.L, r, dxi);

    const double h = 1e-6;
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
            Matrix hp = cp.h, hm = cp.h;
            hp(i, j) += h;
            hm(i, j) -= h;
            SpdProblem pp = p, pm = p;
            pp.op = make_operator(hp);
            pm.op = make_operator(hm);
            const double fd = (dot(dxi, chebyshev_solve(pp).x) - dot(dxi, chebyshev_solve(pm).x)) / (2.0 * h);
            CHECK(rev.dH(i, j) == doctest::Approx(fd).epsilon(1e-5).scale(1.0));
        }

    // dq finite differences as well.
    for (int i = 0; i < n; ++i) {
        SpdProblem pp = p, pm = p;
        pp.rhs[i] += h;
        pm.rhs[i] -= h;
        const double fd = (dot(dxi, chebyshev_solve(pp).x) - dot(dxi, chebyshev_solve(pm).x)) / (2.0 * h);
        CHECK(rev.dq[i] == doctest::Approx(fd).epsilon(1e-6).scale(1.0));
    }
}

TEST_CASE("reverse chebyshev r=0 and degenerate-reversal error") {
    SeededRng rng(3);
    CovarianceProblem cp = make_covariance_problem(4, 8, 0.1, rng);
    Vector dxi = rng.normal_vector(4);
    // r = 0: xi_0 = c_0 q, so dq = c_0 dxi.
    SpdProblem p = as_spd_problem(cp, 0, Precision::Full);
    ChebyshevResult fwd = chebyshev_solve(p);
    ReverseChebyshevResult rev =
        reverse_chebyshev(cp.h, cp.q, fwd.x, fwd.x_prev, fwd.omega_r, p.mu, p.L, 0, dxi);
    const double c0 = 2.0 / (p.mu + p.L);
    for (int i = 0; i < 4; ++i) CHECK(rev.dq[i] == doctest::Approx(c0 * dxi[i]));

    // rho = 0 (kappa = 1) makes omega_i = 1 and the reversal degenerate.
    Matrix eye = Matrix::identity(4);
    ChebyshevResult f2 = chebyshev_solve(dense_problem(eye, cp.q, 1.0, 1.0, 5));
    CHECK_THROWS_WITH_AS(
        reverse_chebyshev(eye, cp.q, f2.x, f2.x_prev, f2.omega_r, 1.0, 1.0, 5, dxi),
        doctest::Contains("degenerate"), std::runtime_error);
}

TEST_CASE("bf16 emulation: CH final residual beats CG's") {
    SeededRng rng(123);
    std::vector<double> ch_res, cg_res;
    for (int t = 0; t < 20; ++t) {
        CovarianceProblem cp = make_covariance_problem(64, 128, 0.02, rng);
        SpdProblem p = as_spd_problem(cp, 30, Precision::Bf16);
        SolverTrace tch, tcg;
        chebyshev_solve(p, &tch);
        cg_solve(p, &tcg);
        ch_res.push_back(tch.residuals.back());
        cg_res.push_back(tcg.residuals.back());
    }
    std::sort(ch_res.begin(), ch_res.end());
    std::sort(cg_res.begin(), cg_res.end());
    CHECK(ch_res[ch_res.size() / 2] <= cg_res[cg_res.size() / 2]);
}

TEST_CASE("spd problem validation") {
    SpdProblem p;
    p.op.dim = 2;
    p.rhs = {1.0, 2.0};
    p.mu = 0.0;
    p.L = 1.0;
    p.iters = 3;
    CHECK_THROWS(p.validate());
    p.mu = 2.0;
    CHECK_THROWS(p.validate());  // L < mu
    p.mu = 0.5;
    CHECK_NOTHROW(p.validate());
}
