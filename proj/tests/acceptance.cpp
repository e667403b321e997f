// Acceptance gate: one self-contained check per release criterion, each
// printing a single [PASS]/[FAIL] line with its headline metric and runtime.
// Exit code is the number of failed criteria.

#include <chrono>
#include <cstdio>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "gka/kalman.hpp"
#include "gka/mqar.hpp"
#include "support/oracles.hpp"

using namespace gka;
using Clock = std::chrono::steady_clock;

namespace {

int g_failures = 0;

void report(int id, const std::string& name, bool pass, const std::string& detail, double seconds) {
    std::ostringstream os;
    os << (pass ? "[PASS]" : "[FAIL]") << " criterion " << std::setw(2) << id << ": " << name << " — "
       << detail << " (" << std::fixed << std::setprecision(1) << seconds << "s)";
    std::cout << os.str() << std::endl;
    if (!pass) ++g_failures;
}

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    return v.empty() ? 0.0 : v[v.size() / 2];
}

// --- 1. Condition-number bound -------------------------------------------

void criterion_condition_bound() {
    const auto t0 = Clock::now();
    const std::vector<double> coeffs = {0.01, 0.02, 0.05, 0.1};
    const int per_a = 2500;  // 10^4 instances total
    double worst_slack = -1e300;
    SeededRng rng(2024);
    for (double a : coeffs) {
        for (int i = 0; i < per_a; ++i) {
            const int d = 4 + static_cast<int>(rng.below(9));  // D in [4, 12]
            const int t = 1 + static_cast<int>(rng.below(24));
            Matrix h(d, d);
            for (int s = 0; s < t; ++s) {
                const double g = 0.2 + 0.8 * rng.uniform();
                for (double& e : h.data) e *= g;
                Vector k = rng.normal_vector(d);
                for (int r = 0; r < d; ++r)
                    for (int c = 0; c < d; ++c) h(r, c) += k[r] * k[c];
            }
            const double lam = a * std::max(frobenius_norm(h), 1e-12);
            for (int r = 0; r < d; ++r) h(r, r) += lam;
            const double kappa = oracle::condition_number(h);
            worst_slack = std::max(worst_slack, kappa - ((a + 1.0) / a + 1e-9));
        }
    }
    const double dt = std::chrono::duration<double>(Clock::now() - t0).count();
    std::ostringstream os;
    os << "worst kappa slack " << std::scientific << std::setprecision(2) << worst_slack;
    report(1, "condition-number bound over 10^4 instances", worst_slack <= 0.0 && dt < 10.0, os.str(), dt);
}

// --- 2. Weight-schedule lemmas -------------------------------------------

void criterion_weight_schedule() {
    const auto t0 = Clock::now();
    const double kappa = 51.0;
    const double rho = (kappa - 1.0) / (kappa + 1.0);
    const std::vector<double> w = chebyshev_weight_schedule(rho, 60);
    const double w1s = chebyshev_omega1_star(rho);
    const double r_expect = ((kappa - 1.0) / (kappa + 1.0)) * ((std::sqrt(kappa) - 1.0) / (std::sqrt(kappa) + 1.0));

    bool pass = w[0] == 2.0;
    double max_ratio = 0.0;
    for (size_t i = 1; i < w.size(); ++i) {
        pass = pass && w[i] <= w[i - 1] + 1e-15 && w[i] > w1s;
        const double num = w[i] - w1s, den = w[i - 1] - w1s;
        if (den > 1e-14) max_ratio = std::max(max_ratio, num / den);
    }
    pass = pass && std::abs(r_expect - 0.72533) <= 1e-4 && max_ratio <= r_expect + 1e-4;
    const double dt = std::chrono::duration<double>(Clock::now() - t0).count();
    std::ostringstream os;
    os << "max contraction " << std::setprecision(6) << max_ratio << " vs R = " << r_expect;
    report(2, "Chebyshev weight-schedule lemmas at kappa = 51", pass, os.str(), dt);
}

// --- 3. Implicit vs reverse dq -------------------------------------------

void criterion_implicit_vs_reverse() {
    const auto t0 = Clock::now();
    double worst = 0.0;
    for (int p = 0; p < 100; ++p) {
        SeededRng rng(500 + p);
        CovarianceProblem cp = make_covariance_problem(64, 128, 0.02, rng);
        Vector dxhat = rng.normal_vector(64);
        for (int r : {5, 10, 30}) {
            SpdProblem sp = as_spd_problem(cp, r, Precision::Full);
            ChebyshevResult fwd = chebyshev_solve(sp);
            Vector dq_rev = reverse_chebyshev(cp.h, cp.q, fwd.x, fwd.x_prev, fwd.omega_r, sp.mu, sp.L, r,
                                              dxhat).dq;
            Vector dq_impl = implicit_backward(sp, dxhat);
            worst = std::max(worst, oracle::rel_l2(dq_impl, dq_rev));
        }
    }
    const double dt = std::chrono::duration<double>(Clock::now() - t0).count();
    std::ostringstream os;
    os << "max relative difference " << std::scientific << std::setprecision(2) << worst;
    report(3, "implicit dq equals reverse-Chebyshev dq", worst <= 1e-10 && dt < 30.0, os.str(), dt);
}

// --- 4. Chunk/sequential forward equivalence -----------------------------

void criterion_forward_equivalence() {
    const auto t0 = Clock::now();
    const std::vector<int> chunk_sizes = {8, 16, 64};
    const std::vector<int> dims = {8, 16, 32};
    double worst = 0.0;
    SeededRng rng(9000);
    for (int i = 0; i < 20; ++i) {
        const int C = chunk_sizes[i % chunk_sizes.size()];
        const int D = dims[(i / chunk_sizes.size()) % dims.size()];
        LayerConfig cfg;
        cfg.head_dim = D;
        cfg.chunk_size = C;
        SequenceBatch sb = oracle::random_batch(2, 2, 256, D, rng);
        Vector y_chunk = layer_outputs(forward_chunkwise(sb, cfg));
        Vector y_seq = forward_sequential_reference(sb, cfg, ReferenceSolver::Chebyshev);
        double den = 0.0;
        for (double e : y_seq) den += e * e;
        worst = std::max(worst, oracle::max_abs_diff(y_chunk, y_seq) / std::sqrt(den));
    }
    const double dt = std::chrono::duration<double>(Clock::now() - t0).count();
    std::ostringstream os;
    os << "max scaled deviation " << std::scientific << std::setprecision(2) << worst;
    report(4, "chunk-wise forward equals sequential reference", worst <= 1e-8 && dt < 120.0, os.str(), dt);
}

// --- 5. Full-layer gradient check ----------------------------------------

void criterion_layer_gradcheck() {
    const auto t0 = Clock::now();
    const int D = 8, T = 32;
    SeededRng rng(777);
    LayerConfig cfg;
    cfg.head_dim = D;
    cfg.chunk_size = 8;
    SequenceBatch sb = oracle::random_batch(1, 1, T, D, rng);
    Vector dy(static_cast<size_t>(T) * D);
    for (auto& e : dy) e = rng.normal();
    UpstreamGrads up;
    up.dy = dy;

    GradientBundle exact = backward_sequential_reference(sb, cfg, up, ReferenceSolver::Exact);
    const double err_exact = finite_difference_check(sb, cfg, dy, exact).max_rel();

    GradientBundle cheb = backward_chunkwise(forward_chunkwise(sb, cfg), up);
    const double err_cheb = finite_difference_check(sb, cfg, dy, cheb).max_rel();

    const double dt = std::chrono::duration<double>(Clock::now() - t0).count();
    std::ostringstream os;
    os << "exact-solver rel err " << std::scientific << std::setprecision(2) << err_exact
       << ", CH r=30 rel err " << err_cheb;
    report(5, "full-layer finite-difference gradient check", err_exact <= 1e-4 && err_cheb <= 1e-3 && dt < 300.0,
           os.str(), dt);
}

// --- 6. KF vs ridge -------------------------------------------------------

void criterion_kf_vs_ridge() {
    const auto t0 = Clock::now();
    const int d = 16, T = 64;
    const double lambda = 0.5;
    SeededRng rng(321);
    KfState st(d, lambda);
    Matrix hreg(d, d), numer(d, d);
    for (int i = 0; i < d; ++i) hreg(i, i) = lambda;
    double worst = 0.0;
    for (int t = 0; t < T; ++t) {
        Vector k = rng.normal_vector(d);
        Vector v = rng.normal_vector(d);
        kf_step(st, k, v, 1.0);
        for (int i = 0; i < d; ++i)
            for (int j = 0; j < d; ++j) {
                hreg(i, j) += k[i] * k[j];
                numer(i, j) += v[i] * k[j];
            }
        for (int i = 0; i < d; ++i) {
            Vector row(d);
            for (int j = 0; j < d; ++j) row[j] = numer(i, j);
            Vector sol = solve_exact(hreg, row);
            for (int j = 0; j < d; ++j) worst = std::max(worst, std::abs(st.S(i, j) - sol[j]));
        }
    }
    const double dt = std::chrono::duration<double>(Clock::now() - t0).count();
    std::ostringstream os;
    os << "max deviation " << std::scientific << std::setprecision(2) << worst;
    report(6, "KF trajectory equals exact ridge minimizer", worst <= 1e-8 && dt < 10.0, os.str(), dt);
}

// --- 7. Baseline reductions ----------------------------------------------

void criterion_reductions() {
    const auto t0 = Clock::now();
    const int d = 8, T = 32;
    SeededRng rng(654);
    const double r = 0.4, beta = 1.0 / (1.0 + r);
    Matrix s_dn(d, d), s_kf(d, d), s_gdn(d, d);
    double worst_kf = 0.0, worst_gdn = 0.0;
    for (int t = 0; t < T; ++t) {
        Vector k = rng.normal_vector(d);
        double nk = std::sqrt(dot(k, k));
        for (double& e : k) e /= nk;
        Vector v = rng.normal_vector(d);

        deltanet_step(s_dn, k, v, beta);
        Vector pred = matvec(s_kf, k);
        for (int i = 0; i < d; ++i)
            for (int j = 0; j < d; ++j) s_kf(i, j) += (v[i] - pred[i]) * k[j] / (1.0 + r);
        gdn_step(s_gdn, k, v, 1.0, beta);

        for (size_t i = 0; i < s_dn.data.size(); ++i) {
            worst_kf = std::max(worst_kf, std::abs(s_dn.data[i] - s_kf.data[i]));
            worst_gdn = std::max(worst_gdn, std::abs(s_dn.data[i] - s_gdn.data[i]));
        }
    }
    const double dt = std::chrono::duration<double>(Clock::now() - t0).count();
    std::ostringstream os;
    os << "DeltaNet-vs-KF " << std::scientific << std::setprecision(2) << worst_kf << ", GDN(gamma=1)-vs-DeltaNet "
       << worst_gdn;
    report(7, "DeltaNet / KF / GDN reductions", worst_kf <= 1e-12 && worst_gdn == 0.0, os.str(), dt);
}

// --- 8. Low-precision solver ordering ------------------------------------

void criterion_bf16_solver_ordering() {
    const auto t0 = Clock::now();
    std::vector<double> ch30, ch10, cg30;
    for (int p = 0; p < 100; ++p) {
        SeededRng rng(1300 + p);
        CovarianceProblem cp = make_covariance_problem(128, 256, 0.02, rng);  // spectrum in [0.02, 1.02]
        SpdProblem sp = as_spd_problem(cp, 30, Precision::Bf16);
        SolverTrace tch, tcg;
        chebyshev_solve(sp, &tch);
        cg_solve(sp, &tcg);
        ch30.push_back(tch.residuals.back());
        ch10.push_back(tch.residuals[10]);
        cg30.push_back(tcg.residuals.back());
    }
    const double m_ch30 = median(ch30), m_ch10 = median(ch10), m_cg30 = median(cg30);
    const double dt = std::chrono::duration<double>(Clock::now() - t0).count();
    std::ostringstream os;
    os << "medians: CH r=30 " << std::scientific << std::setprecision(3) << m_ch30 << " <= CG " << m_cg30
       << ", CH r=10 " << m_ch10;
    report(8, "emulated-bf16 solver ordering (CH <= CG, r=30 <= r=10)",
           m_ch30 <= m_cg30 && m_ch30 <= m_ch10 && dt < 120.0, os.str(), dt);
}

// --- 9. Stacked gradient-deviation ordering ------------------------------

void criterion_bf16_gradient_ordering() {
    const auto t0 = Clock::now();
    const int dim = 64, depth = 4, iters = 30;
    std::vector<double> dev_ch, dev_cg;
    for (int p = 0; p < 20; ++p) {
        SeededRng rng(7100 + p);
        // Depth-chained solves x_{j+1} = (H_j + lambda_j I)^{-1} x_j; the
        // gradient of <g, x_depth> w.r.t. x_0 chains the transposed solves.
        std::vector<CovarianceProblem> probs;
        for (int j = 0; j < depth; ++j) probs.push_back(make_covariance_problem(dim, 128, 0.02, rng));
        Vector g = rng.normal_vector(dim);

        auto chain = [&](bool use_cg, Precision mode) {
            Vector adj = g;
            for (int j = depth - 1; j >= 0; --j) {
                SpdProblem sp = as_spd_problem(probs[j], iters, mode);
                sp.rhs = adj;
                adj = use_cg ? cg_solve(sp) : chebyshev_solve(sp).x;
            }
            return adj;
        };
        Vector exact = g;
        for (int j = depth - 1; j >= 0; --j) exact = solve_exact(probs[j].h, exact);

        dev_ch.push_back(oracle::rel_l2(chain(false, Precision::Bf16), exact));
        dev_cg.push_back(oracle::rel_l2(chain(true, Precision::Bf16), exact));
    }
    const double m_ch = median(dev_ch), m_cg = median(dev_cg);
    const double dt = std::chrono::duration<double>(Clock::now() - t0).count();
    std::ostringstream os;
    os << "median deviation CH " << std::scientific << std::setprecision(3) << m_ch << " < CG " << m_cg;
    report(9, "emulated-bf16 stacked gradient-deviation ordering", m_ch < m_cg && dt < 300.0, os.str(), dt);
}

// --- 10/11. MQAR desk scale ----------------------------------------------

void criteria_mqar() {
    const auto t0 = Clock::now();

    // Easy configuration: best accuracy over the LR grid.
    MqarConfig easy;  // vocab 64, n_kv 4, T 64, d_model 64, 2 heads
    ModelConfig gka_cfg;
    gka_cfg.mixer = MixerKind::Gka;
    gka_cfg.layer.chunk_size = 16;
    gka_cfg.layer.iters = 10;
    TrainConfig tcfg;
    tcfg.steps = 1000;
    tcfg.eval_sequences = 1024;
    tcfg.seed = 1;

    SweepResult easy_sweep = train_eval(gka_cfg, easy, tcfg);
    bool no_nan = true;
    for (const TrainResult& r : easy_sweep.runs) no_nan = no_nan && !r.diverged;

    {
        std::ostringstream os;
        os << "best accuracy " << std::setprecision(4) << easy_sweep.best_accuracy << " at lr "
           << easy_sweep.best_lr;
        const double dt = std::chrono::duration<double>(Clock::now() - t0).count();
        report(10, "MQAR easy setting reaches 0.99 accuracy", easy_sweep.best_accuracy >= 0.99, os.str(), dt);
    }

    // Stressed configuration: median over seeds per mixer at the easy-best LR.
    const auto t1 = Clock::now();
    MqarConfig stressed;
    stressed.vocab = 96;
    stressed.n_kv = 48;
    stressed.seq_len = 256;
    stressed.d_model = 32;
    stressed.heads = 2;

    TrainConfig scfg;
    scfg.steps = 1200;
    scfg.eval_sequences = 512;
    const double stress_lr = 1e-2;

    auto run_mixer = [&](MixerKind mixer) {
        ModelConfig mc;
        mc.mixer = mixer;
        mc.layer.chunk_size = 16;
        mc.layer.iters = 10;
        // At T=256 the default gate init (gamma ~ 0.95) decays stored pairs to
        // noise before the queries arrive; start the gates near 0.999 instead.
        mc.gate_bias_init = 6.9;
        // Start the GKA alpha-connection near the solver output (alpha ~ 0.9)
        // so the retrieval path dominates the raw-query fallback from step one.
        if (mixer == MixerKind::Gka) mc.alpha_bias_init = 2.2;
        std::vector<double> accs;
        for (uint64_t seed : {1ull, 2ull, 3ull}) {
            TrainConfig c = scfg;
            c.seed = seed;
            TrainResult r = train_one(mc, stressed, c, stress_lr);
            no_nan = no_nan && !r.diverged;
            accs.push_back(r.accuracy);
        }
        return median(accs);
    };
    const double acc_gka = run_mixer(MixerKind::Gka);
    const double acc_gla = run_mixer(MixerKind::Gla);
    const double acc_gdn = run_mixer(MixerKind::Gdn);

    {
        const double dt = std::chrono::duration<double>(Clock::now() - t1).count();
        std::ostringstream os;
        os << "median accuracy GKA " << std::setprecision(4) << acc_gka << " vs GLA " << acc_gla << ", GDN "
           << acc_gdn;
        report(10, "MQAR stressed setting ordering (GKA >= GLA, GDN)", acc_gka >= acc_gla && acc_gka >= acc_gdn,
               os.str(), dt);
    }

    // Constant-lambda ablation: spikes are recorded and reported, not bounded.
    const auto t2 = Clock::now();
    ModelConfig const_cfg = gka_cfg;
    const_cfg.layer.constant_lambda = 0.25;
    TrainConfig ccfg = tcfg;
    ccfg.steps = 200;
    TrainResult ablation = train_one(const_cfg, easy, ccfg, 2.15e-3);

    {
        const double dt = std::chrono::duration<double>(Clock::now() - t2).count();
        std::ostringstream os;
        os << "adaptive grid NaN-free: " << (no_nan ? "yes" : "no") << "; constant lambda=0.25 ablation: "
           << ablation.spike_count << " grad-norm spikes > 10x median (median "
           << std::scientific << std::setprecision(2) << ablation.median_grad_norm << ")";
        report(11, "no-NaN training and constant-lambda spike accounting", no_nan, os.str(), dt);
    }
}

}  // namespace

int main(int argc, char** argv) {
    // --quick skips the training-based criteria (10, 11) during development.
    const bool quick = argc > 1 && std::string(argv[1]) == "--quick";
    std::cout << "acceptance suite (threads: " << max_threads() << ")" << std::endl;
    criterion_condition_bound();
    criterion_weight_schedule();
    criterion_implicit_vs_reverse();
    criterion_forward_equivalence();
    criterion_layer_gradcheck();
    criterion_kf_vs_ridge();
    criterion_reductions();
    criterion_bf16_solver_ordering();
    criterion_bf16_gradient_ordering();
    if (!quick) criteria_mqar();
    std::cout << (g_failures == 0 ? "ALL CRITERIA PASSED" : "FAILURES PRESENT") << std::endl;
    return g_failures;
}
