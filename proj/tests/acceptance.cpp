// Acceptance suite: one PASS/FAIL line per criterion, details indented below.
// Exit status is nonzero when a criterion fails that is not listed in
// kKnownFailures; known failures still print FAIL.

#include "pfda/harness.hpp"
#include "pfda/hybrid_filters.hpp"
#include "pfda/local_filters.hpp"
#include "pfda/oracles_metrics.hpp"
#include "pfda/proposal_filters.hpp"
#include "pfda/transport_filters.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

using namespace pfda;

namespace {

struct Outcome {
    bool pass = true;
    std::vector<std::string> details;

    void check(bool ok, const std::string& what) {
        details.push_back(std::string(ok ? "ok    " : "FAIL  ") + what);
        pass = pass && ok;
    }
    void note(const std::string& what) { details.push_back("      " + what); }
};

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

double seconds(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

Matrix random_members(Index nx, Index n, std::uint64_t seed) {
    Matrix m(nx, n);
    for (Index i = 0; i < n; ++i) {
        RngStream s(seed, 0, static_cast<std::uint64_t>(i), Purpose::Initial);
        m.col(i) = s.normal_vector(nx);
    }
    return m;
}

Vector random_weights(Index n, std::uint64_t seed, double spread = 1.5) {
    RngStream s(seed, 0, kEnsembleStream, Purpose::Proposal);
    Vector w(n);
    for (Index i = 0; i < n; ++i) w[i] = std::exp(spread * s.normal());
    return w / w.sum();
}

double max_abs(const Matrix& m) { return m.cwiseAbs().maxCoeff(); }

// --- oracle gate -------------------------------------------------------------

Outcome oracle_gate() {
    Outcome o;
    const std::vector<std::string> names{"bootstrap", "optimal_proposal", "auxiliary", "wekf", "implicit",
                                         "tempered", "guided", "etpf", "letpf", "location_pf",
                                         "space_time_pf", "enkpf", "hybrid_letpf_letkf", "nleaf", "agm"};
    for (const auto& name : names) {
        const GateResult g = kalman_gate(name);
        o.check(g.pass && g.wall_s < 30.0,
                fmt("%-20s N=%-6lld seeds=%d  max|z|=%6.2f  %.1f s", name.c_str(), static_cast<long long>(g.n),
                    g.seeds, g.max_z, g.wall_s));
    }
    return o;
}

// --- second-order exactness --------------------------------------------------

Outcome second_order() {
    Outcome o;
    double netf_err = 0.0, etpf_err = 0.0;
    for (std::uint64_t t = 0; t < 20; ++t) {
        const Index nx = 3, n = 8 + static_cast<Index>(t);
        const Matrix x = random_members(nx, n, 100 + t);
        const Vector w = random_weights(n, 200 + t);
        const SecondOrderReport rn = second_order_report(x * netf_transform_matrix(w), x, w);
        netf_err = std::max({netf_err, rn.mean_error, rn.covariance_error});
        EtpfConfig cfg;
        cfg.second_order = true;
        StepDiagnostics diag;
        const SecondOrderReport re = second_order_report(etpf_transform(x, w, cfg, diag).members, x, w);
        etpf_err = std::max({etpf_err, re.mean_error, re.covariance_error});
    }
    o.check(netf_err <= 1e-10, fmt("NETF moment error %.2e over 20 random cases (bound 1e-10)", netf_err));
    o.check(etpf_err <= 1e-10, fmt("Riccati-corrected ETPF moment error %.2e (bound 1e-10)", etpf_err));

    const auto a = merging_coefficients();
    const std::array<double, 3> expect{0.75, (std::sqrt(13.0) + 1.0) / 8.0, -(std::sqrt(13.0) - 1.0) / 8.0};
    double cerr = 0.0;
    for (int k = 0; k < 3; ++k) cerr = std::max(cerr, std::abs(a[static_cast<std::size_t>(k)] - expect[static_cast<std::size_t>(k)]));
    o.check(cerr <= 1e-15, fmt("merging coefficients (%.15f, %.15f, %.15f), error %.1e", a[0], a[1], a[2], cerr));

    // Merged members are iid with the weighted mean and covariance, so the
    // 1/(N−1) sample moments are unbiased for them.
    const Index nx = 2, n = 20;
    const int seeds = 10000;
    const Matrix x = random_members(nx, n, 7);
    const Vector w = random_weights(n, 8);
    const Vector mu = x * w;
    const Matrix dev = x.colwise() - mu;
    const Matrix cov = dev * w.asDiagonal() * dev.transpose();
    Eigen::MatrixXd stats(nx + 3, seeds);  // mean components, then c00 c01 c11
    for (int s = 0; s < seeds; ++s) {
        StepContext ctx{RngFactory{static_cast<std::uint64_t>(s) + 1, 1}, 1};
        const Matrix m = merging_transform(x, w, ctx);
        const Matrix c = sample_covariance(m);
        stats.col(s) << m.rowwise().mean(), c(0, 0), c(0, 1), c(1, 1);
    }
    Vector target(nx + 3);
    target << mu, cov(0, 0), cov(0, 1), cov(1, 1);
    const Vector avg = stats.rowwise().mean();
    const Vector se = ((stats.colwise() - avg).rowwise().squaredNorm() / (seeds - 1.0) / seeds).cwiseSqrt();
    const double z = ((avg - target).cwiseAbs().array() / se.array()).maxCoeff();
    o.check(z <= 3.0, fmt("merging PF mean/covariance over %d seeds: max|z| = %.2f", seeds, z));
    return o;
}

// --- equal-weight filters ----------------------------------------------------

struct LinearProblem {
    std::shared_ptr<const TransitionModel> model;
    ObservationBundle obs;
    Ensemble prior;
};

LinearProblem linear_problem(Index nx, Index ny, Index n, std::uint64_t seed, double q = 0.5, double r = 0.5) {
    LinearProblem p;
    p.model = std::make_shared<LinearGaussianModel>(0.9 * Matrix::Identity(nx, nx), GaussianCov::scalar(nx, q), 1);
    std::vector<Index> idx;
    for (Index k = 0; k < ny; ++k) idx.push_back(k * nx / ny);
    RngStream ys(seed, 0, kEnsembleStream, Purpose::Observation);
    p.obs = ObservationBundle(ys.normal_vector(ny), GaussianCov::scalar(ny, r), ObsOperator::selection(nx, idx), idx);
    p.prior = Ensemble::uniform(random_members(nx, n, seed + 1));
    return p;
}

Outcome equal_weights() {
    Outcome o;
    {
        const LinearProblem p = linear_problem(10, 5, 20, 31);
        StepContext ctx{RngFactory{5, 1}, 1};
        StepDiagnostics diag;
        IewpfReport rep;
        iewpf_step(p.prior, *p.model, p.obs, ctx, diag, &rep);
        const double spread = rep.final_log_weights.maxCoeff() - rep.final_log_weights.minCoeff();
        const double res = rep.residual.cwiseAbs().maxCoeff();
        o.check(spread < 1e-8, fmt("IEWPF final log-weight spread %.2e (bound 1e-8)", spread));
        o.check(res < 1e-10, fmt("IEWPF alpha-equation residual %.2e (bound 1e-10)", res));
    }
    {
        const Index n = 100;
        const double rho = 0.8;
        const Index want = static_cast<Index>(std::ceil(n * rho));
        EwpfConfig cfg;
        cfg.keep_fraction = rho;
        bool counts_ok = true;
        double var_sum = 0.0, shift = 0.0;
        const int seeds = 100;
        for (int s = 0; s < seeds; ++s) {
            const LinearProblem p = linear_problem(10, 5, n, 1000 + static_cast<std::uint64_t>(s));
            StepContext ctx{RngFactory{static_cast<std::uint64_t>(s) + 1, 1}, 1};
            StepDiagnostics diag;
            EwpfReport rep;
            ewpf_step(p.prior, *p.model, p.obs, cfg, ctx, diag, &rep);
            if (rep.kept != want || rep.at_target != want)
                o.note(fmt("seed %d: kept %lld, at target %lld", s, static_cast<long long>(rep.kept),
                           static_cast<long long>(rep.at_target)));
            counts_ok = counts_ok && rep.kept == want && rep.at_target == want;
            var_sum += rep.weight_variance;
            shift = std::max(shift, rep.mixture_shift);
        }
        o.check(counts_ok, fmt("EWPF keeps exactly %lld = ceil(N rho) particles at the target in all %d seeds",
                               static_cast<long long>(want), seeds));
        o.note(fmt("largest log-weight shift from the epsilon-Gaussian mixture term: %.1e", shift));
        const double emp = var_sum / seeds;
        const double ref = (1.0 - rho) / rho / static_cast<double>(n * n);
        const double rel = std::abs(emp - ref) / ref;
        o.check(rel <= 0.2, fmt("EWPF weight variance %.4e vs (1/N^2)(1-rho)/rho = %.4e, rel. diff %.1f%%", emp, ref,
                                100.0 * rel));
    }
    return o;
}

// --- optimal proposal theory -------------------------------------------------

Outcome optimal_proposal_theory() {
    Outcome o;
    const Index n = 50;
    const double q = 0.5, r = 0.5, y = 1.2, a = 0.9;
    const LinearGaussianModel model(Matrix::Constant(1, 1, a), GaussianCov::scalar(1, q), 1);
    const ObservationBundle obs(Vector::Constant(1, y), GaussianCov::scalar(1, r), ObsOperator::selection(1, {0}), {0});
    const Ensemble prior = Ensemble::uniform(random_members(1, n, 11));

    // Independent evaluation of p(y | x^{n−1}) = N(y; a x, q + r)
    Vector p(n);
    for (Index i = 0; i < n; ++i) {
        const double d = y - a * prior.members(0, i);
        p[i] = std::exp(-0.5 * d * d / (q + r)) / std::sqrt(2.0 * std::numbers::pi * (q + r));
    }
    const double py = p.mean();
    double bound = 0.0;
    for (Index i = 0; i < n; ++i) bound += std::pow(p[i] / (n * py) - 1.0 / n, 2);
    bound /= n;

    const ResamplePolicy never{ResamplePolicy::When::Never, 0.5, ResampleMethod::Systematic};
    StepDiagnostics d1, d2;
    const Ensemble e1 = optimal_proposal_step(prior, model, obs, never, StepContext{RngFactory{1, 1}, 1}, d1);
    const Ensemble e2 = optimal_proposal_step(prior, model, obs, never, StepContext{RngFactory{2, 1}, 1}, d2);
    const Vector w = e1.weights;
    const double wvar = (w.array() - 1.0 / n).square().mean();
    o.check(std::abs(wvar - bound) <= 1e-12 * std::max(1.0, bound) && std::abs(wvar - bound) / bound <= 1e-10,
            fmt("weight variance %.15e vs lower bound %.15e", wvar, bound));
    const double wdiff = (e1.weights - e2.weights).cwiseAbs().maxCoeff();
    const double xdiff = (e1.members - e2.members).cwiseAbs().maxCoeff();
    o.check(wdiff == 0.0 && xdiff > 0.0,
            fmt("weights identical across draws (max diff %.1e) while members differ (%.2f)", wdiff, xdiff));

    // W = p(y|x) p(x|x_I) / (N p(y) q(x|x_I)) with x drawn from the optimal
    // proposal N(m_I, s2): the within-group variance must vanish.
    const double s2 = q * r / (q + r);
    auto gauss = [](double v, double m, double var) {
        return std::exp(-0.5 * (v - m) * (v - m) / var) / std::sqrt(2.0 * std::numbers::pi * var);
    };
    auto sampler = [&](RngStream& rng) {
        const Index i = std::min<Index>(n - 1, static_cast<Index>(rng.uniform() * n));
        const double f = a * prior.members(0, i);
        const double m = f + q / (q + r) * (y - f);
        const double x = m + std::sqrt(s2) * rng.normal();
        const double wgt = gauss(y, x, r) * gauss(x, f, q) / (n * py * gauss(x, m, s2));
        return std::pair<Index, double>{i, wgt};
    };
    const Index draws = 200000;
    const TotalVarianceReport tv = total_variance_check(sampler, n, draws, 3);
    // Between-group variance of a uniform index over the fixed values is the
    // bound up to the sampling of the index.
    o.check(tv.holds && tv.within <= 1e-20 && std::abs(tv.total - bound) / bound < 0.05,
            fmt("total variance %.6e = between %.6e + within %.1e (residual %.1e); bound %.6e", tv.total,
                tv.between, tv.within, tv.residual, bound));
    return o;
}

// --- degeneracy scaling ------------------------------------------------------

Outcome degeneracy_scaling() {
    Outcome o;
    const Index n = 100;
    const int seeds = 50;
    const std::vector<Index> nys{1, 10, 100};
    std::vector<double> med;
    const auto boot = make_filter(Json{{"name", "bootstrap"}});
    const auto opt = make_filter(Json{{"name", "optimal_proposal"}});
    bool dominates = true;
    for (Index ny : nys) {
        // Snyder-style setup: x ~ N(0, I), identity dynamics with Q = I, H = I, R = I
        const LinearGaussianModel model(Matrix::Identity(ny, ny), GaussianCov::scalar(ny, 1.0), 1);
        std::vector<Index> idx(static_cast<std::size_t>(ny));
        for (Index k = 0; k < ny; ++k) idx[static_cast<std::size_t>(k)] = k;
        std::vector<double> mw;
        double ess_b = 0.0, ess_o = 0.0;
        for (int s = 0; s < seeds; ++s) {
            const std::uint64_t seed = 500 + static_cast<std::uint64_t>(s);
            RngStream ts(seed, 0, kEnsembleStream, Purpose::Truth);
            const Vector truth = ts.normal_vector(ny) + ts.normal_vector(ny);
            const Vector yv = truth + ts.normal_vector(ny);
            const ObservationBundle obs(yv, GaussianCov::scalar(ny, 1.0), ObsOperator::selection(ny, idx), idx);
            const Ensemble prior = Ensemble::uniform(random_members(ny, n, seed));
            const StepContext ctx{RngFactory{seed, 1}, 1};
            StepDiagnostics db, dopt;
            boot->cycle(prior, model, obs, ctx, db);
            opt->cycle(prior, model, obs, ctx, dopt);
            mw.push_back(db.max_weight);
            ess_b += db.ess / seeds;
            ess_o += dopt.ess / seeds;
        }
        std::nth_element(mw.begin(), mw.begin() + seeds / 2, mw.end());
        const double hi = mw[static_cast<std::size_t>(seeds / 2)];
        std::nth_element(mw.begin(), mw.begin() + seeds / 2 - 1, mw.end());
        med.push_back(0.5 * (hi + mw[static_cast<std::size_t>(seeds / 2 - 1)]));
        dominates = dominates && ess_o > ess_b;
        o.note(fmt("N_y=%-3lld  bootstrap median max-weight %.4f  mean ESS bootstrap %.2f optimal %.2f",
                   static_cast<long long>(ny), med.back(), ess_b, ess_o));
    }
    o.check(med[0] < med[1] && med[1] < med[2], "bootstrap median max-weight increases with N_y");
    o.check(med[2] > 0.9, fmt("median max-weight at N_y=100 is %.4f > 0.9", med[2]));
    o.check(dominates, "optimal proposal has larger mean ESS than bootstrap at every N_y");
    return o;
}

// --- transport constraints ---------------------------------------------------

/// Minimum of Σ t_ij c_ij over the basic feasible solutions of the N×N
/// transportation polytope with rows w and columns 1/N.
double vertex_enumeration_minimum(const Vector& w, const Matrix& cost) {
    const Index n = w.size();
    const Index cells = n * n, basis = 2 * n - 1;
    Matrix a = Matrix::Zero(2 * n, cells);
    Vector b(2 * n);
    for (Index i = 0; i < n; ++i)
        for (Index j = 0; j < n; ++j) {
            a(i, i * n + j) = 1.0;
            a(n + j, i * n + j) = 1.0;
        }
    b << w, Vector::Constant(n, 1.0 / static_cast<double>(n));
    double best = std::numeric_limits<double>::infinity();
    std::vector<bool> pick(static_cast<std::size_t>(cells), false);
    std::fill(pick.begin(), pick.begin() + basis, true);
    do {
        Matrix sub(2 * n, basis);
        std::vector<Index> cols;
        for (Index k = 0; k < cells; ++k)
            if (pick[static_cast<std::size_t>(k)]) {
                sub.col(static_cast<Index>(cols.size())) = a.col(k);
                cols.push_back(k);
            }
        Eigen::ColPivHouseholderQR<Matrix> qr(sub);
        if (qr.rank() < basis) continue;
        const Vector t = qr.solve(b);
        if ((sub * t - b).cwiseAbs().maxCoeff() > 1e-10 || t.minCoeff() < -1e-12) continue;
        double c = 0.0;
        for (Index k = 0; k < basis; ++k) c += t[k] * cost(cols[static_cast<std::size_t>(k)] / n, cols[static_cast<std::size_t>(k)] % n);
        best = std::min(best, c);
    } while (std::prev_permutation(pick.begin(), pick.end()));
    return best;
}

Outcome transport_constraints() {
    Outcome o;
    double marg = 0.0, lp_gap = 0.0, mean_err = 0.0;
    int plans = 0;
    for (std::uint64_t t = 0; t < 30; ++t) {
        const Index n = 2 + static_cast<Index>(t % 30);
        const Matrix x = random_members(2, n, 300 + t);
        const Vector w = random_weights(n, 400 + t);
        const TransportPlan exact = solve_transport(x, w);
        const TransportPlan sk = sinkhorn_transport(w, squared_distances(x), SinkhornConfig{0.05, 200000, 1e-12});
        const TransportPlan one = solve_transport_1d(x.row(0).transpose(), w);
        marg = std::max({marg, exact.marginal_error(w), sk.marginal_error(w), one.marginal_error(w)});
        plans += 3;
        EtpfConfig cfg;
        StepDiagnostics diag;
        mean_err = std::max(mean_err, (etpf_transform(x, w, cfg, diag).mean() - x * w).cwiseAbs().maxCoeff());
    }
    for (std::uint64_t t = 0; t < 30; ++t) {
        const Index n = 2 + static_cast<Index>(t % 3);
        const Matrix x = random_members(2, n, 600 + t);
        const Vector w = random_weights(n, 700 + t);
        const Matrix c = squared_distances(x);
        const TransportPlan plan = solve_transport(w, c);
        lp_gap = std::max(lp_gap, std::abs(plan.cost - vertex_enumeration_minimum(w, c)));
    }
    o.check(marg <= 1e-8, fmt("marginal error %.2e over %d plans (exact, Sinkhorn, 1-D)", marg, plans));
    o.check(lp_gap <= 1e-10, fmt("exact LP cost vs vertex enumeration, N = 2..4: max gap %.2e", lp_gap));
    o.check(mean_err <= 1e-12, fmt("ETPF weighted-mean error %.2e (bound 1e-12)", mean_err));
    return o;
}

// --- tempering recomposition -------------------------------------------------

Outcome tempering_recomposition() {
    Outcome o;
    auto run = [&](const Json& block, const std::string& label) {
        const GateResult g = kalman_gate_block(block);
        o.check(g.pass && g.var_z <= 3.0, fmt("%-28s N=%lld  mean |z| %.2f  variance |z| %.2f", label.c_str(),
                                              static_cast<long long>(g.n), g.max_z, g.var_z));
    };
    run(Json{{"name", "tempered"}, {"gammas", {0.25, 0.25, 0.25, 0.25}}}, "tempered (1/4,1/4,1/4,1/4)");
    for (double a : {0.3, 0.5, 0.7}) {
        run(Json{{"name", "enkpf"}, {"alpha", a}}, fmt("enkpf alpha=%.1f", a));
        run(Json{{"name", "hybrid_letpf_letkf"}, {"alpha", a}}, fmt("hybrid_letpf_letkf alpha=%.1f", a));
    }
    return o;
}

// --- local filters on Lorenz-96 ------------------------------------------------

Json l96_config() { return load_config(PFDA_SOURCE_DIR "/configs/l96_netf.json").raw; }

RunResult l96_run(const Json& filter, std::uint64_t seed) {
    Json doc = l96_config();
    doc["filter"] = filter;
    doc["run"]["seed"] = seed;
    return run_experiment(parse_config(doc), 1);
}

Outcome local_filters_l96() {
    Outcome o;
    const std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
    const Json netf{{"name", "netf"}, {"n", 40}, {"localization", {{"radius", 4.0}}}};
    const Json pot{{"name", "poterjoy"}, {"n", 40}, {"alpha", 0.999}, {"localization", {{"radius", 4.0}}}};
    for (const auto& [label, block] : std::vector<std::pair<std::string, Json>>{{"netf", netf}, {"poterjoy", pot}}) {
        double a = 0.0, f = 0.0, worst = 0.0;
        bool ran = true;
        std::ostringstream per;
        for (auto s : seeds) {
            const RunResult r = l96_run(block, s);
            ran = ran && !r.aborted && r.summary.cycles == 200;
            a += r.summary.rmse_a_mean / seeds.size();
            f += r.summary.rmse_f_mean / seeds.size();
            worst = std::max(worst, r.summary.wall_s);
            per << fmt(" %.3f", r.summary.rmse_a_mean);
        }
        o.note(label + " per-seed analysis RMSE:" + per.str());
        o.check(ran && a < 1.0 && a < f && worst < 300.0,
                fmt("%-8s mean over %zu seeds: RMSE_a %.3f, RMSE_f %.3f, slowest run %.1f s", label.c_str(),
                    seeds.size(), a, f, worst));
    }
    const RunResult b = l96_run(Json{{"name", "bootstrap"}, {"n", 40}}, 1);
    o.check(b.summary.degen_count >= 1,
            fmt("bootstrap degeneracy flags: %d of %d cycles (RMSE_a %.2f)", b.summary.degen_count, b.summary.cycles,
                b.summary.rmse_a_mean));
    return o;
}

// --- Poterjoy limits ---------------------------------------------------------

Outcome poterjoy_limits() {
    Outcome o;
    const Index nx = 12, n = 30;
    const Matrix x = random_members(nx, n, 77);
    const Ensemble prior = Ensemble::uniform(x);
    const Index loc = 5;
    const ObservationBundle obs(Vector::Constant(1, 0.8), GaussianCov::scalar(1, 0.5),
                                ObsOperator::selection(nx, {loc}), {loc});
    const StepContext ctx{RngFactory{9, 1}, 1};

    // Full PF: bootstrap weights from an independent likelihood evaluation
    Vector w(n);
    for (Index i = 0; i < n; ++i) w[i] = std::exp(-0.5 * std::pow(0.8 - x(loc, i), 2) / 0.5);
    w /= w.sum();
    const Vector pf_mean = x * w;
    RngStream rs = ctx.rng.ensemble_stream(Purpose::Resample, 0);
    const ResampleResult k = systematic_resample(w, rs);

    PoterjoyConfig full;
    full.alpha = 1.0;
    full.loc.taper = Taper::TopHat;
    full.loc.radius = static_cast<double>(nx);
    StepDiagnostics d1;
    PoterjoyReport rep;
    const Ensemble a = poterjoy_lpf_step(prior, obs, full, ctx, d1, &rep);
    double mean_err = (rep.xbar - pf_mean).cwiseAbs().maxCoeff();
    // Updated members are the resampled PF members about the PF mean, scaled
    double shape_err = 0.0;
    for (Index j = 0; j < nx; ++j)
        for (Index i = 0; i < n; ++i)
            shape_err = std::max(shape_err, std::abs(a.members(j, i) - pf_mean[j] -
                                                     rep.r1[j] * (x(j, k.indices[static_cast<std::size_t>(i)]) - pf_mean[j])));
    o.check(mean_err <= 1e-10 && rep.r2.cwiseAbs().maxCoeff() == 0.0 && shape_err <= 1e-10,
            fmt("alpha=1, rho=1: local mean vs full PF %.1e, prior term %.1e, resampled-member residual %.1e", mean_err,
                rep.r2.cwiseAbs().maxCoeff(), shape_err));

    PoterjoyConfig narrow;
    narrow.alpha = 0.99;
    narrow.loc.taper = Taper::TopHat;
    narrow.loc.radius = 1.0;
    StepDiagnostics d2;
    const Ensemble b = poterjoy_lpf_step(prior, obs, narrow, ctx, d2);
    double outside = 0.0;
    for (Index j = 0; j < nx; ++j)
        if (cyclic_distance(static_cast<double>(j), static_cast<double>(loc), nx) > 1.0)
            outside = std::max(outside, (b.members.row(j) - x.row(j)).cwiseAbs().maxCoeff());
    PoterjoyConfig off = narrow;
    off.alpha = 0.0;
    StepDiagnostics d3;
    const double all = max_abs(poterjoy_lpf_step(prior, obs, off, ctx, d3).members - x);
    o.check(outside <= 1e-12 && all <= 1e-12,
            fmt("rho=0: change outside the taper support %.1e; alpha*rho=0 everywhere %.1e", outside, all));
    return o;
}

// --- determinism -------------------------------------------------------------

Outcome determinism() {
    Outcome o;
    const std::vector<Json> filters{
        Json{{"name", "netf"}, {"n", 40}, {"localization", {{"radius", 4.0}}}},
        Json{{"name", "poterjoy"}, {"n", 40}, {"alpha", 0.999}, {"localization", {{"radius", 4.0}}}},
        Json{{"name", "letpf"}, {"n", 40}, {"localization", {{"radius", 4.0}}}},
        Json{{"name", "bootstrap"}, {"n", 40}},
        Json{{"name", "enkpf"}, {"n", 40}},
    };
    for (const auto& f : filters) {
        Json doc = l96_config();
        doc["filter"] = f;
        doc["run"]["cycles"] = 50;
        const ExperimentConfig cfg = parse_config(doc);
        const std::string name = f["name"].get<std::string>();
        const std::string one = diagnostics_csv(name, run_experiment(cfg, 1).records);
        const std::string two = diagnostics_csv(name, run_experiment(cfg, 4).records);
        const std::string again = diagnostics_csv(name, run_experiment(cfg, 3).records);
        o.check(one == two && one == again,
                fmt("%-10s 50 L96 cycles, threads 1/4/3: CSV %s (%zu bytes)", name.c_str(),
                    one == two && one == again ? "byte-identical" : "differs", one.size()));
    }
    return o;
}

/// Criteria that are expected to fail, with the reason printed next to FAIL.
const std::map<std::string, std::string> kKnownFailures{
    {"oracle_gate", "agm: bridged weights mix the PF and uniform-weight centers, biased in the linear-Gaussian case"},
};

}  // namespace

int main() {
    struct Criterion {
        std::string key;
        std::string title;
        std::function<Outcome()> run;
    };
    const std::vector<Criterion> criteria{
        {"oracle_gate", "Kalman oracle gate", oracle_gate},
        {"second_order", "second-order exactness", second_order},
        {"equal_weights", "equal-weight filters", equal_weights},
        {"optimal_proposal", "optimal-proposal theory", optimal_proposal_theory},
        {"degeneracy", "degeneracy scaling", degeneracy_scaling},
        {"transport", "transport constraints", transport_constraints},
        {"tempering", "Gaussian tempering recomposition", tempering_recomposition},
        {"l96_local", "local filters on Lorenz-96", local_filters_l96},
        {"poterjoy_limits", "Poterjoy limits", poterjoy_limits},
        {"determinism", "determinism across thread counts", determinism},
    };
    int unexpected = 0, passed = 0;
    for (const auto& c : criteria) {
        const auto t0 = std::chrono::steady_clock::now();
        Outcome out;
        try {
            out = c.run();
        } catch (const std::exception& e) {
            out.check(false, std::string("exception: ") + e.what());
        }
        const auto known = kKnownFailures.find(c.key);
        std::string tag = out.pass ? "PASS" : "FAIL";
        if (!out.pass && known != kKnownFailures.end()) tag += " (known: " + known->second + ")";
        std::printf("[%s] %s  (%.1f s)\n", tag.c_str(), c.title.c_str(), seconds(t0));
        for (const auto& d : out.details) std::printf("    %s\n", d.c_str());
        std::fflush(stdout);
        if (out.pass) ++passed;
        else if (known == kKnownFailures.end()) ++unexpected;
    }
    std::printf("%d of %zu criteria passed; %d unexpected failures\n", passed, criteria.size(), unexpected);
    return unexpected == 0 ? 0 : 1;
}
