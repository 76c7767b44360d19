#include "pfda/proposal_filters.hpp"

#include <boost/math/tools/toms748_solve.hpp>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

namespace pfda {

namespace {

std::uint32_t last_step(const TransitionModel& model) {
    return static_cast<std::uint32_t>(model.steps_per_cycle() - 1);
}

/// Noisy propagation over all but the final model step.
Matrix pre_steps(const TransitionModel& model, const Matrix& members, const StepContext& ctx) {
    return forecast_ensemble(model, members, ctx, true, model.steps_per_cycle() - 1);
}

Matrix deterministic_step(const TransitionModel& model, const Matrix& members, const StepContext& ctx) {
    Matrix out(members.rows(), members.cols());
    parallel_for(members.cols(), ctx.threads, [&](Index i) {
        out.col(i) = model.step(members.col(i));
        if (!out.col(i).allFinite()) throw Error(ErrorCode::NonFiniteState, "model step produced a non-finite state");
    });
    return out;
}

Vector log_of(const Vector& w) { return w.array().log().matrix(); }

const Matrix& linear_h(const ObservationBundle& obs, const char* who) {
    if (!obs.op->is_linear())
        throw Error(ErrorCode::DimensionMismatch, std::string(who) + " needs a linear observation operator");
    return obs.h();
}

void set_forecast_mean(StepDiagnostics& diag, const Matrix& f, const Vector& w) { diag.forecast_mean = f * w; }

struct GainParts {
    Matrix k;       // QHᵀS⁻¹
    GaussianCov s;  // HQHᵀ + R
};

GainParts model_gain(const GaussianCov& q, const Matrix& h, const GaussianCov& r) {
    Matrix qh = q.matrix() * h.transpose();
    GainParts g;
    g.s = GaussianCov(Matrix(h * qh + r.matrix()));
    g.k = g.s.solve(Matrix(qh.transpose())).transpose();
    return g;
}

Matrix symmetrize(const Matrix& m) { return 0.5 * (m + m.transpose()); }

}  // namespace

Ensemble bootstrap_analysis(const Ensemble& forecast, const ObservationBundle& obs, const ResamplePolicy& policy,
                            const StepContext& ctx, StepDiagnostics& diag) {
    Vector logw = log_of(forecast.weights) + obs.log_likelihoods(forecast.members);
    RngStream rng = ctx.rng.ensemble_stream(Purpose::Resample);
    return finish_with_log_weights(forecast.members, logw, policy, rng, diag);
}

// ---------------------------------------------------------------------------

double relaxation_increment(const Vector& shift, const Vector& xi, const GaussianCov& q, const GaussianCov& qhat) {
    return 0.5 * qhat.mahalanobis(xi) - 0.5 * q.mahalanobis(shift + xi);
}

Matrix relaxation_proposal_step(const Matrix& members, Vector& logw, const TransitionModel& model,
                                const ObservationBundle& obs, const RelaxationConfig& cfg, const StepContext& ctx,
                                std::uint32_t model_step) {
    if (cfg.t.rows() != members.rows() || cfg.t.cols() != obs.size())
        throw Error(ErrorCode::DimensionMismatch, "relaxation gain has the wrong shape");
    Matrix out(members.rows(), members.cols());
    parallel_for(members.cols(), ctx.threads, [&](Index i) {
        const Vector f = model.step(members.col(i));
        const Vector shift = cfg.t * (obs.y - obs.op->apply(f));
        RngStream s = ctx.rng.stream(static_cast<std::uint64_t>(i), Purpose::Proposal, model_step);
        const Vector xi = cfg.qhat.sample(s);
        out.col(i) = f + shift + xi;
        if (!out.col(i).allFinite()) throw Error(ErrorCode::NonFiniteState, "relaxation produced a non-finite state");
        logw[i] += relaxation_increment(shift, xi, model.noise(), cfg.qhat);
    });
    return out;
}

Ensemble relaxation_cycle(const Ensemble& previous, const TransitionModel& model, const ObservationBundle& obs,
                          const RelaxationConfig& cfg, const ResamplePolicy& policy, const StepContext& ctx,
                          StepDiagnostics& diag) {
    Vector logw = log_of(previous.weights);
    diag.forecast_mean = forecast_ensemble(model, previous.members, ctx, false) * previous.weights;
    Matrix x = previous.members;
    for (int m = 0; m < model.steps_per_cycle(); ++m)
        x = relaxation_proposal_step(x, logw, model, obs, cfg, ctx, static_cast<std::uint32_t>(m));
    logw += obs.log_likelihoods(x);
    RngStream rng = ctx.rng.ensemble_stream(Purpose::Resample);
    return finish_with_log_weights(std::move(x), logw, policy, rng, diag);
}

// ---------------------------------------------------------------------------

Ensemble wekf_step(const Ensemble& previous, const TransitionModel& model, const ObservationBundle& obs,
                   const ResamplePolicy& policy, const StepContext& ctx, StepDiagnostics& diag) {
    const Matrix& h = linear_h(obs, "WEKF");
    const GaussianCov& q = model.noise();
    const Matrix f = deterministic_step(model, pre_steps(model, previous.members, ctx), ctx);
    set_forecast_mean(diag, f, previous.weights);

    // Gain from the sample covariance of the noise-free forecasts
    const Matrix p = sample_covariance(f);
    const Matrix ph = p * h.transpose();
    GaussianCov s(Matrix(h * ph + obs.r.matrix()));
    const Matrix k = s.solve(Matrix(ph.transpose())).transpose();
    const Index nx = f.rows();
    const Matrix ikh = Matrix::Identity(nx, nx) - k * h;
    GaussianCov qhat(symmetrize(ikh * q.matrix() * ikh.transpose() + k * obs.r.matrix() * k.transpose()));

    Matrix x(nx, f.cols());
    Vector logw = log_of(previous.weights);
    parallel_for(f.cols(), ctx.threads, [&](Index i) {
        RngStream rs = ctx.rng.stream(static_cast<std::uint64_t>(i), Purpose::Proposal, last_step(model));
        const Vector beta = qhat.sample(rs);
        x.col(i) = f.col(i) + k * (obs.y - h * f.col(i)) + beta;
        const Vector dx = x.col(i) - f.col(i);
        logw[i] += -0.5 * q.mahalanobis(dx) + 0.5 * qhat.mahalanobis(beta) + obs.log_likelihood(x.col(i));
    });
    RngStream rng = ctx.rng.ensemble_stream(Purpose::Resample);
    return finish_with_log_weights(std::move(x), logw, policy, rng, diag);
}

// ---------------------------------------------------------------------------

OptimalProposalGaussian::OptimalProposalGaussian(const GaussianCov& q, const Matrix& h, const GaussianCov& r) {
    GainParts g = model_gain(q, h, r);
    gain = g.k;
    marginal = g.s;
    const Index nx = q.dim();
    proposal = GaussianCov(symmetrize((Matrix::Identity(nx, nx) - gain * h) * q.matrix()));
}

Vector OptimalProposalGaussian::mean(const Vector& f, const Vector& y, const Matrix& h) const {
    return f + gain * (y - h * f);
}

Vector optimal_proposal_log_weights(const Matrix& forecasts, const ObservationBundle& obs, const GaussianCov& q) {
    const Matrix& h = linear_h(obs, "optimal proposal");
    OptimalProposalGaussian op(q, h, obs.r);
    Vector out(forecasts.cols());
    for (Index i = 0; i < forecasts.cols(); ++i)
        out[i] = gaussian_log_density(obs.y, h * forecasts.col(i), op.marginal);
    return out;
}

Ensemble optimal_proposal_step(const Ensemble& previous, const TransitionModel& model, const ObservationBundle& obs,
                               const ResamplePolicy& policy, const StepContext& ctx, StepDiagnostics& diag) {
    const Matrix& h = linear_h(obs, "optimal proposal");
    const Matrix f = deterministic_step(model, pre_steps(model, previous.members, ctx), ctx);
    set_forecast_mean(diag, f, previous.weights);
    OptimalProposalGaussian op(model.noise(), h, obs.r);
    Matrix x(f.rows(), f.cols());
    Vector logw = log_of(previous.weights);
    parallel_for(f.cols(), ctx.threads, [&](Index i) {
        RngStream rs = ctx.rng.stream(static_cast<std::uint64_t>(i), Purpose::Proposal, last_step(model));
        x.col(i) = op.mean(f.col(i), obs.y, h) + op.proposal.sample(rs);
        logw[i] += gaussian_log_density(obs.y, h * f.col(i), op.marginal);
    });
    RngStream rng = ctx.rng.ensemble_stream(Purpose::Resample);
    return finish_with_log_weights(std::move(x), logw, policy, rng, diag);
}

// ---------------------------------------------------------------------------

double implicit_objective(const Vector& x, const Vector& f, const GaussianCov& q, const ObservationBundle& obs) {
    return -obs.log_likelihood(x) - gaussian_log_density(x, f, q);
}

namespace {

Vector implicit_gradient(const Vector& x, const Vector& f, const GaussianCov& q, const ObservationBundle& obs) {
    const Matrix j = obs.op->jacobian(x);
    return q.solve(Vector(x - f)) - j.transpose() * obs.r.solve(Vector(obs.y - obs.op->apply(x)));
}

Matrix gauss_newton_hessian(const Vector& x, const GaussianCov& q, const ObservationBundle& obs) {
    const Matrix j = obs.op->jacobian(x);
    return symmetrize(q.inverse() + j.transpose() * obs.r.solve(j));
}

Matrix fd_hessian(const Vector& x, const Vector& f, const GaussianCov& q, const ObservationBundle& obs) {
    const Index n = x.size();
    Matrix hess(n, n);
    for (Index k = 0; k < n; ++k) {
        const double e = 1e-5 * std::max(1.0, std::abs(x[k]));
        Vector xp = x, xm = x;
        xp[k] += e;
        xm[k] -= e;
        hess.col(k) = (implicit_gradient(xp, f, q, obs) - implicit_gradient(xm, f, q, obs)) / (2.0 * e);
    }
    return symmetrize(hess);
}

}  // namespace

ImplicitParticle implicit_map(const Vector& f, const GaussianCov& q, const ObservationBundle& obs, const Vector& xi,
                              const ImplicitConfig& cfg) {
    const Index n = f.size();
    if (xi.size() != n) throw Error(ErrorCode::DimensionMismatch, "implicit map reference draw has wrong size");
    auto objective = [&](const Vector& x) { return implicit_objective(x, f, q, obs); };

    // Damped Newton with Armijo backtracking
    Vector x = f;
    if (obs.op->is_linear()) {
        OptimalProposalGaussian op(q, obs.h(), obs.r);
        x = op.mean(f, obs.y, obs.h());
    }
    double fx = objective(x);
    Vector g = implicit_gradient(x, f, q, obs);
    int it = 0;
    while (g.norm() >= cfg.gradient_tol) {
        if (++it > cfg.max_iterations)
            throw Error(ErrorCode::NonConvexObjective, "implicit map minimization did not converge");
        if (!g.allFinite()) throw Error(ErrorCode::NonFiniteGradient, "implicit objective gradient is not finite");
        Matrix hess = obs.op->is_linear() ? gauss_newton_hessian(x, q, obs) : fd_hessian(x, f, q, obs);
        Eigen::LLT<Matrix> llt(hess);
        if (llt.info() != Eigen::Success) llt.compute(gauss_newton_hessian(x, q, obs));
        Vector dir = -llt.solve(g);
        if (g.dot(dir) >= 0.0) dir = -g;
        double t = 1.0;
        double ft = objective(x + dir);
        while (!(ft <= fx + 1e-4 * t * g.dot(dir)) && t > 1e-12) {
            t *= 0.5;
            ft = objective(x + t * dir);
        }
        if (t <= 1e-12) {
            // No further decrease available at double precision
            if (g.norm() < 1e3 * cfg.gradient_tol) break;
            throw Error(ErrorCode::NonConvexObjective, "implicit map line search stalled");
        }
        x += t * dir;
        fx = ft;
        g = implicit_gradient(x, f, q, obs);
    }

    ImplicitParticle p;
    p.map_point = x;
    p.phi = fx;
    const Matrix jac = obs.op->jacobian(x);
    GaussianCov post(Matrix(symmetrize(GaussianCov(gauss_newton_hessian(x, q, obs)).inverse())));
    const Matrix& l = post.sqrt_factor();
    double log_det_l = 0.0;
    for (Index k = 0; k < n; ++k) log_det_l += std::log(std::abs(l(k, k)));

    const double rho = xi.squaredNorm();
    if (rho < 1e-300) {
        p.x = x;
        p.lambda = 1.0;
        p.log_jacobian = log_det_l;
        return p;
    }
    const Vector dir = l * xi;
    auto residual = [&](double lam) { return objective(Vector(x + lam * dir)) - p.phi - 0.5 * rho; };
    double lo = 0.0;
    double hi = 1.0;
    double rhi = residual(hi);
    int expand = 0;
    while (rhi < 0.0) {
        if (++expand > 60) {
            p.flagged = true;
            p.x = x;
            p.log_jacobian = -std::numeric_limits<double>::infinity();
            return p;
        }
        lo = hi;
        hi *= 2.0;
        rhi = residual(hi);
    }
    double lam = hi;
    if (rhi != 0.0) {
        std::uintmax_t max_iter = 200;
        auto [a, b] = boost::math::tools::toms748_solve(residual, lo, hi, residual(lo), rhi,
                                                        boost::math::tools::eps_tolerance<double>(52), max_iter);
        lam = 0.5 * (a + b);
        if (std::abs(residual(a)) < std::abs(residual(lam))) lam = a;
        if (std::abs(residual(b)) < std::abs(residual(lam))) lam = b;
    }
    p.lambda = lam;
    p.x = x + lam * dir;
    p.residual = residual(lam);
    const double dfl = std::abs(implicit_gradient(p.x, f, q, obs).dot(dir));
    p.log_jacobian = log_det_l + static_cast<double>(n - 1) * std::log(lam) + std::log(rho) - std::log(dfl);
    return p;
}

Ensemble implicit_pf_step(const Ensemble& previous, const TransitionModel& model, const ObservationBundle& obs,
                          const ImplicitConfig& cfg, const ResamplePolicy& policy, const StepContext& ctx,
                          StepDiagnostics& diag) {
    const Matrix f = deterministic_step(model, pre_steps(model, previous.members, ctx), ctx);
    set_forecast_mean(diag, f, previous.weights);
    Matrix x(f.rows(), f.cols());
    Vector logw = log_of(previous.weights);
    std::vector<char> flagged(static_cast<std::size_t>(f.cols()), 0);
    parallel_for(f.cols(), ctx.threads, [&](Index i) {
        RngStream rs = ctx.rng.stream(static_cast<std::uint64_t>(i), Purpose::Proposal, last_step(model));
        const Vector xi = rs.normal_vector(f.rows());
        ImplicitParticle p = implicit_map(f.col(i), model.noise(), obs, xi, cfg);
        x.col(i) = p.x;
        logw[i] += -p.phi + p.log_jacobian;
        flagged[static_cast<std::size_t>(i)] = p.flagged ? 1 : 0;
    });
    const auto nflag = std::count(flagged.begin(), flagged.end(), char{1});
    if (nflag > 0) diag.warn(std::to_string(nflag) + " implicit-map roots not bracketed; particles dropped");
    RngStream rng = ctx.rng.ensemble_stream(Purpose::Resample);
    return finish_with_log_weights(std::move(x), logw, policy, rng, diag);
}

// ---------------------------------------------------------------------------

Ensemble auxiliary_pf_step(const Ensemble& previous, const TransitionModel& model, const ObservationBundle& obs,
                           AuxiliaryMode mode, const ResamplePolicy& policy, const StepContext& ctx,
                           StepDiagnostics& diag) {
    const Index n = previous.size();
    Vector log_first = log_of(previous.weights);
    Matrix probe;          // probe mode: noise-free cycle forecasts
    Matrix f;              // optimal mode: deterministic last-step forecasts
    Vector probe_ll;
    std::optional<OptimalProposalGaussian> op;
    if (mode == AuxiliaryMode::Probe) {
        probe = forecast_ensemble(model, previous.members, ctx, false);
        probe_ll = obs.log_likelihoods(probe);
        log_first += probe_ll;
        diag.forecast_mean = probe * previous.weights;
    } else {
        const Matrix& h = linear_h(obs, "auxiliary optimal preset");
        f = deterministic_step(model, pre_steps(model, previous.members, ctx), ctx);
        set_forecast_mean(diag, f, previous.weights);
        op.emplace(model.noise(), h, obs.r);
        for (Index i = 0; i < n; ++i) log_first[i] += gaussian_log_density(obs.y, h * f.col(i), op->marginal);
    }

    Vector beta;
    try {
        beta = log_weights_to_weights(log_first);
    } catch (const Error& e) {
        if (e.code() != ErrorCode::AllZeroWeights) throw;
        diag.warn("first-stage weights vanished; using uniform index proposal");
        beta = uniform_weights(n);
    }
    RngStream first = ctx.rng.ensemble_stream(Purpose::Mixture);
    const ResampleResult parents = systematic_resample(beta, first);

    Matrix x(previous.dim(), n);
    Vector logw = Vector::Zero(n);
    parallel_for(n, ctx.threads, [&](Index i) {
        const Index j = parents.indices[static_cast<std::size_t>(i)];
        if (mode == AuxiliaryMode::Probe) {
            // Fresh noise keyed by the new particle index
            x.col(i) = forecast_cycle(model, previous.members.col(j), ctx.rng, static_cast<std::uint64_t>(i));
            logw[i] = obs.log_likelihood(x.col(i)) - probe_ll[j];
        } else {
            RngStream rs = ctx.rng.stream(static_cast<std::uint64_t>(i), Purpose::Proposal, last_step(model));
            x.col(i) = op->mean(f.col(j), obs.y, obs.h()) + op->proposal.sample(rs);
        }
    });
    RngStream rng = ctx.rng.ensemble_stream(Purpose::Resample);
    return finish_with_log_weights(std::move(x), logw, policy, rng, diag);
}

// ---------------------------------------------------------------------------

double ewpf_log_gamma_n(Index nx, double epsilon, double gamma_u) {
    const double n = static_cast<double>(nx);
    return (0.5 * n * std::log(2.0) + std::log(epsilon) + n * std::log(gamma_u) - 0.5 * n * std::log(std::numbers::pi) -
            std::log(1.0 - epsilon)) /
           n;
}

Ensemble ewpf_step(const Ensemble& previous, const TransitionModel& model, const ObservationBundle& obs,
                   const EwpfConfig& cfg, const StepContext& ctx, StepDiagnostics& diag, EwpfReport* report) {
    const Matrix& h = linear_h(obs, "EWPF");
    const GaussianCov& q = model.noise();
    q.log_det();  // requires a positive definite Q
    const Index n = previous.size();
    const Index nx = previous.dim();
    const double nxd = static_cast<double>(nx);
    const Matrix f = deterministic_step(model, pre_steps(model, previous.members, ctx), ctx);
    set_forecast_mean(diag, f, previous.weights);

    const double eps = cfg.epsilon >= 0.0 ? cfg.epsilon : 1e-4 / static_cast<double>(n);
    const double gu = cfg.gamma_u;
    const double log_gn = std::isnan(cfg.log_gamma_n) ? ewpf_log_gamma_n(nx, eps, gu) : cfg.log_gamma_n;
    const double half_logdet_2pi_q = 0.5 * (q.log_det() + nxd * std::log(2.0 * std::numbers::pi));
    const double log_qu = -nxd * std::log(2.0 * gu) - 0.5 * q.log_det();

    GainParts g = model_gain(q, h, obs.r);
    const Matrix hqh = h * q.matrix() * h.transpose();
    const Matrix l = q.sqrt_factor();

    Vector c(n);
    Matrix d(obs.size(), n);
    for (Index i = 0; i < n; ++i) {
        d.col(i) = obs.y - h * f.col(i);
        c[i] = -std::log(previous.weights[i]) + 0.5 * g.s.mahalanobis(d.col(i));
    }
    const Index keep = std::clamp<Index>(static_cast<Index>(std::ceil(static_cast<double>(n) * cfg.keep_fraction)), 1, n);
    std::vector<Index> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), Index{0});
    std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) { return c[a] < c[b]; });
    const double cmax = c[order[static_cast<std::size_t>(keep - 1)]];
    std::vector<char> kept(static_cast<std::size_t>(n), 0);
    for (Index k = 0; k < keep; ++k) kept[static_cast<std::size_t>(order[static_cast<std::size_t>(k)])] = 1;

    // Mixture density of β = L u (uniform box) or β = γ_N L z (Gaussian)
    auto log_mixture = [&](const Vector& whitened, double log_gauss) {
        const bool inside = whitened.cwiseAbs().maxCoeff() <= gu;
        const double lu = inside ? std::log(1.0 - eps) + log_qu : -std::numeric_limits<double>::infinity();
        const double lg = std::log(eps) + log_gauss;
        const double m = std::max(lu, lg);
        return m + std::log(std::exp(lu - m) + std::exp(lg - m));
    };

    Matrix x(nx, n);
    Vector ctilde(n);
    Vector cdet = Vector::Constant(n, std::numeric_limits<double>::infinity());  // uniform-branch value without the ε-Gaussian term
    Vector alpha = Vector::Zero(n);
    std::vector<bool> gaussian(static_cast<std::size_t>(n), false);
    std::vector<char> uniform_branch(static_cast<std::size_t>(n), 0);
    int negative_disc = 0;
    for (Index i = 0; i < n; ++i) {
        if (!kept[static_cast<std::size_t>(i)]) {
            x.col(i) = f.col(i);
            ctilde[i] = std::numeric_limits<double>::infinity();
            continue;
        }
        const Vector rinv_d = obs.r.solve(Vector(d.col(i)));
        const double a = 0.5 * rinv_d.dot(hqh * g.s.solve(Vector(d.col(i))));
        const double b = 0.5 * rinv_d.dot(d.col(i)) - cmax - std::log(previous.weights[i]);
        double al = 1.0;
        if (a > 0.0) {
            double disc = 1.0 - b / a;
            if (disc < 0.0) {
                if (disc > -1e-12) {
                    disc = 0.0;
                } else {
                    ++negative_disc;
                    ctilde[i] = std::numeric_limits<double>::infinity();
                    x.col(i) = f.col(i);
                    continue;
                }
            }
            al = 1.0 + std::sqrt(disc);
        }
        alpha[i] = al;
        const Vector shift = f.col(i) + al * (g.k * d.col(i));
        RngStream rs = ctx.rng.stream(static_cast<std::uint64_t>(i), Purpose::Proposal, last_step(model));
        const double pick = rs.uniform();
        if (pick < eps) {
            gaussian[static_cast<std::size_t>(i)] = true;
            const Vector z = rs.normal_vector(nx);
            const double gn = std::exp(log_gn);
            x.col(i) = shift + gn * (l * z);
            const double log_gauss = -0.5 * z.squaredNorm() - nxd * log_gn - half_logdet_2pi_q;
            const Vector dx = x.col(i) - f.col(i);
            const Vector innov = obs.y - h * x.col(i);
            ctilde[i] = -std::log(previous.weights[i]) + 0.5 * q.mahalanobis(dx) + 0.5 * obs.r.mahalanobis(innov) +
                        log_mixture(gn * z, log_gauss);
        } else {
            uniform_branch[static_cast<std::size_t>(i)] = 1;
            Vector u(nx);
            for (Index k = 0; k < nx; ++k) u[k] = rs.uniform(-gu, gu);
            x.col(i) = shift + l * u;
            // Gaussian component is negligible this far out in whitened units
            const double log_gauss = -0.5 * u.squaredNorm() / std::exp(2.0 * log_gn) - nxd * log_gn - half_logdet_2pi_q;
            cdet[i] = (al * al - 2.0 * al) * a - std::log(previous.weights[i]) + 0.5 * rinv_d.dot(d.col(i)) +
                      std::log(1.0 - eps) + log_qu;
            ctilde[i] = (al * al - 2.0 * al) * a - std::log(previous.weights[i]) + 0.5 * rinv_d.dot(d.col(i)) +
                        log_mixture(u, log_gauss);
        }
    }
    if (negative_disc > 0) diag.warn(std::to_string(negative_disc) + " EWPF particles with negative discriminant dropped");

    Vector logw = -ctilde;
    Vector w = log_weights_to_weights(logw);
    diag.record_weights(w);
    const double target = cmax + std::log(1.0 - eps) + log_qu;
    if (report) {
        report->kept = keep;
        report->target = target;
        report->log_weights = logw;
        report->weights = w;
        report->alpha = alpha;
        report->gaussian_branch = gaussian;
        report->at_target = 0;
        report->mixture_shift = 0.0;
        for (Index i = 0; i < n; ++i) {
            if (!std::isfinite(cdet[i])) continue;
            if (std::abs(cdet[i] - target) <= 1e-8 * std::max(1.0, std::abs(target))) ++report->at_target;
            report->mixture_shift = std::max(report->mixture_shift, std::abs(ctilde[i] - cdet[i]));
        }
        report->weight_variance = (w.array() - 1.0 / static_cast<double>(n)).square().mean();
    }
    RngStream rng = ctx.rng.ensemble_stream(Purpose::Resample);
    diag.resampled = true;
    return apply_resample(Ensemble(std::move(x), w), systematic_resample(w, rng));
}

// ---------------------------------------------------------------------------

double iewpf_residual(double alpha, double gamma, double n, double a) {
    return (alpha - 1.0) * gamma - n * std::log(alpha) - a;
}

double solve_iewpf_alpha(double gamma, double n, double a) {
    if (!(a >= 0.0) || !std::isfinite(a)) throw Error(ErrorCode::NoPositiveRoot, "IEWPF deficit must be finite and >= 0");
    if (a == 0.0) return 1.0;
    if (gamma == 0.0) return std::exp(-a / n);
    auto h = [&](double al) { return iewpf_residual(al, gamma, n, a); };
    double lo, hi;
    if (gamma >= n) {
        // increasing on [1, ∞)
        lo = 1.0;
        hi = 2.0;
        int k = 0;
        while (h(hi) < 0.0) {
            if (++k > 2000) throw Error(ErrorCode::NoPositiveRoot, "IEWPF alpha bracket failed");
            lo = hi;
            hi *= 2.0;
        }
    } else {
        // decreasing on (0, 1]
        hi = 1.0;
        lo = 0.5;
        int k = 0;
        while (h(lo) < 0.0) {
            if (++k > 2000) throw Error(ErrorCode::NoPositiveRoot, "IEWPF alpha bracket failed");
            hi = lo;
            lo *= 0.5;
        }
    }
    const double flo = h(lo);
    const double fhi = h(hi);
    if (flo == 0.0) return lo;
    if (fhi == 0.0) return hi;
    std::uintmax_t max_iter = 200;
    auto [x0, x1] = boost::math::tools::toms748_solve(h, lo, hi, flo, fhi,
                                                      boost::math::tools::eps_tolerance<double>(52), max_iter);
    return std::abs(h(x0)) <= std::abs(h(x1)) ? x0 : x1;
}

Ensemble iewpf_step(const Ensemble& previous, const TransitionModel& model, const ObservationBundle& obs,
                    const StepContext& ctx, StepDiagnostics& diag, IewpfReport* report) {
    const Matrix& h = linear_h(obs, "IEWPF");
    const GaussianCov& q = model.noise();
    const Index n = previous.size();
    const Index nx = previous.dim();
    const double nxd = static_cast<double>(nx);
    const Matrix f = deterministic_step(model, pre_steps(model, previous.members, ctx), ctx);
    set_forecast_mean(diag, f, previous.weights);

    GainParts g = model_gain(q, h, obs.r);
    GaussianCov p(symmetrize(q.matrix() - g.k * h * q.matrix()));
    const Matrix& lp = p.sqrt_factor();

    Vector c(n);
    for (Index i = 0; i < n; ++i) c[i] = -std::log(previous.weights[i]) + 0.5 * g.s.mahalanobis(Vector(obs.y - h * f.col(i)));
    if (!c.allFinite()) throw Error(ErrorCode::NoPositiveRoot, "IEWPF needs positive prior weights");
    const double target = c.maxCoeff();

    Matrix x(nx, n);
    Vector deficit(n), gam(n), alpha(n), resid(n), final_lw(n);
    parallel_for(n, ctx.threads, [&](Index i) {
        RngStream rs = ctx.rng.stream(static_cast<std::uint64_t>(i), Purpose::Proposal, last_step(model));
        const Vector xi = rs.normal_vector(nx);
        const double gm = xi.squaredNorm();
        const double a = 2.0 * (target - c[i]);
        const double al = solve_iewpf_alpha(gm, nxd, a);
        const Vector xa = f.col(i) + g.k * (obs.y - h * f.col(i));
        x.col(i) = xa + std::sqrt(al) * (lp * xi);
        deficit[i] = a;
        gam[i] = gm;
        alpha[i] = al;
        resid[i] = iewpf_residual(al, gm, nxd, a);
        // Independent evaluation: target density over the proposal density (shared constants dropped)
        const Vector dx = x.col(i) - f.col(i);
        const Vector innov = obs.y - h * x.col(i);
        final_lw[i] = std::log(previous.weights[i]) - 0.5 * q.mahalanobis(dx) - 0.5 * obs.r.mahalanobis(innov) +
                      0.5 * gm + 0.5 * nxd * std::log(al);
    });
    Vector w = uniform_weights(n);
    diag.record_weights(w);
    if (report) {
        report->c_target = target;
        report->deficit = deficit;
        report->gamma = gam;
        report->alpha = alpha;
        report->residual = resid;
        report->final_log_weights = final_lw;
    }
    return Ensemble(std::move(x), w);
}

}  // namespace pfda
