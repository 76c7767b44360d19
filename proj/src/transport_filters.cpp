#include "pfda/transport_filters.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace pfda {

TransportPlan etpf_plan(const Matrix& members, const Vector& w, const EtpfConfig& cfg, StepDiagnostics& diag) {
    const Index n = members.cols();
    TransportPlan plan;
    if (members.rows() == 1 && cfg.solver == TransportSolver::Exact) {
        plan = solve_transport_1d(members.row(0).transpose(), w);
    } else if (cfg.solver == TransportSolver::Sinkhorn || n > cfg.exact_limit) {
        if (cfg.solver == TransportSolver::Exact) diag.warn("ensemble above the exact transport limit; using Sinkhorn");
        plan = sinkhorn_transport(w, squared_distances(members), cfg.sinkhorn);
    } else {
        plan = solve_transport(w, squared_distances(members));
    }
    if (cfg.second_order) plan.d = etpf_second_order_correction(plan.d, w);
    return plan;
}

Ensemble etpf_transform(const Matrix& members, const Vector& w, const EtpfConfig& cfg, StepDiagnostics& diag) {
    TransportPlan plan = etpf_plan(members, w, cfg, diag);
    return Ensemble::uniform(members * plan.d);
}

Ensemble etpf_step(const Ensemble& forecast, const ObservationBundle& obs, const EtpfConfig& cfg,
                   StepDiagnostics& diag) {
    Vector logw = forecast.weights.array().log().matrix() + obs.log_likelihoods(forecast.members);
    Vector w = log_weights_to_weights(logw);
    diag.record_weights(w);
    diag.resampled = true;
    return etpf_transform(forecast.members, w, cfg, diag);
}

// ---------------------------------------------------------------------------

TemperSchedule TemperSchedule::uniform(int stages) {
    if (stages < 1) throw Error(ErrorCode::ConfigInvalid, "tempering needs at least one stage");
    TemperSchedule s;
    s.gammas.assign(static_cast<std::size_t>(stages), 1.0 / stages);
    return s;
}

void TemperSchedule::validate() const {
    if (gammas.empty()) throw Error(ErrorCode::ConfigInvalid, "empty tempering schedule");
    double sum = 0.0;
    for (double g : gammas) {
        if (!(g > 0.0)) throw Error(ErrorCode::ConfigInvalid, "tempering exponents must be positive");
        sum += g;
    }
    if (std::abs(sum - 1.0) > 1e-12) throw Error(ErrorCode::ConfigInvalid, "tempering exponents must sum to one");
}

Ensemble tempered_pf_step(const Ensemble& forecast, const ObservationBundle& obs, const TemperConfig& cfg,
                          const StepContext& ctx, StepDiagnostics& diag) {
    cfg.schedule.validate();
    Matrix x = forecast.members;
    const Index n = x.cols();
    for (std::size_t k = 0; k < cfg.schedule.gammas.size(); ++k) {
        const auto stage = static_cast<std::uint32_t>(k);
        Vector logw = cfg.schedule.gammas[k] * obs.log_likelihoods(x);
        if (k == 0) logw += forecast.weights.array().log().matrix();
        Vector w = log_weights_to_weights(logw);
        if (k == 0) diag.record_weights(w);
        RngStream rs = ctx.rng.ensemble_stream(Purpose::Resample, stage);
        x = apply_resample(Ensemble(x, w), resample(w, cfg.method, rs)).members;
        if (cfg.jitter > 0.0) {
            GaussianCov jit(Matrix(cfg.jitter * cfg.jitter * sample_covariance(x)));
            parallel_for(n, ctx.threads, [&](Index i) {
                RngStream s = ctx.rng.stream(static_cast<std::uint64_t>(i), Purpose::Jitter, stage);
                x.col(i) += jit.sample(s);
            });
        }
    }
    diag.resampled = true;
    return Ensemble::uniform(std::move(x));
}

// ---------------------------------------------------------------------------

Ensemble guided_pf_cycle(const Ensemble& previous, const TransitionModel& model, const ObservationBundle& obs,
                         const GuidedConfig& cfg, const StepContext& ctx, StepDiagnostics& diag) {
    const int steps = model.steps_per_cycle();
    std::vector<double> gammas = cfg.gammas;
    if (gammas.empty())
        for (int m = 1; m <= steps; ++m) gammas.push_back(static_cast<double>(m) / steps);
    if (static_cast<int>(gammas.size()) != steps)
        throw Error(ErrorCode::ConfigInvalid, "guided schedule length must equal the model steps per cycle");
    for (std::size_t m = 0; m < gammas.size(); ++m) {
        if (gammas[m] < 0.0 || gammas[m] > 1.0 || (m > 0 && gammas[m] < gammas[m - 1]))
            throw Error(ErrorCode::ConfigInvalid, "guided exponents must increase within [0, 1]");
    }
    if (gammas.back() != 1.0) throw Error(ErrorCode::ConfigInvalid, "guided exponent must reach 1 at the observation");
    if (model.noise().is_zero() && steps > 1)
        diag.warn("guided PF with zero model noise: resampled duplicates never re-diversify");

    diag.forecast_mean = forecast_ensemble(model, previous.members, ctx, false) * previous.weights;
    const Index n = previous.size();
    Matrix x = previous.members;
    Vector logw = previous.weights.array().log();
    Vector last_term = Vector::Zero(n);
    for (int m = 0; m < steps; ++m) {
        const auto stage = static_cast<std::uint32_t>(m);
        parallel_for(n, ctx.threads, [&](Index i) {
            RngStream s = ctx.rng.stream(static_cast<std::uint64_t>(i), Purpose::ModelNoise, stage);
            x.col(i) = propagate(model, x.col(i), &s);
        });
        const double g = gammas[static_cast<std::size_t>(m)];
        if (g == 0.0) continue;
        // Telescoping: p(y|x_m)^{γ_m} / p(y|x_{m−1})^{γ_{m−1}}
        Vector term = g * obs.log_likelihoods(x);
        logw += term - last_term;
        last_term = term;
        RngStream rs = ctx.rng.ensemble_stream(Purpose::Resample, stage);
        if (m == steps - 1) return finish_with_log_weights(std::move(x), logw, cfg.policy, rs, diag);
        Vector w = log_weights_to_weights(logw);
        if (!cfg.policy.should_resample(w)) continue;
        ResampleResult r = resample(w, cfg.policy.method, rs);
        Matrix xr(x.rows(), n);
        Vector tr(n);
        for (Index i = 0; i < n; ++i) {
            xr.col(i) = x.col(r.indices[static_cast<std::size_t>(i)]);
            tr[i] = last_term[r.indices[static_cast<std::size_t>(i)]];
        }
        x = std::move(xr);
        last_term = tr;
        logw.setZero();
    }
    return Ensemble(std::move(x), log_weights_to_weights(logw));  // not reached: the last exponent is 1
}

// ---------------------------------------------------------------------------

namespace {

double median_heuristic(const Matrix& x) {
    const Index n = x.cols();
    if (n < 2) return 1.0;
    std::vector<double> d;
    d.reserve(static_cast<std::size_t>(n * (n - 1) / 2));
    for (Index j = 0; j < n; ++j)
        for (Index i = j + 1; i < n; ++i) d.push_back((x.col(i) - x.col(j)).norm());
    auto mid = d.begin() + static_cast<std::ptrdiff_t>(d.size() / 2);
    std::nth_element(d.begin(), mid, d.end());
    const double med = *mid;
    if (!(med > 0.0)) return 1.0;
    return med * med / std::log(static_cast<double>(n));
}

}  // namespace

Ensemble mapping_pf_step(const Ensemble& forecast, const ObservationBundle& obs, const SteinConfig& cfg,
                         const StepContext& ctx, StepDiagnostics& diag, SteinReport* report) {
    if (!(cfg.step > 0.0)) throw Error(ErrorCode::ConfigInvalid, "Stein step size must be positive");
    const Index n = forecast.size();
    const Index nx = forecast.dim();
    const Vector mu = forecast.mean();
    Matrix b = cfg.prior_cov ? *cfg.prior_cov : sample_covariance(forecast.members);
    GaussianCov prior(b);
    if (!prior.positive_definite()) {
        const double ridge = 1e-6 * std::max(1e-12, b.trace() / static_cast<double>(nx));
        b += ridge * Matrix::Identity(nx, nx);
        prior = GaussianCov(b);
        diag.warn("singular prior covariance for the mapping PF; ridge added");
    }

    auto log_post = [&](const Vector& x) { return -0.5 * prior.mahalanobis(Vector(x - mu)) + obs.log_likelihood(x); };
    auto grad = [&](const Vector& x) -> Vector {
        const Matrix j = obs.op->jacobian(x);
        return -prior.solve(Vector(x - mu)) + j.transpose() * obs.r.solve(Vector(obs.y - obs.op->apply(x)));
    };
    auto surrogate = [&](const Matrix& x) {
        Vector v(n);
        parallel_for(n, ctx.threads, [&](Index i) { v[i] = log_post(x.col(i)); });
        return v.sum();  // fixed summation order
    };

    Matrix x = forecast.members;
    const double h = cfg.bandwidth > 0.0 ? cfg.bandwidth : median_heuristic(x);
    SteinReport rep;
    rep.bandwidth = h;
    double eps = cfg.step;
    double current = surrogate(x);
    rep.surrogate.push_back(current);
    Matrix g(nx, n), phi(nx, n);
    bool stalled = false;
    for (int it = 0; it < cfg.max_iterations; ++it) {
        parallel_for(n, ctx.threads, [&](Index l) {
            g.col(l) = grad(x.col(l));
            if (!g.col(l).allFinite()) throw Error(ErrorCode::NonFiniteGradient, "non-finite log-posterior gradient");
        });
        parallel_for(n, ctx.threads, [&](Index j) {
            Vector acc = Vector::Zero(nx);
            for (Index l = 0; l < n; ++l) {
                const Vector diff = x.col(l) - x.col(j);
                const double k = std::isinf(h) ? 1.0 : std::exp(-diff.squaredNorm() / h);
                acc += k * g.col(l);
                if (!std::isinf(h)) acc += (-2.0 / h) * k * diff;
            }
            phi.col(j) = acc / static_cast<double>(n);
        });
        Matrix trial = x + eps * phi;
        double next = surrogate(trial);
        while (next < current) {
            eps *= 0.5;
            ++rep.halvings;
            if (eps < cfg.step * 1e-12) {
                stalled = true;
                break;
            }
            trial = x + eps * phi;
            next = surrogate(trial);
        }
        if (stalled) break;
        double update = 0.0;
        for (Index j = 0; j < n; ++j) update += (eps * phi.col(j)).norm();
        update /= static_cast<double>(n);
        x = std::move(trial);
        current = next;
        rep.surrogate.push_back(current);
        rep.iterations = it + 1;
        if (update < cfg.tolerance) {
            rep.converged = true;
            break;
        }
    }
    if (stalled) rep.converged = true;  // no ascent direction left at this resolution
    if (!rep.converged) diag.warn("mapping PF stopped at the iteration cap");
    if (report) *report = rep;
    Ensemble out = Ensemble::uniform(std::move(x));
    diag.record_weights(out.weights);
    return out;
}

}  // namespace pfda
