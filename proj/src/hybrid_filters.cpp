#include "pfda/hybrid_filters.hpp"

#include "pfda/transport_filters.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <limits>

namespace pfda {

SecondOrderReport second_order_report(const Matrix& analysis, const Matrix& forecast, const Vector& w) {
    const Vector target_mean = forecast * w;
    const Matrix fa = forecast.colwise() - target_mean;
    const Matrix target_cov = fa * w.asDiagonal() * fa.transpose();
    const Vector mean = analysis.rowwise().mean();
    const Matrix aa = analysis.colwise() - mean;
    const Matrix cov = aa * aa.transpose() / static_cast<double>(analysis.cols());
    SecondOrderReport r;
    r.mean_error = (mean - target_mean).cwiseAbs().maxCoeff();
    r.covariance_error = (cov - target_cov).cwiseAbs().maxCoeff();
    return r;
}

namespace {

const Matrix& require_linear(const ObservationBundle& obs, const char* who) {
    if (!obs.op->is_linear()) throw Error(ErrorCode::DimensionMismatch, std::string(who) + " needs a linear observation operator");
    return obs.h();
}

Vector normalized_from_log(const Vector& logw) { return log_weights_to_weights(logw); }

/// Ensemble-space square-root update of one block of rows. With
/// Lᵀ Yb/√(N−1) = UΣVᵀ (rinv = LLᵀ) the ensemble-space matrix is
/// (N−1)(I + VΣ²Vᵀ), so only the thin factor is needed.
void etkf_rows(const Matrix& xp_rows, const Vector& xbar_rows, const Matrix& yb, const Matrix& rinv, const Vector& d,
               double nm1, Matrix& out_rows) {
    Eigen::LLT<Matrix> llt(rinv);
    const Matrix g = Matrix(llt.matrixL()).transpose() * yb / std::sqrt(nm1);
    Eigen::JacobiSVD<Matrix> svd(g, Eigen::ComputeThinV);
    const Vector s2 = svd.singularValues().array().square();
    const Matrix& v = svd.matrixV();
    const Vector b = yb.transpose() * (rinv * d);
    const Vector inv = (1.0 + s2.array()).inverse() - 1.0;
    const Vector wbar = (b + v * inv.asDiagonal() * (v.transpose() * b)) / nm1;
    const Vector isq = (1.0 + s2.array()).rsqrt() - 1.0;
    out_rows = xp_rows + (xp_rows * v) * isq.asDiagonal() * v.transpose();
    out_rows.colwise() += xbar_rows + xp_rows * wbar;
}

}  // namespace

Ensemble etkf_step(const Ensemble& forecast, const ObservationBundle& obs, const EtkfConfig& cfg,
                   const StepContext& ctx, StepDiagnostics& diag) {
    const Index nx = forecast.dim();
    const Index n = forecast.size();
    const double nm1 = static_cast<double>(n - 1);
    if (n < 2) throw Error(ErrorCode::SingularCovariance, "ETKF needs at least two members");
    const Matrix& x = forecast.members;
    const Vector xbar = x.rowwise().mean();
    const double infl = std::sqrt(cfg.inflation);
    const Matrix xp = infl * (x.colwise() - xbar);
    const Matrix y = obs.op->apply_columns(x);
    const Vector ybar = y.rowwise().mean();
    const Matrix yb = infl * (y.colwise() - ybar);
    const Vector d = obs.y - ybar;
    Matrix out(nx, n);
    if (!cfg.loc) {
        const Matrix rinv = obs.r.inverse();
        Matrix rows;
        etkf_rows(xp, xbar, yb, rinv, d, nm1, rows);
        out = rows;
    } else {
        cfg.loc->validate();
        if (static_cast<Index>(obs.locations.size()) != obs.size())
            throw Error(ErrorCode::DimensionMismatch, "LETKF needs a grid location for every observation");
        const Vector r = obs.r.diagonal_values();
        parallel_for(nx, ctx.threads, [&](Index j) {
            std::vector<Index> used;
            std::vector<double> rho;
            for (Index l = 0; l < obs.size(); ++l) {
                const double t = cfg.loc->taper_value(cyclic_distance(static_cast<double>(j),
                                                                      static_cast<double>(obs.locations[static_cast<std::size_t>(l)]), nx));
                if (t <= 0.0) continue;
                used.push_back(l);
                rho.push_back(t);
            }
            if (used.empty()) {
                out.row(j) = xp.row(j) / infl + Matrix::Constant(1, n, xbar[j]);
                return;
            }
            const Index m = static_cast<Index>(used.size());
            Matrix ybl(m, n);
            Vector dl(m);
            Matrix rinv = Matrix::Zero(m, m);
            for (Index k = 0; k < m; ++k) {
                const Index l = used[static_cast<std::size_t>(k)];
                ybl.row(k) = yb.row(l);
                dl[k] = d[l];
                rinv(k, k) = rho[static_cast<std::size_t>(k)] / r[l];
            }
            Matrix rows;
            etkf_rows(xp.row(j), xbar.segment(j, 1), ybl, rinv, dl, nm1, rows);
            out.row(j) = rows;
        });
    }
    diag.record_weights(uniform_weights(n));
    return Ensemble::uniform(std::move(out));
}

// ---------------------------------------------------------------------------

Ensemble agm_step(const Ensemble& forecast, const ObservationBundle& obs, const AgmConfig& cfg,
                  const StepContext& ctx, StepDiagnostics& diag, AgmReport* report) {
    if (!(cfg.h > 0.0 && cfg.h <= 1.0)) throw Error(ErrorCode::ConfigInvalid, "AGM bandwidth must lie in (0, 1]");
    const Matrix& h = require_linear(obs, "AGM");
    const Index n = forecast.size();
    const Index nx = forecast.dim();
    const Matrix p = sample_covariance(forecast.members);
    const Matrix phat = cfg.h * cfg.h * p;
    const Matrix ph = phat * h.transpose();
    GaussianCov s(Matrix(h * ph + obs.r.matrix()));
    const Matrix k = s.solve(Matrix(ph.transpose())).transpose();
    Matrix centers = forecast.members + k * ((-h * forecast.members).colwise() + obs.y);
    Vector logw = forecast.weights.array().log();
    for (Index i = 0; i < n; ++i) logw[i] += gaussian_log_density(obs.y, h * forecast.members.col(i), s);
    const Vector w = normalized_from_log(logw);
    const double alpha = cfg.adaptive ? ess(w) / static_cast<double>(n) : cfg.alpha;
    const Vector bridged = (alpha * w.array() + (1.0 - alpha) / static_cast<double>(n)).matrix();
    diag.record_weights(bridged);
    if (report) {
        report->alpha = alpha;
        report->weights = w;
        report->bridged = bridged;
        report->centers = centers;
    }
    if (!cfg.policy.should_resample(bridged)) return Ensemble(std::move(centers), bridged);
    // Resampling draws from the mixture Σ w_i N(μ_i, (I − K̂H)P̂)
    Matrix pa = (Matrix::Identity(nx, nx) - k * h) * phat;
    GaussianCov kernel(Matrix(0.5 * (pa + pa.transpose())));
    RngStream rs = ctx.rng.ensemble_stream(Purpose::Resample);
    const ResampleResult r = resample(bridged, cfg.policy.method, rs);
    Matrix out(nx, n);
    parallel_for(n, ctx.threads, [&](Index i) {
        RngStream ks = ctx.rng.stream(static_cast<std::uint64_t>(i), Purpose::Mixture);
        out.col(i) = centers.col(r.indices[static_cast<std::size_t>(i)]) + kernel.sample(ks);
    });
    diag.resampled = true;
    return Ensemble::uniform(std::move(out));
}

// ---------------------------------------------------------------------------

namespace {

struct EnkpfParts {
    double alpha = 0.5;
    Matrix k_alpha;   // gain with R/α
    Matrix k_hat;     // gain with R/(1−α)
    Matrix nu;
    Vector gamma;
};

constexpr double kEdge = 1e-12;

EnkpfParts enkpf_parts(const Ensemble& forecast, const ObservationBundle& obs, double alpha) {
    const Matrix& h = require_linear(obs, "EnKPF");
    const Index nx = forecast.dim();
    const Index n = forecast.size();
    const Index ny = obs.size();
    EnkpfParts e;
    e.alpha = alpha;
    const Matrix p = sample_covariance(forecast.members);
    const Matrix rm = obs.r.matrix();
    if (alpha <= kEdge) {
        e.k_alpha = Matrix::Zero(nx, ny);
        e.nu = forecast.members;
    } else {
        const Matrix ph = p * h.transpose();
        GaussianCov s1(Matrix(h * ph + rm / alpha));
        e.k_alpha = s1.solve(Matrix(ph.transpose())).transpose();
        e.nu = forecast.members + e.k_alpha * ((-h * forecast.members).colwise() + obs.y);
    }
    Vector logg = forecast.weights.array().log();
    if (alpha >= 1.0 - kEdge) {
        e.k_hat = Matrix::Zero(nx, ny);
    } else {
        const Matrix ps = alpha <= kEdge ? Matrix(Matrix::Zero(nx, nx)) : Matrix(e.k_alpha * rm * e.k_alpha.transpose() / alpha);
        const Matrix psh = ps * h.transpose();
        GaussianCov s2(Matrix(h * psh + rm / (1.0 - alpha)));
        e.k_hat = s2.solve(Matrix(psh.transpose())).transpose();
        for (Index i = 0; i < n; ++i) logg[i] += gaussian_log_density(obs.y, h * e.nu.col(i), s2);
    }
    e.gamma = normalized_from_log(logg);
    return e;
}

}  // namespace

Vector enkpf_weights(const Ensemble& forecast, const ObservationBundle& obs, double alpha) {
    return enkpf_parts(forecast, obs, alpha).gamma;
}

double adaptive_alpha(const std::vector<double>& grid, double fraction, const std::function<Vector(double)>& weights_at) {
    std::vector<double> sorted = grid;
    std::sort(sorted.begin(), sorted.end());
    for (double a : sorted) {
        const Vector w = weights_at(a);
        if (ess(w) >= fraction * static_cast<double>(w.size())) return a;
    }
    return 1.0;
}

double adaptive_alpha(const Ensemble& forecast, const ObservationBundle& obs, const std::vector<double>& grid,
                      double fraction) {
    return adaptive_alpha(grid, fraction, [&](double a) { return enkpf_weights(forecast, obs, a); });
}

Ensemble enkpf_step(const Ensemble& forecast, const ObservationBundle& obs, const EnkpfConfig& cfg,
                    const StepContext& ctx, StepDiagnostics& diag, EnkpfReport* report) {
    const Matrix& h = require_linear(obs, "EnKPF");
    const double alpha = cfg.adaptive ? adaptive_alpha(forecast, obs, cfg.alpha_grid, cfg.ess_fraction) : cfg.alpha;
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw Error(ErrorCode::ConfigInvalid, "EnKPF alpha must lie in [0, 1]");
    EnkpfParts e = enkpf_parts(forecast, obs, alpha);
    const Index n = forecast.size();
    const Index nx = forecast.dim();
    diag.record_weights(e.gamma);
    const Matrix mu = e.nu + e.k_hat * ((-h * e.nu).colwise() + obs.y);
    RngStream rs = ctx.rng.ensemble_stream(Purpose::Resample);
    const ResampleResult r = resample(e.gamma, cfg.method, rs);
    const Matrix ikh = Matrix::Identity(nx, nx) - e.k_hat * h;
    const bool stage1 = alpha > kEdge;
    const bool stage2 = alpha < 1.0 - kEdge;
    std::optional<GaussianCov> r1, r2;
    if (stage1) r1.emplace(obs.r.scaled(1.0 / alpha));
    if (stage2 && stage1) r2.emplace(obs.r.scaled(1.0 / (1.0 - alpha)));
    Matrix out(nx, n);
    parallel_for(n, ctx.threads, [&](Index i) {
        out.col(i) = mu.col(r.indices[static_cast<std::size_t>(i)]);
        RngStream s = ctx.rng.stream(static_cast<std::uint64_t>(i), Purpose::ObsPerturbation);
        if (r1) out.col(i) += ikh * (e.k_alpha * r1->sample(s));
        if (r2) out.col(i) += e.k_hat * r2->sample(s);
    });
    if (report) {
        report->alpha = alpha;
        report->gamma = e.gamma;
        report->nu = e.nu;
    }
    diag.resampled = true;
    return Ensemble::uniform(std::move(out));
}

// ---------------------------------------------------------------------------

std::array<double, 3> merging_coefficients() {
    const double s = std::sqrt(13.0);
    return {0.75, (s + 1.0) / 8.0, -(s - 1.0) / 8.0};
}

Matrix merging_transform(const Matrix& members, const Vector& w, const StepContext& ctx) {
    const auto a = merging_coefficients();
    Matrix out = Matrix::Zero(members.rows(), members.cols());
    for (std::uint32_t q = 0; q < 3; ++q) {
        RngStream rs = ctx.rng.ensemble_stream(Purpose::Resample, q);
        const ResampleResult r = multinomial_resample(w, rs);
        for (Index i = 0; i < members.cols(); ++i) out.col(i) += a[q] * members.col(r.indices[static_cast<std::size_t>(i)]);
    }
    return out;
}

Ensemble merging_pf_step(const Ensemble& forecast, const ObservationBundle& obs, const StepContext& ctx,
                         StepDiagnostics& diag) {
    const Vector w = normalized_from_log(forecast.weights.array().log().matrix() + obs.log_likelihoods(forecast.members));
    diag.record_weights(w);
    diag.resampled = true;
    return Ensemble::uniform(merging_transform(forecast.members, w, ctx));
}

// ---------------------------------------------------------------------------

Matrix netf_transform_matrix(const Vector& w, int* clipped) {
    const Index n = w.size();
    const Matrix a = Matrix(w.asDiagonal()) - w * w.transpose();
    Eigen::SelfAdjointEigenSolver<Matrix> es(a);
    Vector lam = es.eigenvalues();
    Matrix v = es.eigenvectors();
    // A1 = 0 exactly; rounding puts that eigenvalue at ±ε, and its square
    // root would leak into the moments
    const double floor = static_cast<double>(n) * std::numeric_limits<double>::epsilon() * std::max(1.0, lam.cwiseAbs().maxCoeff());
    int clip = 0;
    for (Index k = 0; k < n; ++k) {
        if (lam[k] < -1e-10) ++clip;
        if (lam[k] <= floor) lam[k] = 0.0;
        // Deterministic sign: first nonzero component positive
        for (Index r = 0; r < n; ++r) {
            if (std::abs(v(r, k)) > 1e-14) {
                if (v(r, k) < 0.0) v.col(k) = -v.col(k);
                break;
            }
        }
    }
    if (clipped) *clipped = clip;
    Matrix t = std::sqrt(static_cast<double>(n)) * v * lam.cwiseSqrt().asDiagonal() * v.transpose();
    t += w * Vector::Ones(n).transpose();
    return t;
}

Ensemble netf_step(const Ensemble& forecast, const ObservationBundle& obs, const NetfConfig& cfg,
                   const StepContext& ctx, StepDiagnostics& diag) {
    const Index nx = forecast.dim();
    const Index n = forecast.size();
    if (!cfg.loc) {
        const Vector w =
            normalized_from_log(forecast.weights.array().log().matrix() + obs.log_likelihoods(forecast.members));
        diag.record_weights(w);
        int clipped = 0;
        const Matrix t = netf_transform_matrix(w, &clipped);
        if (clipped > 0) diag.warn("NETF clipped negative eigenvalues below -1e-10");
        diag.resampled = true;
        return Ensemble::uniform(forecast.members * t);
    }
    LocalWeightField field = local_weights(forecast.members, obs, *cfg.loc, &forecast.weights);
    warn_crowded_boxes(field, diag);
    Matrix out(nx, n);
    std::vector<int> clipped(static_cast<std::size_t>(nx), 0);
    parallel_for(nx, ctx.threads, [&](Index j) {
        out.row(j) = forecast.members.row(j) * netf_transform_matrix(field.w.col(j), &clipped[static_cast<std::size_t>(j)]);
    });
    if (std::any_of(clipped.begin(), clipped.end(), [](int c) { return c > 0; }))
        diag.warn("NETF clipped negative eigenvalues below -1e-10");
    diag.record_weights(field.w.col(0));
    diag.resampled = true;
    return Ensemble::uniform(std::move(out));
}

// ---------------------------------------------------------------------------

namespace {

struct WeightedMoments {
    Vector mean;
    Matrix cov;
};

WeightedMoments weighted_moments(const Matrix& x, const Vector& w) {
    WeightedMoments m;
    m.mean = x * w;
    const Matrix a = x.colwise() - m.mean;
    m.cov = a * w.asDiagonal() * a.transpose();
    return m;
}

/// Symmetric power of a PSD matrix; small eigenvalues get a ridge of 1e-8·trace.
Matrix sym_power(const Matrix& c, double power) {
    Eigen::SelfAdjointEigenSolver<Matrix> es(0.5 * (c + c.transpose()));
    Vector ev = es.eigenvalues();
    const double ridge = 1e-8 * std::max(1e-300, c.trace());
    const double floor = 1e-14 * std::max(1e-300, ev.cwiseAbs().maxCoeff());
    for (Index k = 0; k < ev.size(); ++k) {
        if (ev[k] <= floor) ev[k] += ridge;
        ev[k] = std::pow(std::max(ev[k], 0.0), power);
    }
    return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace

Matrix nleaf_transform(const Matrix& members, const Vector& prior_w, const ObservationBundle& obs,
                       const Matrix& perturbed_obs) {
    const Index n = members.cols();
    const Vector logprior = prior_w.array().log();
    const Vector w = normalized_from_log(logprior + obs.log_likelihoods(members));
    const WeightedMoments post = weighted_moments(members, w);
    const Matrix pa_half = sym_power(post.cov, 0.5);
    Matrix out(members.rows(), n);
    for (Index k = 0; k < n; ++k) {
        ObservationBundle ok(perturbed_obs.col(k), obs.r, obs.op, obs.locations);
        const Vector wk = normalized_from_log(logprior + ok.log_likelihoods(members));
        const WeightedMoments mk = weighted_moments(members, wk);
        out.col(k) = post.mean + pa_half * sym_power(mk.cov, -0.5) * (members.col(k) - mk.mean);
    }
    return out;
}

Ensemble nleaf_step(const Ensemble& forecast, const ObservationBundle& obs, const StepContext& ctx,
                    StepDiagnostics& diag) {
    const Index n = forecast.size();
    const Matrix y = obs.op->apply_columns(forecast.members);
    Matrix pert(obs.size(), n);
    for (Index k = 0; k < n; ++k) {
        RngStream s = ctx.rng.stream(static_cast<std::uint64_t>(k), Purpose::ObsPerturbation);
        pert.col(k) = y.col(k) + obs.r.sample(s);
    }
    const Vector w = normalized_from_log(forecast.weights.array().log().matrix() + obs.log_likelihoods(forecast.members));
    diag.record_weights(w);
    diag.resampled = true;
    return Ensemble::uniform(nleaf_transform(forecast.members, forecast.weights, obs, pert));
}

// ---------------------------------------------------------------------------

Ensemble hybrid_letpf_letkf_step(const Ensemble& forecast, const ObservationBundle& obs, const HybridConfig& cfg,
                                 const StepContext& ctx, StepDiagnostics& diag) {
    if (!(cfg.alpha >= 0.0 && cfg.alpha <= 1.0)) throw Error(ErrorCode::ConfigInvalid, "hybrid alpha must lie in [0, 1]");
    Ensemble stage = forecast;
    if (cfg.alpha > kEdge) {
        const ObservationBundle o1 = obs.with_scaled_noise(1.0 / cfg.alpha);
        if (cfg.loc) {
            LetpfConfig lc;
            lc.loc = *cfg.loc;
            stage = letpf_step(stage, o1, lc, ctx, diag);
        } else {
            stage = etpf_step(stage, o1, EtpfConfig{}, diag);
        }
    } else {
        diag.record_weights(forecast.weights);
    }
    if (cfg.alpha < 1.0 - kEdge) {
        const ObservationBundle o2 = obs.with_scaled_noise(1.0 / (1.0 - cfg.alpha));
        StepDiagnostics inner;
        EtkfConfig ec;
        ec.loc = cfg.loc;
        stage = etkf_step(stage, o2, ec, ctx, inner);
    }
    diag.resampled = true;
    return stage;
}

}  // namespace pfda
