#include "pfda/oracles_metrics.hpp"

#include <cmath>
#include <numbers>

namespace pfda {

KalmanState kalman_predict(const KalmanState& s, const Matrix& m, const Matrix& q) {
    KalmanState out;
    out.mean = m * s.mean;
    out.cov = m * s.cov * m.transpose() + q;
    out.cov = 0.5 * (out.cov + out.cov.transpose());
    return out;
}

KalmanState kalman_update(const KalmanState& s, const Matrix& h, const Matrix& r, const Vector& y) {
    Matrix ph = s.cov * h.transpose();
    GaussianCov innov(Matrix(h * ph + r));
    Matrix k = innov.solve(Matrix(ph.transpose())).transpose();
    KalmanState out;
    out.mean = s.mean + k * (y - h * s.mean);
    Matrix ikh = Matrix::Identity(s.cov.rows(), s.cov.rows()) - k * h;
    // Joseph form keeps the covariance symmetric PSD
    out.cov = ikh * s.cov * ikh.transpose() + k * r * k.transpose();
    out.cov = 0.5 * (out.cov + out.cov.transpose());
    return out;
}

KalmanState kalman_step(const KalmanState& s, const TransitionModel& model, const ObservationBundle& obs) {
    auto m = model.linear_map();
    if (!m) throw Error(ErrorCode::DimensionMismatch, "kalman_step needs a linear model");
    KalmanState out = s;
    for (int k = 0; k < model.steps_per_cycle(); ++k) out = kalman_predict(out, *m, model.noise().matrix());
    return kalman_update(out, obs.h(), obs.r.matrix(), obs.y);
}

// ---------------------------------------------------------------------------

double trapezoid(const Vector& x, const Vector& f) {
    double acc = 0.0;
    for (Index i = 1; i < x.size(); ++i) acc += 0.5 * (x[i] - x[i - 1]) * (f[i] + f[i - 1]);
    return acc;
}

double GridPosterior1D::integral() const { return trapezoid(grid, density); }

double GridPosterior1D::mean() const {
    return trapezoid(grid, grid.cwiseProduct(density)) / integral();
}

double GridPosterior1D::variance() const {
    const double m = mean();
    Vector d = (grid.array() - m).square().matrix().cwiseProduct(density);
    return trapezoid(grid, d) / integral();
}

Vector GridPosterior1D::cdf() const {
    Vector c(grid.size());
    c[0] = 0.0;
    for (Index i = 1; i < grid.size(); ++i)
        c[i] = c[i - 1] + 0.5 * (grid[i] - grid[i - 1]) * (density[i] + density[i - 1]);
    return c / c[c.size() - 1];
}

namespace {

struct Unnormalized {
    Vector grid;
    Vector values;
    double log_shift = 0.0;
};

Unnormalized evaluate(const std::function<double(double)>& prior, const std::function<double(double)>& ll,
                      double lo, double hi, Index n, double shift) {
    Unnormalized u;
    u.grid = Vector::LinSpaced(n, lo, hi);
    u.values.resize(n);
    Vector l(n);
    for (Index i = 0; i < n; ++i) l[i] = ll(u.grid[i]);
    u.log_shift = std::isnan(shift) ? l.maxCoeff() : shift;
    for (Index i = 0; i < n; ++i) u.values[i] = prior(u.grid[i]) * std::exp(l[i] - u.log_shift);
    return u;
}

}  // namespace

GridPosterior1D grid_bayes_1d(const std::function<double(double)>& prior_density,
                              const std::function<double(double)>& log_likelihood, const GridSpec& spec) {
    if (spec.points < 3 || !(spec.hi > spec.lo)) throw Error(ErrorCode::GridTooCoarse, "invalid grid spec");
    Unnormalized coarse = evaluate(prior_density, log_likelihood, spec.lo, spec.hi, spec.points,
                                   std::numeric_limits<double>::quiet_NaN());
    Unnormalized fine = evaluate(prior_density, log_likelihood, spec.lo, spec.hi, 2 * spec.points - 1,
                                 coarse.log_shift);
    const double z = trapezoid(coarse.grid, coarse.values);
    const double zf = trapezoid(fine.grid, fine.values);
    if (!(z > 0.0)) throw Error(ErrorCode::GridTooCoarse, "posterior has no mass on the grid");
    if (std::abs(z - zf) > 1e-6 * std::abs(zf))
        throw Error(ErrorCode::GridTooCoarse, "normalization changes under grid doubling");
    GridPosterior1D out;
    out.grid = coarse.grid;
    out.density = coarse.values / z;
    return out;
}

GridPosterior1D grid_bayes_1d(const Vector& samples, const std::function<double(double)>& log_likelihood,
                              const GridSpec& spec) {
    const double n = static_cast<double>(samples.size());
    const double mu = samples.mean();
    const double sd = std::sqrt((samples.array() - mu).square().sum() / std::max(1.0, n - 1.0));
    const double h = 1.06 * sd * std::pow(n, -0.2);
    auto prior = [&](double x) {
        const double c = 1.0 / (n * h * std::sqrt(2.0 * std::numbers::pi));
        return c * (-0.5 * ((samples.array() - x) / h).square()).exp().sum();
    };
    return grid_bayes_1d(prior, log_likelihood, spec);
}

// ---------------------------------------------------------------------------

TotalVarianceReport total_variance_analytic(const Vector& probs, const Vector& cond_means,
                                            const Vector& cond_vars) {
    TotalVarianceReport r;
    const double m = probs.dot(cond_means);
    r.between = probs.dot((cond_means.array() - m).square().matrix());
    r.within = probs.dot(cond_vars);
    // Total from the raw second moment, independent of the split
    r.total = probs.dot((cond_vars.array() + cond_means.array().square()).matrix()) - m * m;
    r.residual = r.total - r.between - r.within;
    r.holds = std::abs(r.residual) <= 1e-12 * std::max(1.0, std::abs(r.total));
    return r;
}

TotalVarianceReport total_variance_check(const std::function<std::pair<Index, double>(RngStream&)>& sampler,
                                         Index groups, Index n_samples, std::uint64_t seed, double tolerance) {
    RngStream rng(seed, 0, kEnsembleStream, Purpose::Initial);
    std::vector<double> sum(static_cast<std::size_t>(groups), 0.0);
    std::vector<double> sumsq(static_cast<std::size_t>(groups), 0.0);
    std::vector<double> count(static_cast<std::size_t>(groups), 0.0);
    Vector xs(n_samples);
    for (Index k = 0; k < n_samples; ++k) {
        auto [g, x] = sampler(rng);
        if (g < 0 || g >= groups) throw Error(ErrorCode::DimensionMismatch, "group label out of range");
        xs[k] = x;
        sum[static_cast<std::size_t>(g)] += x;
        count[static_cast<std::size_t>(g)] += 1.0;
    }
    // Second pass over group means for a stable within-group sum of squares
    const double n = static_cast<double>(n_samples);
    const double mean = xs.mean();
    RngStream replay(seed, 0, kEnsembleStream, Purpose::Initial);
    std::vector<double> gmean(sum.size());
    for (std::size_t g = 0; g < sum.size(); ++g) gmean[g] = count[g] > 0 ? sum[g] / count[g] : 0.0;
    for (Index k = 0; k < n_samples; ++k) {
        auto [g, x] = sampler(replay);
        const double d = x - gmean[static_cast<std::size_t>(g)];
        sumsq[static_cast<std::size_t>(g)] += d * d;
    }
    TotalVarianceReport r;
    r.total = (xs.array() - mean).square().sum() / n;
    for (std::size_t g = 0; g < sum.size(); ++g) {
        if (count[g] == 0) continue;
        r.between += count[g] / n * (gmean[g] - mean) * (gmean[g] - mean);
        r.within += sumsq[g] / n;
    }
    r.residual = r.total - r.between - r.within;
    r.holds = std::abs(r.residual) <= tolerance * std::max(1.0, std::abs(r.total));
    return r;
}

}  // namespace pfda
