#include "pfda/models.hpp"

#include <cmath>
#include <numbers>

namespace pfda {

TransitionModel::TransitionModel(GaussianCov q, int steps_per_cycle)
    : q_(std::move(q)), steps_(steps_per_cycle) {
    if (steps_ < 1) throw Error(ErrorCode::ConfigInvalid, "steps_per_cycle must be >= 1");
}

LinearGaussianModel::LinearGaussianModel(Matrix m, GaussianCov q, int steps_per_cycle)
    : TransitionModel(std::move(q), steps_per_cycle), m_(std::move(m)) {
    if (m_.rows() != m_.cols() || m_.rows() != dim())
        throw Error(ErrorCode::DimensionMismatch, "M must be square and match Q");
    Eigen::EigenSolver<Matrix> es(m_, false);
    radius_ = es.eigenvalues().cwiseAbs().maxCoeff();
}

Lorenz63Model::Lorenz63Model(double dt, GaussianCov q, int steps_per_cycle, double sigma,
                             double rho, double beta)
    : TransitionModel(std::move(q), steps_per_cycle), dt_(dt), sigma_(sigma), rho_(rho), beta_(beta) {
    if (!(dt_ > 0.0)) throw Error(ErrorCode::ConfigInvalid, "dt must be positive");
    if (dim() != 3) throw Error(ErrorCode::DimensionMismatch, "Lorenz63 has three variables");
}

Vector Lorenz63Model::tendency(const Vector& x) const {
    Vector d(3);
    d[0] = sigma_ * (x[1] - x[0]);
    d[1] = x[0] * (rho_ - x[2]) - x[1];
    d[2] = x[0] * x[1] - beta_ * x[2];
    return d;
}

namespace {

template <class F>
Vector rk4(const F& f, const Vector& x, double dt) {
    Vector k1 = f(x);
    Vector k2 = f(x + 0.5 * dt * k1);
    Vector k3 = f(x + 0.5 * dt * k2);
    Vector k4 = f(x + dt * k3);
    return x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
}

}  // namespace

Vector Lorenz63Model::step(const Vector& x) const {
    return rk4([this](const Vector& v) { return tendency(v); }, x, dt_);
}

Lorenz96Model::Lorenz96Model(Index nx, double forcing, double dt, GaussianCov q, int steps_per_cycle)
    : TransitionModel(std::move(q), steps_per_cycle), forcing_(forcing), dt_(dt) {
    if (!(dt_ > 0.0)) throw Error(ErrorCode::ConfigInvalid, "dt must be positive");
    if (nx < 4 || dim() != nx) throw Error(ErrorCode::DimensionMismatch, "Lorenz96 needs nx >= 4 matching Q");
}

Vector Lorenz96Model::tendency(const Vector& x) const {
    const Index n = x.size();
    Vector d(n);
    for (Index i = 0; i < n; ++i) {
        const double xp1 = x[(i + 1) % n];
        const double xm1 = x[(i + n - 1) % n];
        const double xm2 = x[(i + n - 2) % n];
        d[i] = (xp1 - xm2) * xm1 - x[i] + forcing_;
    }
    return d;
}

Vector Lorenz96Model::step(const Vector& x) const {
    return rk4([this](const Vector& v) { return tendency(v); }, x, dt_);
}

SpatialChainModel::SpatialChainModel(Index sites, double spatial, double temporal, double noise_sd)
    : TransitionModel(GaussianCov(joint_cov(sites, spatial, noise_sd)), 1),
      a_(spatial), b_(temporal), s_(noise_sd), m_(joint_map(sites, spatial, temporal)) {}

Matrix SpatialChainModel::joint_map(Index sites, double a, double b) {
    Matrix l = Matrix::Identity(sites, sites);
    for (Index i = 1; i < sites; ++i) l(i, i - 1) = -a;
    Matrix inv = l.triangularView<Eigen::Lower>().solve(Matrix::Identity(sites, sites));
    return b * inv;
}

Matrix SpatialChainModel::joint_cov(Index sites, double a, double s) {
    if (sites < 1) throw Error(ErrorCode::ConfigInvalid, "chain needs at least one site");
    Matrix l = Matrix::Identity(sites, sites);
    for (Index i = 1; i < sites; ++i) l(i, i - 1) = -a;
    Matrix inv = l.triangularView<Eigen::Lower>().solve(Matrix::Identity(sites, sites));
    Matrix q = s * s * inv * inv.transpose();
    return 0.5 * (q + q.transpose());
}

double SpatialChainModel::conditional_mean(Index l, double left, double previous) const {
    return (l > 0 ? a_ * left : 0.0) + b_ * previous;
}

// ---------------------------------------------------------------------------

Vector propagate(const TransitionModel& model, const Vector& x, RngStream* rng) {
    if (!x.allFinite()) throw Error(ErrorCode::NonFiniteState, "non-finite state before propagation");
    Vector out = model.step(x);
    if (rng != nullptr && !model.noise().is_zero()) out += model.noise().sample(*rng);
    if (!out.allFinite()) throw Error(ErrorCode::NonFiniteState, "model produced a non-finite state");
    return out;
}

Vector forecast_cycle(const TransitionModel& model, const Vector& x, const RngFactory& rng,
                      std::uint64_t particle, bool noise, int steps) {
    const int n = steps < 0 ? model.steps_per_cycle() : steps;
    Vector out = x;
    for (int m = 0; m < n; ++m) {
        if (noise) {
            RngStream s = rng.stream(particle, Purpose::ModelNoise, static_cast<std::uint32_t>(m));
            out = propagate(model, out, &s);
        } else {
            out = propagate(model, out, nullptr);
        }
    }
    return out;
}

Matrix forecast_ensemble(const TransitionModel& model, const Matrix& members,
                         const StepContext& ctx, bool noise, int steps) {
    Matrix out(members.rows(), members.cols());
    parallel_for(members.cols(), ctx.threads, [&](Index i) {
        out.col(i) = forecast_cycle(model, members.col(i), ctx.rng, static_cast<std::uint64_t>(i), noise, steps);
    });
    return out;
}

// ---------------------------------------------------------------------------

namespace {

void check_indices(Index nx, const std::vector<Index>& idx) {
    for (Index i : idx)
        if (i < 0 || i >= nx) throw Error(ErrorCode::DimensionMismatch, "observation index out of range");
}

Matrix selection_matrix(Index nx, const std::vector<Index>& idx) {
    Matrix h = Matrix::Zero(static_cast<Index>(idx.size()), nx);
    for (std::size_t k = 0; k < idx.size(); ++k) h(static_cast<Index>(k), idx[k]) = 1.0;
    return h;
}

}  // namespace

std::shared_ptr<const ObsOperator> ObsOperator::selection(Index nx, std::vector<Index> indices) {
    check_indices(nx, indices);
    auto op = std::shared_ptr<ObsOperator>(new ObsOperator());
    op->kind_ = Kind::Selection;
    op->nx_ = nx;
    op->ny_ = static_cast<Index>(indices.size());
    op->h_ = selection_matrix(nx, indices);
    op->indices_ = std::move(indices);
    return op;
}

std::shared_ptr<const ObsOperator> ObsOperator::dense(Matrix h) {
    auto op = std::shared_ptr<ObsOperator>(new ObsOperator());
    op->kind_ = Kind::Dense;
    op->nx_ = h.cols();
    op->ny_ = h.rows();
    op->h_ = std::move(h);
    return op;
}

std::shared_ptr<const ObsOperator> ObsOperator::square(Index nx, std::vector<Index> indices) {
    check_indices(nx, indices);
    auto op = std::shared_ptr<ObsOperator>(new ObsOperator());
    op->kind_ = Kind::Square;
    op->nx_ = nx;
    op->ny_ = static_cast<Index>(indices.size());
    op->indices_ = std::move(indices);
    return op;
}

std::shared_ptr<const ObsOperator> ObsOperator::absolute(Index nx, std::vector<Index> indices) {
    auto op = std::const_pointer_cast<ObsOperator>(square(nx, std::move(indices)));
    op->kind_ = Kind::Abs;
    return op;
}

std::shared_ptr<const ObsOperator> ObsOperator::custom(Index nx, Index ny, Map map, Tangent tangent) {
    auto op = std::shared_ptr<ObsOperator>(new ObsOperator());
    op->kind_ = Kind::Custom;
    op->nx_ = nx;
    op->ny_ = ny;
    op->map_ = std::move(map);
    op->tangent_ = std::move(tangent);
    return op;
}

Vector ObsOperator::apply(const Vector& x) const {
    if (x.size() != nx_) throw Error(ErrorCode::DimensionMismatch, "observation operator input size");
    Vector out(ny_);
    switch (kind_) {
        case Kind::Selection:
            for (Index k = 0; k < ny_; ++k) out[k] = x[indices_[static_cast<std::size_t>(k)]];
            break;
        case Kind::Dense: out = h_ * x; break;
        case Kind::Square:
            for (Index k = 0; k < ny_; ++k) {
                const double v = x[indices_[static_cast<std::size_t>(k)]];
                out[k] = v * v;
            }
            break;
        case Kind::Abs:
            for (Index k = 0; k < ny_; ++k) out[k] = std::abs(x[indices_[static_cast<std::size_t>(k)]]);
            break;
        case Kind::Custom:
            out = map_(x);
            if (out.size() != ny_) throw Error(ErrorCode::DimensionMismatch, "custom operator output size");
            break;
    }
    return out;
}

Matrix ObsOperator::apply_columns(const Matrix& x) const {
    if (kind_ == Kind::Dense) return h_ * x;
    Matrix out(ny_, x.cols());
    for (Index i = 0; i < x.cols(); ++i) out.col(i) = apply(x.col(i));
    return out;
}

const Matrix& ObsOperator::matrix() const {
    if (!is_linear()) throw Error(ErrorCode::DimensionMismatch, "nonlinear observation operator has no matrix");
    return h_;
}

Matrix ObsOperator::jacobian(const Vector& x) const {
    switch (kind_) {
        case Kind::Selection:
        case Kind::Dense: return h_;
        case Kind::Square:
        case Kind::Abs: {
            Matrix j = Matrix::Zero(ny_, nx_);
            for (Index k = 0; k < ny_; ++k) {
                const Index i = indices_[static_cast<std::size_t>(k)];
                j(k, i) = kind_ == Kind::Square ? 2.0 * x[i] : (x[i] > 0.0 ? 1.0 : (x[i] < 0.0 ? -1.0 : 0.0));
            }
            return j;
        }
        case Kind::Custom: {
            if (tangent_) return tangent_(x);
            Matrix j(ny_, nx_);
            for (Index i = 0; i < nx_; ++i) {
                const double h = 1e-6 * std::max(1.0, std::abs(x[i]));
                Vector xp = x, xm = x;
                xp[i] += h;
                xm[i] -= h;
                j.col(i) = (map_(xp) - map_(xm)) / (2.0 * h);
            }
            return j;
        }
    }
    return h_;
}

ObservationBundle::ObservationBundle(Vector y_, GaussianCov r_, std::shared_ptr<const ObsOperator> op_,
                                     std::vector<Index> locations_)
    : y(std::move(y_)), r(std::move(r_)), op(std::move(op_)), locations(std::move(locations_)) {
    if (!op) throw Error(ErrorCode::DimensionMismatch, "observation bundle needs an operator");
    if (y.size() != op->output_dim() || r.dim() != y.size())
        throw Error(ErrorCode::DimensionMismatch, "observation vector, R and operator disagree");
    if (locations.empty() && !op->indices().empty()) locations = op->indices();
    if (!locations.empty() && static_cast<Index>(locations.size()) != y.size())
        throw Error(ErrorCode::DimensionMismatch, "one location per observation expected");
}

double ObservationBundle::log_likelihood(const Vector& x) const {
    return gaussian_log_density(y, op->apply(x), r);
}

Vector ObservationBundle::log_likelihoods(const Matrix& members) const {
    Matrix d = (-op->apply_columns(members)).colwise() + y;
    const double c = static_cast<double>(y.size()) * std::log(2.0 * std::numbers::pi) + r.log_det();
    return (-0.5 * (r.mahalanobis_columns(d).array() + c)).matrix();
}

ObservationBundle ObservationBundle::with_scaled_noise(double factor) const {
    return ObservationBundle(y, r.scaled(factor), op, locations);
}

Vector observe(const ObsOperator& op, const Vector& x, const GaussianCov& r, RngStream* rng) {
    Vector out = op.apply(x);
    if (rng != nullptr && !r.is_zero()) out += r.sample(*rng);
    return out;
}

// ---------------------------------------------------------------------------

TwinRun run_truth_and_observations(const TwinExperiment& exp) {
    if (!exp.model || !exp.op) throw Error(ErrorCode::ConfigInvalid, "twin experiment needs a model and operator");
    if (exp.cycles < 0 || exp.obs_every < 1) throw Error(ErrorCode::ConfigInvalid, "invalid cycle settings");
    TwinRun run;
    run.truth.push_back(exp.initial_truth);
    for (int c = 1; c <= exp.cycles; ++c) {
        RngFactory rf{exp.truth_seed, static_cast<std::uint64_t>(c)};
        run.truth.push_back(forecast_cycle(*exp.model, run.truth.back(), rf, 0));
        if (c % exp.obs_every == 0) {
            RngStream s(exp.obs_seed, static_cast<std::uint64_t>(c), 0, Purpose::Observation);
            run.observations.emplace_back(observe(*exp.op, run.truth.back(), exp.r, &s));
        } else {
            run.observations.emplace_back(std::nullopt);
        }
    }
    return run;
}

Ensemble initial_ensemble(const TwinExperiment& exp, Index n, std::uint64_t seed) {
    Matrix m(exp.initial_mean.size(), n);
    for (Index i = 0; i < n; ++i) {
        RngStream s(seed, 0, static_cast<std::uint64_t>(i), Purpose::Initial);
        m.col(i) = exp.initial_mean + exp.initial_cov.sample(s);
    }
    return Ensemble::uniform(std::move(m));
}

ObservationBundle bundle_for_cycle(const TwinExperiment& exp, const Vector& y) {
    return ObservationBundle(y, exp.r, exp.op, exp.obs_locations);
}

}  // namespace pfda
