#include "pfda/core.hpp"
#include "pfda/filter.hpp"

#include <algorithm>
#include <cfloat>
#include <cmath>
#include <exception>
#include <mutex>
#include <numbers>
#include <sstream>
#include <thread>

namespace pfda {

const char* error_code_name(ErrorCode code) {
    switch (code) {
        case ErrorCode::AllZeroWeights: return "AllZeroWeights";
        case ErrorCode::SingularCovariance: return "SingularCovariance";
        case ErrorCode::NonFiniteState: return "NonFiniteState";
        case ErrorCode::RootNotBracketed: return "RootNotBracketed";
        case ErrorCode::NonConvexObjective: return "NonConvexObjective";
        case ErrorCode::NegativeDiscriminant: return "NegativeDiscriminant";
        case ErrorCode::NoPositiveRoot: return "NoPositiveRoot";
        case ErrorCode::InfeasibleMarginals: return "InfeasibleMarginals";
        case ErrorCode::MaxIterations: return "MaxIterations";
        case ErrorCode::RiccatiNoConvergence: return "RiccatiNoConvergence";
        case ErrorCode::NonFiniteGradient: return "NonFiniteGradient";
        case ErrorCode::NonMonotoneCdf: return "NonMonotoneCdf";
        case ErrorCode::RankDeficientProjection: return "RankDeficientProjection";
        case ErrorCode::GridTooCoarse: return "GridTooCoarse";
        case ErrorCode::DimensionMismatch: return "DimensionMismatch";
        case ErrorCode::ConfigInvalid: return "ConfigInvalid";
        case ErrorCode::FilterAborted: return "FilterAborted";
    }
    return "Unknown";
}

Error::Error(ErrorCode code, const std::string& what)
    : std::runtime_error(std::string(error_code_name(code)) + ": " + what), code_(code) {}

// ---------------------------------------------------------------------------

namespace {

inline std::uint64_t splitmix64(std::uint64_t& s) {
    std::uint64_t z = (s += 0x9E3779B97F4A7C15ull);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

inline std::uint64_t absorb(std::uint64_t h, std::uint64_t v) {
    std::uint64_t s = h ^ (v * 0xD1B54A32D192ED03ull + 0x8CB92BA72F3D8DD7ull);
    return splitmix64(s);
}

}  // namespace

RngStream::RngStream(std::uint64_t seed, std::uint64_t cycle, std::uint64_t particle,
                     Purpose purpose, std::uint32_t stage) {
    std::uint64_t h = absorb(0x243F6A8885A308D3ull, seed);
    h = absorb(h, cycle);
    h = absorb(h, particle);
    h = absorb(h, (static_cast<std::uint64_t>(purpose) << 32) | stage);
    state_ = h;
}

RngStream::result_type RngStream::operator()() { return splitmix64(state_); }

double RngStream::uniform() { return static_cast<double>((*this)() >> 11) * 0x1.0p-53; }

double RngStream::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

double RngStream::normal() { return normal_(*this); }

Vector RngStream::normal_vector(Index n) {
    Vector z(n);
    for (Index i = 0; i < n; ++i) z[i] = normal();
    return z;
}

void parallel_for(Index n, int threads, const std::function<void(Index)>& fn) {
    if (threads <= 1 || n < 2) {
        for (Index i = 0; i < n; ++i) fn(i);
        return;
    }
    const Index workers = std::min<Index>(threads, n);
    const Index chunk = (n + workers - 1) / workers;
    std::mutex mu;
    Index failed_at = n;
    std::exception_ptr failure;
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(workers));
    for (Index t = 0; t < workers; ++t) {
        const Index lo = t * chunk;
        const Index hi = std::min(n, lo + chunk);
        pool.emplace_back([&, lo, hi] {
            for (Index i = lo; i < hi; ++i) {
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard<std::mutex> lock(mu);
                    if (i < failed_at) {
                        failed_at = i;
                        failure = std::current_exception();
                    }
                    return;
                }
            }
        });
    }
    for (auto& th : pool) th.join();
    if (failure) std::rethrow_exception(failure);
}

// ---------------------------------------------------------------------------

GaussianCov::GaussianCov(const Matrix& cov) : cov_(cov) {
    if (cov_.rows() != cov_.cols())
        throw Error(ErrorCode::DimensionMismatch, "covariance must be square");
    if (!cov_.allFinite()) throw Error(ErrorCode::SingularCovariance, "covariance has non-finite entries");
    const double scale = std::max(1.0, cov_.cwiseAbs().maxCoeff());
    if ((cov_ - cov_.transpose()).cwiseAbs().maxCoeff() > 1e-12 * scale)
        throw Error(ErrorCode::SingularCovariance, "covariance is not symmetric");
    cov_ = 0.5 * (cov_ + cov_.transpose());
    factorize();
}

GaussianCov GaussianCov::scalar(Index n, double variance) {
    return diagonal(Vector::Constant(n, variance));
}

GaussianCov GaussianCov::diagonal(const Vector& variances) {
    return GaussianCov(Matrix(variances.asDiagonal()));
}

void GaussianCov::factorize() {
    const Index n = cov_.rows();
    zero_ = n == 0 || cov_.isZero(0.0);
    Matrix off = cov_;
    off.diagonal().setZero();
    diagonal_ = off.isZero(0.0);
    if (diagonal_) {
        Vector d = cov_.diagonal();
        const double top = n > 0 ? d.maxCoeff() : 0.0;
        if (n > 0 && d.minCoeff() < -1e-10 * std::max(top, 0.0))
            throw Error(ErrorCode::SingularCovariance, "covariance has negative variances");
        d = d.cwiseMax(0.0);
        cov_.diagonal() = d;
        pd_ = n > 0 && d.minCoeff() > 0.0;
        sqrt_ = Matrix(d.cwiseSqrt().asDiagonal());
        return;
    }
    Eigen::SelfAdjointEigenSolver<Matrix> eig(cov_);
    const Vector& lam = eig.eigenvalues();
    const double top = lam.maxCoeff();
    if (lam.minCoeff() < -1e-10 * std::max(top, 0.0))
        throw Error(ErrorCode::SingularCovariance, "covariance is not positive semidefinite");
    llt_.compute(cov_);
    pd_ = llt_.info() == Eigen::Success && lam.minCoeff() > 1e-14 * top;
    if (pd_) {
        sqrt_ = llt_.matrixL();
    } else {
        sqrt_ = eig.eigenvectors() * lam.cwiseMax(0.0).cwiseSqrt().asDiagonal();
    }
}

void GaussianCov::require_pd(const char* where) const {
    if (!pd_) throw Error(ErrorCode::SingularCovariance, std::string(where) + " needs a positive definite covariance");
}

Matrix GaussianCov::symmetric_sqrt() const {
    if (diagonal_) return Matrix(cov_.diagonal().cwiseSqrt().asDiagonal());
    Eigen::SelfAdjointEigenSolver<Matrix> eig(cov_);
    return eig.eigenvectors() * eig.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal() *
           eig.eigenvectors().transpose();
}

double GaussianCov::log_det() const {
    require_pd("log_det");
    if (diagonal_) return cov_.diagonal().array().log().sum();
    return 2.0 * Matrix(llt_.matrixL()).diagonal().array().log().sum();
}

Vector GaussianCov::solve(const Vector& b) const {
    require_pd("solve");
    if (diagonal_) return b.cwiseQuotient(cov_.diagonal());
    return llt_.solve(b);
}

Matrix GaussianCov::solve(const Matrix& b) const {
    require_pd("solve");
    if (diagonal_) return cov_.diagonal().cwiseInverse().asDiagonal() * b;
    return llt_.solve(b);
}

Matrix GaussianCov::inverse() const {
    return solve(Matrix(Matrix::Identity(dim(), dim())));
}

double GaussianCov::mahalanobis(const Vector& v) const {
    require_pd("mahalanobis");
    if (diagonal_) return (v.array().square() / cov_.diagonal().array()).sum();
    return llt_.matrixL().solve(v).squaredNorm();
}

Vector GaussianCov::mahalanobis_columns(const Matrix& v) const {
    require_pd("mahalanobis");
    if (diagonal_)
        return (v.array().square().colwise() / cov_.diagonal().array()).colwise().sum().transpose();
    Matrix z = llt_.matrixL().solve(v);
    return z.colwise().squaredNorm().transpose();
}

Vector GaussianCov::sample(RngStream& rng) const {
    Vector z = rng.normal_vector(dim());
    if (zero_) return Vector::Zero(dim());
    if (diagonal_) return sqrt_.diagonal().cwiseProduct(z);
    return sqrt_ * z;
}

GaussianCov GaussianCov::scaled(double factor) const {
    if (!(factor >= 0.0) || !std::isfinite(factor))
        throw Error(ErrorCode::SingularCovariance, "covariance scale must be finite and nonnegative");
    return GaussianCov(Matrix(cov_ * factor));
}

double gaussian_log_density(const Vector& x, const Vector& mean, const GaussianCov& cov) {
    if (x.size() != mean.size() || x.size() != cov.dim())
        throw Error(ErrorCode::DimensionMismatch, "gaussian_log_density dimensions disagree");
    const double n = static_cast<double>(x.size());
    return -0.5 * (n * std::log(2.0 * std::numbers::pi) + cov.log_det() + cov.mahalanobis(x - mean));
}

// ---------------------------------------------------------------------------

Vector normalize_weights(const Vector& raw) {
    if (raw.size() == 0) throw Error(ErrorCode::AllZeroWeights, "empty weight vector");
    if (!raw.allFinite() || raw.minCoeff() < 0.0)
        throw Error(ErrorCode::NonFiniteState, "raw weights must be finite and nonnegative");
    const double total = raw.sum();
    if (!(total >= DBL_MIN))
        throw Error(ErrorCode::AllZeroWeights, "weights underflow; use the log-weight path");
    return raw / total;
}

Vector log_weights_to_weights(const Vector& logw) {
    if (logw.size() == 0) throw Error(ErrorCode::AllZeroWeights, "empty weight vector");
    double top = -std::numeric_limits<double>::infinity();
    for (Index i = 0; i < logw.size(); ++i) {
        if (std::isnan(logw[i]) || logw[i] == std::numeric_limits<double>::infinity())
            throw Error(ErrorCode::NonFiniteState, "log-weight is NaN or +inf");
        top = std::max(top, logw[i]);
    }
    if (top == -std::numeric_limits<double>::infinity())
        throw Error(ErrorCode::AllZeroWeights, "every log-weight is -inf");
    Vector w = (logw.array() - top).exp().matrix();
    return w / w.sum();
}

Vector uniform_weights(Index n) { return Vector::Constant(n, 1.0 / static_cast<double>(n)); }

Ensemble::Ensemble(Matrix m, Vector w) : members(std::move(m)), weights(std::move(w)) {
    if (members.cols() != weights.size())
        throw Error(ErrorCode::DimensionMismatch, "ensemble weights and members disagree");
}

Ensemble Ensemble::uniform(Matrix m) {
    const Index n = m.cols();
    return Ensemble(std::move(m), uniform_weights(n));
}

Vector Ensemble::mean() const { return members * weights; }

Matrix Ensemble::covariance() const {
    Matrix a = members.colwise() - mean();
    return a * weights.asDiagonal() * a.transpose();
}

void Ensemble::check_finite() const {
    if (!members.allFinite()) throw Error(ErrorCode::NonFiniteState, "ensemble has non-finite members");
}

Matrix anomalies(const Matrix& members) { return members.colwise() - members.rowwise().mean(); }

Matrix sample_covariance(const Matrix& members) {
    const Index n = members.cols();
    if (n < 2) return Matrix::Zero(members.rows(), members.rows());
    Matrix a = anomalies(members);
    return a * a.transpose() / static_cast<double>(n - 1);
}

void StepDiagnostics::record_weights(const Vector& w, double degeneracy_threshold) {
    ess = 1.0 / w.squaredNorm();
    max_weight = w.maxCoeff();
    analysis_weights = w;
    if (w.size() > 1 && max_weight >= degeneracy_threshold) degenerate = true;
}

void StepDiagnostics::warn(std::string message) {
    if (std::find(warnings.begin(), warnings.end(), message) == warnings.end())
        warnings.push_back(std::move(message));
}

// ---------------------------------------------------------------------------

Ensemble Filter::forecast_only(const Ensemble& previous, const TransitionModel& model,
                               const StepContext& ctx, StepDiagnostics& diag) const {
    Ensemble out(forecast_ensemble(model, previous.members, ctx), previous.weights);
    diag.forecast_mean = out.mean();
    diag.record_weights(out.weights);
    return out;
}

Ensemble AnalysisFilter::cycle(const Ensemble& previous, const TransitionModel& model,
                               const ObservationBundle& obs, const StepContext& ctx,
                               StepDiagnostics& diag) const {
    Ensemble forecast(forecast_ensemble(model, previous.members, ctx), previous.weights);
    diag.forecast_mean = forecast.mean();
    return analyse(forecast, obs, ctx, diag);
}

}  // namespace pfda
