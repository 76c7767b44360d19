#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace pfda {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using Index = Eigen::Index;

enum class ErrorCode {
    AllZeroWeights,
    SingularCovariance,
    NonFiniteState,
    RootNotBracketed,
    NonConvexObjective,
    NegativeDiscriminant,
    NoPositiveRoot,
    InfeasibleMarginals,
    MaxIterations,
    RiccatiNoConvergence,
    NonFiniteGradient,
    NonMonotoneCdf,
    RankDeficientProjection,
    GridTooCoarse,
    DimensionMismatch,
    ConfigInvalid,
    FilterAborted,
};

const char* error_code_name(ErrorCode code);

class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& what);
    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

// ---------------------------------------------------------------------------
// Random streams

enum class Purpose : std::uint32_t {
    Initial = 1,
    Truth,
    Observation,
    ModelNoise,
    Proposal,
    Resample,
    Jitter,
    ObsPerturbation,
    Mixture,
    Local,
    RankTies,
    Spread,
};

/// Stream for ensemble-level draws (one per cycle/purpose/stage), e.g. the
/// systematic-resampling offset.
inline constexpr std::uint64_t kEnsembleStream = 0xFFFFFFFFull;

/// Counter-based generator. The whole sequence is a function of
/// (seed, cycle, particle, purpose, stage) only.
class RngStream {
public:
    using result_type = std::uint64_t;

    RngStream(std::uint64_t seed, std::uint64_t cycle, std::uint64_t particle,
              Purpose purpose, std::uint32_t stage = 0);

    static constexpr result_type min() { return 0; }
    static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }
    result_type operator()();

    double uniform();                    // [0, 1)
    double uniform(double lo, double hi);
    double normal();
    Vector normal_vector(Index n);

private:
    std::uint64_t state_;
    std::normal_distribution<double> normal_{0.0, 1.0};
};

struct RngFactory {
    std::uint64_t seed = 0;
    std::uint64_t cycle = 0;

    RngStream stream(std::uint64_t particle, Purpose purpose, std::uint32_t stage = 0) const {
        return RngStream(seed, cycle, particle, purpose, stage);
    }
    RngStream ensemble_stream(Purpose purpose, std::uint32_t stage = 0) const {
        return RngStream(seed, cycle, kEnsembleStream, purpose, stage);
    }
};

struct StepContext {
    RngFactory rng;
    int threads = 1;
};

/// Runs fn(i) for i in [0, n). Work is split in contiguous chunks; results
/// must not depend on the split. The exception of the lowest failing index is
/// rethrown.
void parallel_for(Index n, int threads, const std::function<void(Index)>& fn);

// ---------------------------------------------------------------------------
// Gaussian error specification

class GaussianCov {
public:
    GaussianCov() = default;
    explicit GaussianCov(const Matrix& cov);

    static GaussianCov scalar(Index n, double variance);
    static GaussianCov diagonal(const Vector& variances);

    Index dim() const { return cov_.rows(); }
    const Matrix& matrix() const { return cov_; }
    bool is_diagonal() const { return diagonal_; }
    bool is_zero() const { return zero_; }
    bool positive_definite() const { return pd_; }
    Vector diagonal_values() const { return cov_.diagonal(); }

    /// S with S Sᵀ = C. Lower Cholesky when positive definite.
    const Matrix& sqrt_factor() const { return sqrt_; }
    /// Symmetric square root C^{1/2}.
    Matrix symmetric_sqrt() const;

    double log_det() const;
    Vector solve(const Vector& b) const;
    Matrix solve(const Matrix& b) const;
    Matrix inverse() const;
    double mahalanobis(const Vector& v) const;
    /// Column-wise vᵀC⁻¹v.
    Vector mahalanobis_columns(const Matrix& v) const;

    Vector sample(RngStream& rng) const;
    GaussianCov scaled(double factor) const;

private:
    void factorize();
    void require_pd(const char* where) const;

    Matrix cov_;
    Matrix sqrt_;
    Eigen::LLT<Matrix> llt_;
    bool diagonal_ = false;
    bool zero_ = false;
    bool pd_ = false;
};

double gaussian_log_density(const Vector& x, const Vector& mean, const GaussianCov& cov);

// ---------------------------------------------------------------------------
// Weights and ensembles

Vector normalize_weights(const Vector& raw);
Vector log_weights_to_weights(const Vector& logw);
Vector uniform_weights(Index n);

struct Ensemble {
    Matrix members;  // N_x × N, one column per particle
    Vector weights;  // length N

    Ensemble() = default;
    Ensemble(Matrix m, Vector w);
    static Ensemble uniform(Matrix m);

    Index size() const { return members.cols(); }
    Index dim() const { return members.rows(); }

    Vector mean() const;
    /// Σ w_i (x_i − x̄)(x_i − x̄)ᵀ
    Matrix covariance() const;
    void check_finite() const;
};

/// Unweighted sample covariance with 1/(N−1) normalization (zero for N = 1).
Matrix sample_covariance(const Matrix& members);
Matrix anomalies(const Matrix& members);

// ---------------------------------------------------------------------------
// Diagnostics shared by every filter

struct StepDiagnostics {
    double ess = std::numeric_limits<double>::quiet_NaN();
    double max_weight = std::numeric_limits<double>::quiet_NaN();
    bool degenerate = false;
    bool resampled = false;
    Vector forecast_mean;      // prior-predictive mean for the cycle
    Vector analysis_weights;   // weights before the final resampling, if any
    std::vector<std::string> warnings;

    void record_weights(const Vector& w, double degeneracy_threshold = 0.99);
    void warn(std::string message);
};

}  // namespace pfda
