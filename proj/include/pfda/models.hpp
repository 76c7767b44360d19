#pragma once

#include "pfda/core.hpp"

#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace pfda {

// ---------------------------------------------------------------------------
// Transition models

class TransitionModel {
public:
    virtual ~TransitionModel() = default;

    virtual std::string kind() const = 0;
    Index dim() const { return q_.dim(); }
    const GaussianCov& noise() const { return q_; }
    int steps_per_cycle() const { return steps_; }

    /// One deterministic model step f(x).
    virtual Vector step(const Vector& x) const = 0;
    /// Per-step matrix M when f(x) = Mx.
    virtual std::optional<Matrix> linear_map() const { return std::nullopt; }

protected:
    TransitionModel(GaussianCov q, int steps_per_cycle);

private:
    GaussianCov q_;
    int steps_;
};

class LinearGaussianModel : public TransitionModel {
public:
    LinearGaussianModel(Matrix m, GaussianCov q, int steps_per_cycle = 1);

    std::string kind() const override { return "linear"; }
    Vector step(const Vector& x) const override { return m_ * x; }
    std::optional<Matrix> linear_map() const override { return m_; }
    double spectral_radius() const { return radius_; }

private:
    Matrix m_;
    double radius_;
};

class Lorenz63Model : public TransitionModel {
public:
    Lorenz63Model(double dt, GaussianCov q, int steps_per_cycle = 1,
                  double sigma = 10.0, double rho = 28.0, double beta = 8.0 / 3.0);

    std::string kind() const override { return "lorenz63"; }
    Vector step(const Vector& x) const override;
    Vector tendency(const Vector& x) const;

private:
    double dt_, sigma_, rho_, beta_;
};

class Lorenz96Model : public TransitionModel {
public:
    Lorenz96Model(Index nx, double forcing, double dt, GaussianCov q, int steps_per_cycle = 1);

    std::string kind() const override { return "lorenz96"; }
    Vector step(const Vector& x) const override;
    Vector tendency(const Vector& x) const;
    double forcing() const { return forcing_; }

private:
    double forcing_, dt_;
};

/// Sites l = 0..L−1 on a line:
///   x_l^n = a·x_{l−1}^n + b·x_l^{n−1} + s·e_l,  e_l ~ N(0,1)
/// with no left neighbour for l = 0. Jointly this is a linear-Gaussian model.
class SpatialChainModel : public TransitionModel {
public:
    SpatialChainModel(Index sites, double spatial, double temporal, double noise_sd);

    std::string kind() const override { return "chain"; }
    Vector step(const Vector& x) const override { return m_ * x; }
    std::optional<Matrix> linear_map() const override { return m_; }

    double spatial() const { return a_; }
    double temporal() const { return b_; }
    double noise_sd() const { return s_; }
    /// Mean of x_l given the left neighbour at the new time and x_l at the old time.
    double conditional_mean(Index l, double left, double previous) const;

private:
    static Matrix joint_map(Index sites, double a, double b);
    static Matrix joint_cov(Index sites, double a, double s);

    double a_, b_, s_;
    Matrix m_;
};

/// One model step f(x) + β; noise suppressed when rng is null.
Vector propagate(const TransitionModel& model, const Vector& x, RngStream* rng);
/// All steps of one cycle using the particle's ModelNoise streams (stage = step).
Vector forecast_cycle(const TransitionModel& model, const Vector& x, const RngFactory& rng,
                      std::uint64_t particle, bool noise = true, int steps = -1);
Matrix forecast_ensemble(const TransitionModel& model, const Matrix& members,
                         const StepContext& ctx, bool noise = true, int steps = -1);

// ---------------------------------------------------------------------------
// Observation operators

class ObsOperator {
public:
    enum class Kind { Selection, Dense, Square, Abs, Custom };
    using Map = std::function<Vector(const Vector&)>;
    using Tangent = std::function<Matrix(const Vector&)>;

    static std::shared_ptr<const ObsOperator> selection(Index nx, std::vector<Index> indices);
    static std::shared_ptr<const ObsOperator> dense(Matrix h);
    static std::shared_ptr<const ObsOperator> square(Index nx, std::vector<Index> indices);
    static std::shared_ptr<const ObsOperator> absolute(Index nx, std::vector<Index> indices);
    static std::shared_ptr<const ObsOperator> custom(Index nx, Index ny, Map map, Tangent tangent = {});

    Kind kind() const { return kind_; }
    bool is_linear() const { return kind_ == Kind::Selection || kind_ == Kind::Dense; }
    Index input_dim() const { return nx_; }
    Index output_dim() const { return ny_; }
    const std::vector<Index>& indices() const { return indices_; }

    Vector apply(const Vector& x) const;
    Matrix apply_columns(const Matrix& x) const;
    /// Exact H for linear kinds; throws otherwise.
    const Matrix& matrix() const;
    /// Tangent linear at x (finite differences for custom maps without one).
    Matrix jacobian(const Vector& x) const;

private:
    ObsOperator() = default;

    Kind kind_ = Kind::Selection;
    Index nx_ = 0;
    Index ny_ = 0;
    std::vector<Index> indices_;
    Matrix h_;
    Map map_;
    Tangent tangent_;
};

struct ObservationBundle {
    Vector y;
    GaussianCov r;
    std::shared_ptr<const ObsOperator> op;
    std::vector<Index> locations;  // grid index per observation component

    ObservationBundle() = default;
    ObservationBundle(Vector y, GaussianCov r, std::shared_ptr<const ObsOperator> op,
                      std::vector<Index> locations = {});

    Index size() const { return y.size(); }
    const Matrix& h() const { return op->matrix(); }

    double log_likelihood(const Vector& x) const;
    /// Per-member log p(y | x_i), including normalization constants.
    Vector log_likelihoods(const Matrix& members) const;
    /// Same bundle with R multiplied by factor.
    ObservationBundle with_scaled_noise(double factor) const;
};

Vector observe(const ObsOperator& op, const Vector& x, const GaussianCov& r, RngStream* rng);

// ---------------------------------------------------------------------------
// Twin experiments

struct TwinExperiment {
    std::shared_ptr<const TransitionModel> model;
    std::shared_ptr<const ObsOperator> op;
    GaussianCov r;
    std::vector<Index> obs_locations;
    int cycles = 0;
    int obs_every = 1;  // observe every k-th cycle
    std::uint64_t truth_seed = 1;
    std::uint64_t obs_seed = 2;
    Vector initial_truth;
    Vector initial_mean;
    GaussianCov initial_cov;
};

struct TwinRun {
    std::vector<Vector> truth;                         // cycles + 1 states
    std::vector<std::optional<Vector>> observations;   // one slot per cycle
};

TwinRun run_truth_and_observations(const TwinExperiment& exp);
Ensemble initial_ensemble(const TwinExperiment& exp, Index n, std::uint64_t seed);
ObservationBundle bundle_for_cycle(const TwinExperiment& exp, const Vector& y);

}  // namespace pfda
