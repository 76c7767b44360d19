#pragma once

#include "pfda/core.hpp"
#include "pfda/models.hpp"

#include <functional>
#include <vector>

namespace pfda {

// ---------------------------------------------------------------------------
// Exact references

struct KalmanState {
    Vector mean;
    Matrix cov;
};

KalmanState kalman_predict(const KalmanState& s, const Matrix& m, const Matrix& q);
KalmanState kalman_update(const KalmanState& s, const Matrix& h, const Matrix& r, const Vector& y);
/// Predict over all steps of the cycle, then update. Linear model and H only.
KalmanState kalman_step(const KalmanState& s, const TransitionModel& model, const ObservationBundle& obs);

struct GridSpec {
    double lo = -1.0;
    double hi = 1.0;
    Index points = 2001;
};

struct GridPosterior1D {
    Vector grid;
    Vector density;

    double mean() const;
    double variance() const;
    /// Cumulative trapezoid integral at each grid node.
    Vector cdf() const;
    double integral() const;
};

double trapezoid(const Vector& x, const Vector& f);

GridPosterior1D grid_bayes_1d(const std::function<double(double)>& prior_density,
                              const std::function<double(double)>& log_likelihood, const GridSpec& grid);
/// Prior given by samples, smoothed with a Gaussian kernel (Silverman bandwidth).
GridPosterior1D grid_bayes_1d(const Vector& prior_samples,
                              const std::function<double(double)>& log_likelihood, const GridSpec& grid);

struct TotalVarianceReport {
    double total = 0.0;
    double between = 0.0;   // var_I(E[X|I])
    double within = 0.0;    // E_I(var(X|I))
    double residual = 0.0;  // total − between − within
    bool holds = false;
};

/// Analytic decomposition for discrete I with known conditional moments.
TotalVarianceReport total_variance_analytic(const Vector& probs, const Vector& cond_means,
                                            const Vector& cond_vars);
/// Monte-Carlo decomposition from n draws of (I, X). The sampler returns the
/// group label in [0, groups).
TotalVarianceReport total_variance_check(const std::function<std::pair<Index, double>(RngStream&)>& sampler,
                                         Index groups, Index n_samples, std::uint64_t seed,
                                         double tolerance = 1e-9);

// ---------------------------------------------------------------------------
// Verification statistics

double rmse(const Vector& estimate, const Vector& truth);
double ensemble_rmse(const Ensemble& ens, const Vector& truth);
/// Root of the mean (over components) weighted ensemble variance.
double spread(const Ensemble& ens);
double max_weight(const Vector& w);
/// Weighted empirical CRPS of a scalar ensemble.
double crps(const Vector& values, const Vector& weights, double truth);
/// Mean CRPS over state components.
double ensemble_crps(const Ensemble& ens, const Vector& truth);
/// Rank of truth among members in [0, N]; ties broken at random.
Index truth_rank(const Vector& values, double truth, RngStream& ties);

struct RankHistogram {
    std::vector<long> counts;

    explicit RankHistogram(Index members = 0) : counts(static_cast<std::size_t>(members + 1), 0) {}
    void add(const Ensemble& ens, const Vector& truth, RngStream& ties);
    long total() const;
};

}  // namespace pfda
