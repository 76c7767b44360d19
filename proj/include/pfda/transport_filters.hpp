#pragma once

#include "pfda/core.hpp"
#include "pfda/filter.hpp"
#include "pfda/models.hpp"
#include "pfda/resampling.hpp"

#include <optional>
#include <vector>

namespace pfda {

// ---------------------------------------------------------------------------
// Transport plans. D is N×N with column sums 1 and row sums N·w_i, so the
// analysis ensemble is X D.

struct TransportPlan {
    Matrix d;
    double cost = 0.0;      // Σ t_ij c_ij with t = D/N
    int iterations = 0;
    bool exact = true;

    /// Largest violation of the two marginal constraints.
    double marginal_error(const Vector& w) const;
};

/// Pairwise squared Euclidean distances between member columns.
Matrix squared_distances(const Matrix& members);

/// Exact LP optimum by the transportation simplex. Ties broken by the lowest
/// row-major cell index.
TransportPlan solve_transport(const Vector& w, const Matrix& cost, int max_iterations = 1000000);
TransportPlan solve_transport(const Matrix& members, const Vector& w);
/// Exact monotone coupling for scalar states.
TransportPlan solve_transport_1d(const Vector& x, const Vector& w);

struct SinkhornConfig {
    double lambda = 0.05;  // entropic regularization, cost units
    int max_iterations = 100000;
    double tolerance = 1e-10;
};

TransportPlan sinkhorn_transport(const Vector& w, const Matrix& cost, const SinkhornConfig& cfg = {});

// ---------------------------------------------------------------------------
// Second-order correction

struct RiccatiReport {
    double residual = 0.0;  // ‖(1/N)(D̃−w1ᵀ)(D̃−w1ᵀ)ᵀ − (W − wwᵀ)‖_max
    int newton_steps = 0;
};

/// Stabilizing solution X of AᵀX + XA − XGX + Q = 0 (matrix sign function
/// followed by Newton refinement).
Matrix solve_care(const Matrix& a, const Matrix& g, const Matrix& q, int max_iterations = 200, double tol = 1e-13);

/// D̃ = D̂ + Δ with Δ symmetric and Δ1 = 0, matching the weighted covariance.
Matrix etpf_second_order_correction(const Matrix& d, const Vector& w, RiccatiReport* report = nullptr);

// ---------------------------------------------------------------------------
// Filters

enum class TransportSolver { Exact, Sinkhorn };

struct EtpfConfig {
    TransportSolver solver = TransportSolver::Exact;
    int exact_limit = 512;   // larger ensembles fall back to Sinkhorn
    SinkhornConfig sinkhorn;
    bool second_order = false;
};

/// Transform of the forecast by the plan built from weights w.
TransportPlan etpf_plan(const Matrix& members, const Vector& w, const EtpfConfig& cfg, StepDiagnostics& diag);
Ensemble etpf_transform(const Matrix& members, const Vector& w, const EtpfConfig& cfg, StepDiagnostics& diag);
Ensemble etpf_step(const Ensemble& forecast, const ObservationBundle& obs, const EtpfConfig& cfg,
                   StepDiagnostics& diag);

struct TemperSchedule {
    std::vector<double> gammas{1.0};

    static TemperSchedule uniform(int stages);
    void validate() const;
};

struct TemperConfig {
    TemperSchedule schedule;
    double jitter = 0.0;  // τ; jitter covariance τ²·sample covariance
    ResampleMethod method = ResampleMethod::Systematic;
};

Ensemble tempered_pf_step(const Ensemble& forecast, const ObservationBundle& obs, const TemperConfig& cfg,
                          const StepContext& ctx, StepDiagnostics& diag);

/// γ_m for model step m of M: m/M by default.
struct GuidedConfig {
    std::vector<double> gammas;  // empty: m/M
    ResamplePolicy policy;
};

Ensemble guided_pf_cycle(const Ensemble& previous, const TransitionModel& model, const ObservationBundle& obs,
                         const GuidedConfig& cfg, const StepContext& ctx, StepDiagnostics& diag);

struct SteinConfig {
    double bandwidth = -1.0;  // ≤ 0: median heuristic
    double step = 0.05;
    int max_iterations = 500;
    double tolerance = 1e-6;  // on the mean update norm
    std::optional<Matrix> prior_cov;  // replaces the ensemble covariance
};

struct SteinReport {
    int iterations = 0;
    bool converged = false;
    int halvings = 0;
    std::vector<double> surrogate;  // Σ_j log p(x_j | y) after each accepted iterate
    double bandwidth = 0.0;
};

Ensemble mapping_pf_step(const Ensemble& forecast, const ObservationBundle& obs, const SteinConfig& cfg,
                         const StepContext& ctx, StepDiagnostics& diag, SteinReport* report = nullptr);

}  // namespace pfda
