#pragma once

#include "pfda/core.hpp"
#include "pfda/models.hpp"
#include "pfda/resampling.hpp"

#include <vector>

namespace pfda {

// Proposal filters consume the previous analysis ensemble: when a cycle has
// several model steps, the first steps are plain noisy propagation and the
// proposal acts on the final step.

Ensemble bootstrap_analysis(const Ensemble& forecast, const ObservationBundle& obs,
                            const ResamplePolicy& policy, const StepContext& ctx, StepDiagnostics& diag);

// --- relaxation ------------------------------------------------------------

struct RelaxationConfig {
    Matrix t;           // N_x × N_y
    GaussianCov qhat;   // proposal noise
};

/// ½ξᵀQ̂⁻¹ξ − ½(s+ξ)ᵀQ⁻¹(s+ξ) for shift s = T d.
double relaxation_increment(const Vector& shift, const Vector& xi, const GaussianCov& q, const GaussianCov& qhat);

/// One model step for every member; adds the increments to logw.
Matrix relaxation_proposal_step(const Matrix& members, Vector& logw, const TransitionModel& model,
                                const ObservationBundle& obs, const RelaxationConfig& cfg,
                                const StepContext& ctx, std::uint32_t model_step);

Ensemble relaxation_cycle(const Ensemble& previous, const TransitionModel& model, const ObservationBundle& obs,
                          const RelaxationConfig& cfg, const ResamplePolicy& policy, const StepContext& ctx,
                          StepDiagnostics& diag);

// --- weighted ensemble Kalman filter ---------------------------------------

Ensemble wekf_step(const Ensemble& previous, const TransitionModel& model, const ObservationBundle& obs,
                   const ResamplePolicy& policy, const StepContext& ctx, StepDiagnostics& diag);

// --- optimal proposal --------------------------------------------------------

struct OptimalProposalGaussian {
    Matrix gain;             // T = QHᵀ(HQHᵀ+R)⁻¹
    GaussianCov proposal;    // (I − TH)Q
    GaussianCov marginal;    // HQHᵀ + R

    OptimalProposalGaussian(const GaussianCov& q, const Matrix& h, const GaussianCov& r);
    Vector mean(const Vector& f, const Vector& y, const Matrix& h) const;
};

/// log p(y | x^{n−1}) = log N(y; Hf, HQHᵀ+R) for each deterministic forecast column.
Vector optimal_proposal_log_weights(const Matrix& forecasts, const ObservationBundle& obs, const GaussianCov& q);

Ensemble optimal_proposal_step(const Ensemble& previous, const TransitionModel& model, const ObservationBundle& obs,
                               const ResamplePolicy& policy, const StepContext& ctx, StepDiagnostics& diag);

// --- implicit particle filter ----------------------------------------------

struct ImplicitConfig {
    double gradient_tol = 1e-8;
    int max_iterations = 200;
};

struct ImplicitParticle {
    Vector x;           // mapped sample
    Vector map_point;   // x^a = argmin F
    double phi = 0.0;   // min F
    double lambda = 1.0;
    double log_jacobian = 0.0;
    double residual = 0.0;  // F(x) − φ − ½ξᵀξ
    bool flagged = false;
};

/// F(x) = −log p(y|x) − log N(x; f, Q), normalization constants included.
double implicit_objective(const Vector& x, const Vector& f, const GaussianCov& q, const ObservationBundle& obs);

ImplicitParticle implicit_map(const Vector& f, const GaussianCov& q, const ObservationBundle& obs, const Vector& xi,
                              const ImplicitConfig& cfg = {});

Ensemble implicit_pf_step(const Ensemble& previous, const TransitionModel& model, const ObservationBundle& obs,
                          const ImplicitConfig& cfg, const ResamplePolicy& policy, const StepContext& ctx,
                          StepDiagnostics& diag);

// --- auxiliary particle filter ---------------------------------------------

enum class AuxiliaryMode { Probe, Optimal };

Ensemble auxiliary_pf_step(const Ensemble& previous, const TransitionModel& model, const ObservationBundle& obs,
                           AuxiliaryMode mode, const ResamplePolicy& policy, const StepContext& ctx,
                           StepDiagnostics& diag);

// --- equivalent-weights particle filters -----------------------------------

struct EwpfConfig {
    double keep_fraction = 0.8;  // ρ
    double epsilon = -1.0;       // default 0.0001/N
    double gamma_u = 1e-6;
    double log_gamma_n = std::numeric_limits<double>::quiet_NaN();  // default from ε, γ_U, N_x
};

struct EwpfReport {
    Index kept = 0;
    Index at_target = 0;               // uniform-branch particles whose −log-weight, less the ε-Gaussian density term, is the target
    double mixture_shift = 0.0;        // largest |log-weight change| from that ε-Gaussian term
    double target = 0.0;               // −log-weight every kept uniform-branch particle lands on
    Vector log_weights;                // before the final resampling
    Vector weights;
    Vector alpha;
    std::vector<bool> gaussian_branch;
    double weight_variance = 0.0;      // (1/N) Σ (w_i − 1/N)²
};

double ewpf_log_gamma_n(Index nx, double epsilon, double gamma_u);

Ensemble ewpf_step(const Ensemble& previous, const TransitionModel& model, const ObservationBundle& obs,
                   const EwpfConfig& cfg, const StepContext& ctx, StepDiagnostics& diag,
                   EwpfReport* report = nullptr);

struct IewpfReport {
    double c_target = 0.0;
    Vector deficit;      // a_j ≥ 0
    Vector gamma;        // ξ̃ᵀξ̃
    Vector alpha;
    Vector residual;     // scalar equation residuals
    Vector final_log_weights;
};

/// Solves (α−1)γ − n·log α = a for a ≥ 0 on the branch through α = 1 at a = 0.
double solve_iewpf_alpha(double gamma, double n, double a);
double iewpf_residual(double alpha, double gamma, double n, double a);

Ensemble iewpf_step(const Ensemble& previous, const TransitionModel& model, const ObservationBundle& obs,
                    const StepContext& ctx, StepDiagnostics& diag, IewpfReport* report = nullptr);

}  // namespace pfda
