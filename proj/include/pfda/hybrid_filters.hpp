#pragma once

#include "pfda/core.hpp"
#include "pfda/local_filters.hpp"
#include "pfda/models.hpp"
#include "pfda/resampling.hpp"

#include <array>
#include <functional>
#include <optional>
#include <vector>

namespace pfda {

struct SecondOrderReport {
    double mean_error = 0.0;        // ‖x̄^a − Σ w_i x_i‖_∞
    double covariance_error = 0.0;  // ‖P^a − Σ w_i (x_i − x̄)(x_i − x̄)ᵀ‖_∞, P^a with 1/N
};

/// Compares an equally weighted analysis with the weighted forecast moments.
SecondOrderReport second_order_report(const Matrix& analysis, const Matrix& forecast, const Vector& w);

// --- ETKF / LETKF -----------------------------------------------------------

struct EtkfConfig {
    std::optional<LocalizationSpec> loc;
    double inflation = 1.0;  // multiplicative, on the forecast anomalies
};

/// Deterministic square-root update; forecast weights are ignored.
Ensemble etkf_step(const Ensemble& forecast, const ObservationBundle& obs, const EtkfConfig& cfg,
                   const StepContext& ctx, StepDiagnostics& diag);

// --- adaptive Gaussian mixture ----------------------------------------------

struct AgmConfig {
    double h = 0.5;          // bandwidth, P̂ = h²P
    double alpha = 1.0;      // bridging
    bool adaptive = false;   // α = N_eff/N
    ResamplePolicy policy{ResamplePolicy::When::EssBelow, 0.5, ResampleMethod::Systematic};
};

struct AgmReport {
    double alpha = 0.0;
    Vector weights;          // before bridging
    Vector bridged;
    Matrix centers;
};

Ensemble agm_step(const Ensemble& forecast, const ObservationBundle& obs, const AgmConfig& cfg,
                  const StepContext& ctx, StepDiagnostics& diag, AgmReport* report = nullptr);

// --- EnKPF --------------------------------------------------------------------

struct EnkpfConfig {
    double alpha = 0.5;
    bool adaptive = false;
    std::vector<double> alpha_grid{0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0};
    double ess_fraction = 0.5;
    ResampleMethod method = ResampleMethod::Systematic;
};

struct EnkpfReport {
    double alpha = 0.0;
    Vector gamma;   // normalized mixture weights
    Matrix nu;      // SEnKF stage means
};

/// Normalized mixture weights γ(α) of the PF stage.
Vector enkpf_weights(const Ensemble& forecast, const ObservationBundle& obs, double alpha);

Ensemble enkpf_step(const Ensemble& forecast, const ObservationBundle& obs, const EnkpfConfig& cfg,
                    const StepContext& ctx, StepDiagnostics& diag, EnkpfReport* report = nullptr);

/// Smallest α on the grid whose PF-stage ESS reaches fraction·N; 1 if none.
double adaptive_alpha(const std::vector<double>& grid, double fraction,
                      const std::function<Vector(double)>& weights_at);
double adaptive_alpha(const Ensemble& forecast, const ObservationBundle& obs, const std::vector<double>& grid,
                      double fraction);

// --- merging PF -------------------------------------------------------------

std::array<double, 3> merging_coefficients();

Ensemble merging_pf_step(const Ensemble& forecast, const ObservationBundle& obs, const StepContext& ctx,
                         StepDiagnostics& diag);
/// Merge step on given weights.
Matrix merging_transform(const Matrix& members, const Vector& w, const StepContext& ctx);

// --- NETF ---------------------------------------------------------------------

/// T = w1ᵀ + √N V Λ^{1/2} Vᵀ for A = diag(w) − wwᵀ.
Matrix netf_transform_matrix(const Vector& w, int* clipped = nullptr);

struct NetfConfig {
    std::optional<LocalizationSpec> loc;
};

Ensemble netf_step(const Ensemble& forecast, const ObservationBundle& obs, const NetfConfig& cfg,
                   const StepContext& ctx, StepDiagnostics& diag);

// --- NLEAF -------------------------------------------------------------------

Ensemble nleaf_step(const Ensemble& forecast, const ObservationBundle& obs, const StepContext& ctx,
                    StepDiagnostics& diag);
/// Deterministic core with the perturbed observations supplied (one column per member).
Matrix nleaf_transform(const Matrix& members, const Vector& prior_w, const ObservationBundle& obs,
                       const Matrix& perturbed_obs);

// --- two-stage LETPF then LETKF ----------------------------------------------

struct HybridConfig {
    double alpha = 0.5;
    std::optional<LocalizationSpec> loc;
};

Ensemble hybrid_letpf_letkf_step(const Ensemble& forecast, const ObservationBundle& obs, const HybridConfig& cfg,
                                 const StepContext& ctx, StepDiagnostics& diag);

}  // namespace pfda
