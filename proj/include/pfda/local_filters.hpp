#pragma once

#include "pfda/core.hpp"
#include "pfda/models.hpp"
#include "pfda/resampling.hpp"
#include "pfda/transport_filters.hpp"

#include <vector>

namespace pfda {

// 1-D cyclic grid: the grid index of a state component is its position.

enum class Taper { GaspariCohn, Gaussian, TopHat };
/// Product of likelihood factors raised to the taper, or the tapered sum of
/// likelihoods.
enum class LocalWeightForm { LogTaper, SumTaper };

struct LocalizationSpec {
    double radius = 4.0;
    Taper taper = Taper::GaspariCohn;
    LocalWeightForm form = LocalWeightForm::LogTaper;
    double smoothing_radius = 2.0;  // G(d/h) scale for field smoothing
    int block = 1;                  // grid points per weight block

    /// ρ(d) in [0, 1]; 1 at d = 0; 0 beyond the radius for GC and top-hat.
    double taper_value(double distance) const;
    void validate() const;
};

double cyclic_distance(double a, double b, Index n);
double gaspari_cohn(double distance, double support);

struct LocalWeightField {
    Matrix w;                    // N × grid, each column normalized
    std::vector<int> obs_count;  // observations with nonzero taper per grid point
    int max_obs() const;
};

/// obs.locations gives the grid point of each scalar observation; R is used
/// through its diagonal.
LocalWeightField local_weights(const Matrix& members, const ObservationBundle& obs, const LocalizationSpec& loc,
                               const Vector* prior_weights = nullptr);
void warn_crowded_boxes(const LocalWeightField& field, StepDiagnostics& diag);

// --- Penny / Farchi --------------------------------------------------------

struct PennyConfig {
    LocalizationSpec loc;
    double alpha = 0.5;  // weight on the point's own value in the smoothing
};

Ensemble penny_localized_pf_step(const Ensemble& forecast, const ObservationBundle& obs, const PennyConfig& cfg,
                                 const StepContext& ctx, StepDiagnostics& diag);

// --- Poterjoy local particle filter -----------------------------------------

struct PoterjoyConfig {
    LocalizationSpec loc;
    double alpha = 0.99;
    bool moment_correction = false;
    double dressing_factor = 1.0;  // kernel width in units of the local spread
};

struct PoterjoyReport {
    Vector xbar;       // posterior local mean at each grid point after the last update touching it
    Vector c, r1, r2;  // scalars of that update
    Matrix omega;      // final normalized local weights, N × grid
};

Ensemble poterjoy_lpf_step(const Ensemble& forecast, const ObservationBundle& obs, const PoterjoyConfig& cfg,
                           const StepContext& ctx, StepDiagnostics& diag, PoterjoyReport* report = nullptr);

/// Maps each posterior member through F_w⁻¹(F_u(x)): F_w is the weighted,
/// kernel-dressed prior cdf and F_u the uniform dressed posterior cdf.
Vector poterjoy_moment_correction(const Vector& prior, const Vector& posterior, const Vector& weights,
                                  double dressing_factor = 1.0, int grid_points = 201);

// --- LAPF --------------------------------------------------------------------

struct LapfConfig {
    LocalizationSpec loc;
    double c_min = 0.05;
    double c_max = 1.0;
    double fixed_c = -1.0;  // ≥ 0 overrides the innovation estimate
};

struct LapfReport {
    Vector c;                  // per grid point
    double obs_spread = 0.0;   // RMS analysis spread in observation space
    double innovation = 0.0;   // RMS forecast innovation
};

Ensemble lapf_step(const Ensemble& forecast, const ObservationBundle& obs, const LapfConfig& cfg,
                   const StepContext& ctx, StepDiagnostics& diag, LapfReport* report = nullptr);

// --- LETPF ------------------------------------------------------------------

struct LetpfConfig {
    LocalizationSpec loc;
    bool second_order = false;
};

Ensemble letpf_step(const Ensemble& forecast, const ObservationBundle& obs, const LetpfConfig& cfg,
                    const StepContext& ctx, StepDiagnostics& diag);
/// Transform at every grid point from a given weight field.
Matrix letpf_transform(const Matrix& members, const LocalWeightField& field, bool second_order,
                       const StepContext& ctx);

// --- Location and space-time particle filters --------------------------------

struct LocationConfig {
    double jitter = 0.0;  // τ
    ResampleMethod method = ResampleMethod::Systematic;
};

Ensemble location_pf_step(const Ensemble& forecast, const ObservationBundle& obs, const LocationConfig& cfg,
                          const StepContext& ctx, StepDiagnostics& diag);

struct SpaceTimeConfig {
    Index local_members = 20;  // M
    ResampleMethod method = ResampleMethod::Systematic;
};

struct SpaceTimeReport {
    Vector log_global_weights;      // Σ_l log w̄^l per global particle, before normalization
    Matrix log_stage_means;         // log w̄^l, N × L
};

/// One cycle from the previous analysis; needs the spatial chain transition.
Ensemble space_time_pf_cycle(const Ensemble& previous, const SpatialChainModel& chain, const ObservationBundle& obs,
                             const SpaceTimeConfig& cfg, const StepContext& ctx, StepDiagnostics& diag,
                             SpaceTimeReport* report = nullptr);

}  // namespace pfda
