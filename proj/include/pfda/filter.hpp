#pragma once

#include "pfda/core.hpp"
#include "pfda/models.hpp"

#include <string>

namespace pfda {

/// One assimilation cycle: previous analysis ensemble in, analysis ensemble
/// out, observation valid at the end of the cycle.
class Filter {
public:
    virtual ~Filter() = default;

    virtual std::string name() const = 0;

    virtual Ensemble cycle(const Ensemble& previous, const TransitionModel& model,
                           const ObservationBundle& obs, const StepContext& ctx,
                           StepDiagnostics& diag) const = 0;

    /// Cycle without an observation: noisy forecast, weights carried over.
    virtual Ensemble forecast_only(const Ensemble& previous, const TransitionModel& model,
                                   const StepContext& ctx, StepDiagnostics& diag) const;
};

/// Filters that act on the forecast ensemble only.
class AnalysisFilter : public Filter {
public:
    Ensemble cycle(const Ensemble& previous, const TransitionModel& model,
                   const ObservationBundle& obs, const StepContext& ctx,
                   StepDiagnostics& diag) const final;

    virtual Ensemble analyse(const Ensemble& forecast, const ObservationBundle& obs,
                             const StepContext& ctx, StepDiagnostics& diag) const = 0;
};

}  // namespace pfda
