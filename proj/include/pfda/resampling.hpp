#pragma once

#include "pfda/core.hpp"

#include <string>
#include <vector>

namespace pfda {

enum class ResampleMethod { Systematic, Multinomial, UniversalSorted };

struct ResampleResult {
    std::vector<Index> indices;
    ResampleMethod method = ResampleMethod::Systematic;

    std::vector<Index> counts(Index n) const;
};

double ess(const Vector& w);

ResampleResult systematic_resample(const Vector& w, double u);
ResampleResult systematic_resample(const Vector& w, RngStream& rng);
ResampleResult multinomial_resample(const Vector& w, RngStream& rng);
ResampleResult universal_resample_sorted(const Vector& w, double u);
ResampleResult universal_resample_sorted(const Vector& w, RngStream& rng);

struct ResamplePolicy {
    enum class When { Always, EssBelow, Never };
    When when = When::Always;
    double threshold = 0.5;  // fraction of N for EssBelow
    ResampleMethod method = ResampleMethod::Systematic;

    bool should_resample(const Vector& w) const;
};

ResampleResult resample(const Vector& w, ResampleMethod method, RngStream& rng);
Ensemble apply_resample(const Ensemble& ens, const ResampleResult& r);

/// Log weights → normalized weights → policy-driven resampling. Records ESS,
/// max weight and degeneracy in diag. All −∞/NaN weights are treated as a
/// degeneracy event and replaced by uniform weights.
Ensemble finish_with_log_weights(Matrix members, const Vector& logw, const ResamplePolicy& policy,
                                 RngStream& rng, StepDiagnostics& diag);

std::string method_name(ResampleMethod m);
ResampleMethod parse_resample_method(const std::string& s);

}  // namespace pfda
