#include "pfda/resampling.hpp"

#include <algorithm>
#include <numeric>

namespace pfda {

std::vector<Index> ResampleResult::counts(Index n) const {
    std::vector<Index> c(static_cast<std::size_t>(n), 0);
    for (Index i : indices) ++c[static_cast<std::size_t>(i)];
    return c;
}

double ess(const Vector& w) { return 1.0 / w.squaredNorm(); }

namespace {

// Cumulative weights with the last entry pinned to 1.
std::vector<double> cumulative(const Vector& w) {
    std::vector<double> cum(static_cast<std::size_t>(w.size()));
    double acc = 0.0;
    for (Index i = 0; i < w.size(); ++i) {
        acc += w[i];
        cum[static_cast<std::size_t>(i)] = acc;
    }
    for (double& c : cum) c /= acc;
    cum.back() = 1.0;
    return cum;
}

void check_weights(const Vector& w) {
    if (w.size() == 0) throw Error(ErrorCode::AllZeroWeights, "cannot resample an empty ensemble");
    if (!w.allFinite() || w.minCoeff() < 0.0 || !(w.sum() > 0.0))
        throw Error(ErrorCode::AllZeroWeights, "resampling needs nonnegative weights with positive sum");
}

}  // namespace

ResampleResult systematic_resample(const Vector& w, double u) {
    check_weights(w);
    const Index n = w.size();
    const double step = 1.0 / static_cast<double>(n);
    if (u < 0.0 || u > step) throw Error(ErrorCode::InfeasibleMarginals, "systematic offset outside [0, 1/N]");
    const auto cum = cumulative(w);
    ResampleResult r;
    r.method = ResampleMethod::Systematic;
    r.indices.resize(static_cast<std::size_t>(n));
    std::size_t i = 0;
    for (Index k = 0; k < n; ++k) {
        const double p = u + static_cast<double>(k) * step;
        while (i + 1 < cum.size() && p >= cum[i]) ++i;
        r.indices[static_cast<std::size_t>(k)] = static_cast<Index>(i);
    }
    return r;
}

ResampleResult systematic_resample(const Vector& w, RngStream& rng) {
    return systematic_resample(w, rng.uniform() / static_cast<double>(w.size()));
}

ResampleResult multinomial_resample(const Vector& w, RngStream& rng) {
    check_weights(w);
    const auto cum = cumulative(w);
    ResampleResult r;
    r.method = ResampleMethod::Multinomial;
    r.indices.resize(static_cast<std::size_t>(w.size()));
    for (auto& idx : r.indices) {
        const double u = rng.uniform();
        auto it = std::upper_bound(cum.begin(), cum.end(), u);
        idx = std::min<Index>(static_cast<Index>(it - cum.begin()), w.size() - 1);
    }
    return r;
}

ResampleResult universal_resample_sorted(const Vector& w, double u) {
    check_weights(w);
    std::vector<Index> order(static_cast<std::size_t>(w.size()));
    std::iota(order.begin(), order.end(), Index{0});
    std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) { return w[a] > w[b]; });
    Vector sorted(w.size());
    for (Index k = 0; k < w.size(); ++k) sorted[k] = w[order[static_cast<std::size_t>(k)]];
    ResampleResult r = systematic_resample(sorted, u);
    for (auto& idx : r.indices) idx = order[static_cast<std::size_t>(idx)];
    r.method = ResampleMethod::UniversalSorted;
    return r;
}

ResampleResult universal_resample_sorted(const Vector& w, RngStream& rng) {
    return universal_resample_sorted(w, rng.uniform() / static_cast<double>(w.size()));
}

bool ResamplePolicy::should_resample(const Vector& w) const {
    switch (when) {
        case When::Always: return true;
        case When::EssBelow: return ess(w) < threshold * static_cast<double>(w.size());
        case When::Never: return false;
    }
    return true;
}

ResampleResult resample(const Vector& w, ResampleMethod method, RngStream& rng) {
    switch (method) {
        case ResampleMethod::Systematic: return systematic_resample(w, rng);
        case ResampleMethod::Multinomial: return multinomial_resample(w, rng);
        case ResampleMethod::UniversalSorted: return universal_resample_sorted(w, rng);
    }
    return systematic_resample(w, rng);
}

Ensemble apply_resample(const Ensemble& ens, const ResampleResult& r) {
    Matrix m(ens.dim(), static_cast<Index>(r.indices.size()));
    for (std::size_t k = 0; k < r.indices.size(); ++k) m.col(static_cast<Index>(k)) = ens.members.col(r.indices[k]);
    return Ensemble::uniform(std::move(m));
}

Ensemble finish_with_log_weights(Matrix members, const Vector& logw, const ResamplePolicy& policy,
                                 RngStream& rng, StepDiagnostics& diag) {
    Vector w;
    try {
        w = log_weights_to_weights(logw);
    } catch (const Error& e) {
        if (e.code() != ErrorCode::AllZeroWeights) throw;
        w = uniform_weights(logw.size());
        diag.degenerate = true;
        diag.warn("all weights vanished; continuing from uniform weights");
    }
    diag.record_weights(w);
    Ensemble ens(std::move(members), w);
    if (!policy.should_resample(w)) return ens;
    diag.resampled = true;
    return apply_resample(ens, resample(w, policy.method, rng));
}

std::string method_name(ResampleMethod m) {
    switch (m) {
        case ResampleMethod::Systematic: return "systematic";
        case ResampleMethod::Multinomial: return "multinomial";
        case ResampleMethod::UniversalSorted: return "universal_sorted";
    }
    return "systematic";
}

ResampleMethod parse_resample_method(const std::string& s) {
    if (s == "systematic") return ResampleMethod::Systematic;
    if (s == "multinomial") return ResampleMethod::Multinomial;
    if (s == "universal_sorted") return ResampleMethod::UniversalSorted;
    throw Error(ErrorCode::ConfigInvalid, "unknown resampling method '" + s + "'");
}

}  // namespace pfda
