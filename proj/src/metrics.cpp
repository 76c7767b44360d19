#include "pfda/oracles_metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace pfda {

double rmse(const Vector& estimate, const Vector& truth) {
    if (estimate.size() != truth.size()) throw Error(ErrorCode::DimensionMismatch, "rmse sizes differ");
    return std::sqrt((estimate - truth).squaredNorm() / static_cast<double>(truth.size()));
}

double ensemble_rmse(const Ensemble& ens, const Vector& truth) { return rmse(ens.mean(), truth); }

double spread(const Ensemble& ens) {
    Matrix a = ens.members.colwise() - ens.mean();
    const double var = (a.array().square().rowwise() * ens.weights.transpose().array()).sum();
    return std::sqrt(var / static_cast<double>(ens.dim()));
}

double max_weight(const Vector& w) { return w.maxCoeff(); }

double crps(const Vector& values, const Vector& weights, double truth) {
    const Index n = values.size();
    std::vector<Index> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), Index{0});
    std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) { return values[a] < values[b]; });
    double total = 0.0;
    for (Index i = 0; i < n; ++i) total += weights[i];
    double abs_term = 0.0;
    for (Index i = 0; i < n; ++i) abs_term += weights[i] / total * std::abs(values[i] - truth);
    // Σ_{i<j} w_i w_j (x_j − x_i) over sorted values
    double pair_term = 0.0;
    double w_below = 0.0;
    double wx_below = 0.0;
    for (Index k : order) {
        const double w = weights[k] / total;
        pair_term += w * (values[k] * w_below - wx_below);
        w_below += w;
        wx_below += w * values[k];
    }
    return abs_term - pair_term;
}

double ensemble_crps(const Ensemble& ens, const Vector& truth) {
    double acc = 0.0;
    for (Index d = 0; d < ens.dim(); ++d) acc += crps(ens.members.row(d).transpose(), ens.weights, truth[d]);
    return acc / static_cast<double>(ens.dim());
}

Index truth_rank(const Vector& values, double truth, RngStream& ties) {
    Index below = 0;
    Index equal = 0;
    for (Index i = 0; i < values.size(); ++i) {
        if (values[i] < truth) ++below;
        else if (values[i] == truth) ++equal;
    }
    if (equal == 0) return below;
    const auto extra = static_cast<Index>(ties.uniform() * static_cast<double>(equal + 1));
    return below + std::min(extra, equal);
}

void RankHistogram::add(const Ensemble& ens, const Vector& truth, RngStream& ties) {
    // One scalar per call, rotating through the state components.
    const Index component = total() % ens.dim();
    const Index r = truth_rank(ens.members.row(component).transpose(), truth[component], ties);
    if (static_cast<std::size_t>(r) >= counts.size()) counts.resize(static_cast<std::size_t>(r + 1), 0);
    ++counts[static_cast<std::size_t>(r)];
}

long RankHistogram::total() const { return std::accumulate(counts.begin(), counts.end(), 0L); }

}  // namespace pfda
