#include "pfda/local_filters.hpp"

#include <cmath>
// Boost 1.74 pchip calls unqualified isnan
using std::isnan;
#include <boost/math/interpolators/pchip.hpp>
#include <boost/math/tools/toms748_solve.hpp>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

namespace pfda {

double cyclic_distance(double a, double b, Index n) {
    const double nd = static_cast<double>(n);
    double d = std::fmod(std::abs(a - b), nd);
    return std::min(d, nd - d);
}

double gaspari_cohn(double distance, double support) {
    if (support <= 0.0) return distance == 0.0 ? 1.0 : 0.0;
    const double c = 0.5 * support;
    const double r = std::abs(distance) / c;
    if (r <= 1.0) return (((-0.25 * r + 0.5) * r + 0.625) * r - 5.0 / 3.0) * r * r + 1.0;
    if (r <= 2.0)
        return ((((r / 12.0 - 0.5) * r + 0.625) * r + 5.0 / 3.0) * r - 5.0) * r + 4.0 - 2.0 / (3.0 * r);
    return 0.0;
}

double LocalizationSpec::taper_value(double d) const {
    switch (taper) {
        case Taper::GaspariCohn: return std::clamp(gaspari_cohn(d, radius), 0.0, 1.0);
        case Taper::Gaussian: return std::exp(-0.5 * (d / radius) * (d / radius));
        case Taper::TopHat: return d <= radius ? 1.0 : 0.0;
    }
    return 0.0;
}

void LocalizationSpec::validate() const {
    if (!(radius > 0.0)) throw Error(ErrorCode::ConfigInvalid, "localization radius must be positive");
    if (block < 1) throw Error(ErrorCode::ConfigInvalid, "localization block must be >= 1");
}

int LocalWeightField::max_obs() const {
    return obs_count.empty() ? 0 : *std::max_element(obs_count.begin(), obs_count.end());
}

namespace {

const std::vector<Index>& obs_locations(const ObservationBundle& obs) {
    if (static_cast<Index>(obs.locations.size()) != obs.size())
        throw Error(ErrorCode::DimensionMismatch, "local filters need a grid location for every observation");
    return obs.locations;
}

double log_sum_exp(const Vector& v) {
    const double m = v.maxCoeff();
    if (!std::isfinite(m)) return m;
    return m + std::log((v.array() - m).exp().sum());
}

/// Normalized weights from log weights; uniform when nothing is finite.
Vector safe_normalize(const Vector& logw) {
    const double m = logw.maxCoeff();
    if (!std::isfinite(m)) return uniform_weights(logw.size());
    Vector w = (logw.array() - m).exp();
    return w / w.sum();
}

/// Per-observation, per-member log N(y_l; H(x_i)_l, R_ll).
Matrix obs_log_densities(const Matrix& y_pred, const ObservationBundle& obs) {
    const Vector r = obs.r.diagonal_values();
    Matrix out(y_pred.rows(), y_pred.cols());
    for (Index l = 0; l < y_pred.rows(); ++l) {
        const double c = -0.5 * std::log(2.0 * std::numbers::pi * r[l]);
        out.row(l) = (-0.5 * (obs.y[l] - y_pred.row(l).array()).square() / r[l] + c).matrix();
    }
    return out;
}

}  // namespace

LocalWeightField local_weights(const Matrix& members, const ObservationBundle& obs, const LocalizationSpec& loc,
                               const Vector* prior_weights) {
    loc.validate();
    const Index nx = members.rows();
    const Index n = members.cols();
    const auto& locs = obs_locations(obs);
    const Matrix logp = obs_log_densities(obs.op->apply_columns(members), obs);
    const Vector logprior = prior_weights ? Vector(prior_weights->array().log()) : Vector::Zero(n);

    LocalWeightField field;
    field.w.resize(n, nx);
    field.obs_count.assign(static_cast<std::size_t>(nx), 0);
    const Index blocks = (nx + loc.block - 1) / loc.block;
    for (Index b = 0; b < blocks; ++b) {
        const Index first = b * loc.block;
        const Index size = std::min<Index>(loc.block, nx - first);
        const double center = static_cast<double>(first) + 0.5 * static_cast<double>(size - 1);
        Vector lw = Vector::Zero(n);
        Vector terms;
        int count = 0;
        if (loc.form == LocalWeightForm::LogTaper) {
            for (Index l = 0; l < obs.size(); ++l) {
                const double rho = loc.taper_value(cyclic_distance(center, static_cast<double>(locs[static_cast<std::size_t>(l)]), nx));
                if (rho <= 0.0) continue;
                ++count;
                lw += rho * logp.row(l).transpose();
            }
        } else {
            std::vector<Index> used;
            std::vector<double> rhos;
            for (Index l = 0; l < obs.size(); ++l) {
                const double rho = loc.taper_value(cyclic_distance(center, static_cast<double>(locs[static_cast<std::size_t>(l)]), nx));
                if (rho <= 0.0) continue;
                used.push_back(l);
                rhos.push_back(rho);
            }
            count = static_cast<int>(used.size());
            if (count > 0) {
                terms.resize(count);
                for (Index i = 0; i < n; ++i) {
                    for (int k = 0; k < count; ++k)
                        terms[k] = std::log(rhos[static_cast<std::size_t>(k)]) + logp(used[static_cast<std::size_t>(k)], i);
                    lw[i] = log_sum_exp(terms);
                }
            }
        }
        const Vector w = safe_normalize(lw + logprior);
        for (Index k = first; k < first + size; ++k) {
            field.w.col(k) = w;
            field.obs_count[static_cast<std::size_t>(k)] = count;
        }
    }
    return field;
}

void warn_crowded_boxes(const LocalWeightField& field, StepDiagnostics& diag) {
    if (field.max_obs() > 10)
        diag.warn("a localization box holds " + std::to_string(field.max_obs()) + " observations (more than 10)");
}

// ---------------------------------------------------------------------------

Ensemble penny_localized_pf_step(const Ensemble& forecast, const ObservationBundle& obs, const PennyConfig& cfg,
                                 const StepContext& ctx, StepDiagnostics& diag) {
    const Index nx = forecast.dim();
    const Index n = forecast.size();
    LocalWeightField field = local_weights(forecast.members, obs, cfg.loc, &forecast.weights);
    warn_crowded_boxes(field, diag);
    // One offset for every grid point so that equal weight columns select equal indices
    const double u = ctx.rng.ensemble_stream(Purpose::Resample).uniform() / static_cast<double>(n);
    Matrix xa(nx, n);
    parallel_for(nx, ctx.threads, [&](Index k) {
        ResampleResult r = universal_resample_sorted(field.w.col(k), u);
        for (Index i = 0; i < n; ++i) xa(k, i) = forecast.members(k, r.indices[static_cast<std::size_t>(i)]);
    });
    Matrix out = xa;
    if (cfg.alpha < 1.0) {
        const double h = cfg.loc.smoothing_radius;
        parallel_for(nx, ctx.threads, [&](Index j) {
            std::vector<Index> nb;
            std::vector<double> g;
            for (Index k = 0; k < nx; ++k) {
                if (k == j) continue;
                const double d = cyclic_distance(static_cast<double>(j), static_cast<double>(k), nx);
                if (d > cfg.loc.radius) continue;
                nb.push_back(k);
                g.push_back(h > 0.0 ? std::exp(-0.5 * (d / h) * (d / h)) : 1.0);
            }
            if (nb.empty()) return;
            const double total = std::accumulate(g.begin(), g.end(), 0.0);
            Vector avg = Vector::Zero(n);
            for (std::size_t k = 0; k < nb.size(); ++k) avg += g[k] / total * xa.row(nb[k]).transpose();
            out.row(j) = cfg.alpha * xa.row(j) + (1.0 - cfg.alpha) * avg.transpose();
        });
    }
    diag.record_weights(field.w.col(0));
    diag.resampled = true;
    return Ensemble::uniform(std::move(out));
}

// ---------------------------------------------------------------------------

Ensemble poterjoy_lpf_step(const Ensemble& forecast, const ObservationBundle& obs, const PoterjoyConfig& cfg,
                           const StepContext& ctx, StepDiagnostics& diag, PoterjoyReport* report) {
    cfg.loc.validate();
    if (!(cfg.alpha >= 0.0 && cfg.alpha <= 1.0)) throw Error(ErrorCode::ConfigInvalid, "LPF alpha must lie in [0, 1]");
    const Index nx = forecast.dim();
    const Index n = forecast.size();
    const double nd = static_cast<double>(n);
    const auto& locs = obs_locations(obs);
    const Matrix& x0 = forecast.members;
    Matrix x = x0;
    const Matrix y0 = obs.op->apply_columns(x0);
    const Vector r = obs.r.diagonal_values();
    const double alpha = cfg.alpha;

    Matrix log_omega = forecast.weights.array().log().matrix().replicate(1, nx);
    PoterjoyReport rep;
    rep.xbar = x0 * forecast.weights;
    rep.c = Vector::Zero(nx);
    rep.r1 = Vector::Zero(nx);
    rep.r2 = Vector::Ones(nx);

    for (Index l = 0; l < obs.size(); ++l) {
        // Unnormalized likelihood of the prior particles
        const Vector p = (-0.5 * (obs.y[l] - y0.row(l).array()).square() / r[l]).exp();
        const Vector what = forecast.weights.cwiseProduct((alpha * p.array() + 1.0 - alpha).matrix());
        const double wtot = what.sum();
        if (!(wtot > 0.0)) throw Error(ErrorCode::AllZeroWeights, "LPF resampling weights vanished");
        RngStream rs = ctx.rng.ensemble_stream(Purpose::Resample, static_cast<std::uint32_t>(l));
        const ResampleResult k = systematic_resample(what / wtot, rs);
        const double wtilde = (alpha * p.array() + 1.0 - alpha).sum();
        const double loc_l = static_cast<double>(locs[static_cast<std::size_t>(l)]);

        parallel_for(nx, ctx.threads, [&](Index j) {
            const double rho = cfg.loc.taper_value(cyclic_distance(loc_l, static_cast<double>(j), nx));
            if (rho <= 0.0) return;
            const double ar = alpha * rho;
            log_omega.col(j) += (ar * p.array() + 1.0 - ar).log().matrix();
            const Vector om = safe_normalize(log_omega.col(j));
            const double xbar = om.dot(x0.row(j).transpose());
            const double s2 = om.dot((x0.row(j).array() - xbar).square().matrix()) / std::max(1e-300, 1.0 - om.squaredNorm());
            const Vector cur = x.row(j).transpose();
            Vector res(n);
            for (Index i = 0; i < n; ++i) res[i] = cur[k.indices[static_cast<std::size_t>(i)]] - xbar;
            const Vector dev = cur.array() - xbar;
            double c, r1, r2;
            if (ar < 1e-12) {
                // c → ∞: only the prior deviation term survives
                c = std::numeric_limits<double>::infinity();
                const double den = dev.squaredNorm() / (nd - 1.0);
                r1 = 0.0;
                r2 = den > 0.0 ? std::sqrt(s2 / den) : 0.0;
            } else {
                c = nd * (1.0 - ar) / (ar * wtilde);
                const double den = (res + c * dev).squaredNorm() / (nd - 1.0);
                r1 = den > 0.0 ? std::sqrt(s2 / den) : 0.0;
                r2 = c * r1;
            }
            x.row(j) = (xbar + r1 * res.array() + r2 * dev.array()).matrix().transpose();
            rep.xbar[j] = xbar;
            rep.c[j] = c;
            rep.r1[j] = r1;
            rep.r2[j] = r2;
        });
    }

    rep.omega.resize(n, nx);
    for (Index j = 0; j < nx; ++j) rep.omega.col(j) = safe_normalize(log_omega.col(j));
    if (cfg.moment_correction) {
        int fallbacks = 0;
        for (Index j = 0; j < nx; ++j) {
            try {
                x.row(j) = poterjoy_moment_correction(x0.row(j).transpose(), x.row(j).transpose(), rep.omega.col(j),
                                                      cfg.dressing_factor)
                               .transpose();
            } catch (const Error& e) {
                if (e.code() != ErrorCode::NonMonotoneCdf) throw;
                ++fallbacks;
            }
        }
        if (fallbacks > 0) diag.warn(std::to_string(fallbacks) + " grid points skipped the moment correction");
    }
    diag.record_weights(rep.omega.col(0));
    diag.resampled = true;
    if (report) *report = rep;
    return Ensemble::uniform(std::move(x));
}

namespace {

double weighted_sd(const Vector& x, const Vector& w) {
    const double m = w.dot(x);
    const double v = w.dot((x.array() - m).square().matrix()) / std::max(1e-300, 1.0 - w.squaredNorm());
    return std::sqrt(std::max(0.0, v));
}

/// Gaussian-dressed cdf on the grid by trapezoid integration of the density.
Vector dressed_cdf(const Vector& grid, const Vector& centers, const Vector& w, double width) {
    Vector pdf = Vector::Zero(grid.size());
    const double c = 1.0 / (width * std::sqrt(2.0 * std::numbers::pi));
    for (Index g = 0; g < grid.size(); ++g)
        for (Index i = 0; i < centers.size(); ++i) {
            const double z = (grid[g] - centers[i]) / width;
            pdf[g] += w[i] * c * std::exp(-0.5 * z * z);
        }
    Vector cdf(grid.size());
    cdf[0] = 0.0;
    for (Index g = 1; g < grid.size(); ++g) cdf[g] = cdf[g - 1] + 0.5 * (grid[g] - grid[g - 1]) * (pdf[g] + pdf[g - 1]);
    return cdf / cdf[cdf.size() - 1];
}

}  // namespace

Vector poterjoy_moment_correction(const Vector& prior, const Vector& posterior, const Vector& weights,
                                  double dressing_factor, int grid_points) {
    const Index n = posterior.size();
    const Vector wu = uniform_weights(n);
    const double sw = dressing_factor * weighted_sd(prior, weights);
    const double su = dressing_factor * weighted_sd(posterior, wu);
    if (!(sw > 0.0) || !(su > 0.0)) return posterior;
    const double width = std::max(sw, su);
    const double lo = std::min(prior.minCoeff(), posterior.minCoeff()) - 3.0 * width;
    const double hi = std::max(prior.maxCoeff(), posterior.maxCoeff()) + 3.0 * width;
    const Vector grid = Vector::LinSpaced(grid_points, lo, hi);
    const Vector fw = dressed_cdf(grid, prior, weights, sw);
    const Vector fu = dressed_cdf(grid, posterior, wu, su);

    std::vector<double> gx(grid.data(), grid.data() + grid.size());
    bool monotone = true;
    for (Index g = 1; g < grid.size(); ++g)
        if (!(fw[g] > fw[g - 1]) || !(fu[g] >= fu[g - 1])) monotone = false;

    Vector out(n);
    if (monotone) {
        using boost::math::interpolators::pchip;
        pchip<std::vector<double>> fu_i(std::vector<double>(gx), std::vector<double>(fu.data(), fu.data() + fu.size()));
        pchip<std::vector<double>> fw_i(std::vector<double>(gx), std::vector<double>(fw.data(), fw.data() + fw.size()));
        for (Index i = 0; i < n; ++i) {
            const double u = std::clamp(fu_i(posterior[i]), 0.0, 1.0);
            // Bracket in the grid, then invert the monotone interpolant
            auto it = std::lower_bound(fw.data(), fw.data() + fw.size(), u);
            Index g = std::clamp<Index>(static_cast<Index>(it - fw.data()), 1, grid.size() - 1);
            double a = grid[g - 1], b = grid[g];
            auto f = [&](double z) { return fw_i(z) - u; };
            const double fa = f(a), fb = f(b);
            if (fa == 0.0) { out[i] = a; continue; }
            if (fb == 0.0) { out[i] = b; continue; }
            if (fa > 0.0 || fb < 0.0) { out[i] = fa > 0.0 ? a : b; continue; }
            std::uintmax_t iters = 100;
            auto [r0, r1] = boost::math::tools::toms748_solve(f, a, b, fa, fb,
                                                              boost::math::tools::eps_tolerance<double>(50), iters);
            out[i] = 0.5 * (r0 + r1);
        }
        return out;
    }
    // Linear interpolation of the inverse when the cdf has flat stretches
    for (Index i = 0; i < n; ++i) {
        auto itu = std::upper_bound(grid.data(), grid.data() + grid.size(), posterior[i]);
        Index g = std::clamp<Index>(static_cast<Index>(itu - grid.data()), 1, grid.size() - 1);
        const double t = (posterior[i] - grid[g - 1]) / (grid[g] - grid[g - 1]);
        const double u = fu[g - 1] + t * (fu[g] - fu[g - 1]);
        auto itw = std::lower_bound(fw.data(), fw.data() + fw.size(), u);
        Index h = std::clamp<Index>(static_cast<Index>(itw - fw.data()), 1, grid.size() - 1);
        const double span = fw[h] - fw[h - 1];
        if (!(span > 0.0)) throw Error(ErrorCode::NonMonotoneCdf, "weighted prior cdf is flat at the target quantile");
        out[i] = grid[h - 1] + (u - fw[h - 1]) / span * (grid[h] - grid[h - 1]);
    }
    return out;
}

// ---------------------------------------------------------------------------

Ensemble lapf_step(const Ensemble& forecast, const ObservationBundle& obs, const LapfConfig& cfg,
                   const StepContext& ctx, StepDiagnostics& diag, LapfReport* report) {
    cfg.loc.validate();
    const Index nx = forecast.dim();
    const Index n = forecast.size();
    const double nd = static_cast<double>(n);
    const auto& locs = obs_locations(obs);
    const Matrix& x = forecast.members;
    const Matrix y = obs.op->apply_columns(x);
    const Vector ybar = y.rowwise().mean();
    const Matrix yb = y.colwise() - ybar;
    const Vector innov = obs.y - ybar;
    const Vector r = obs.r.diagonal_values();
    const Vector logprior = forecast.weights.array().log();
    const Matrix xp = x.colwise() - x.rowwise().mean();

    // Shared draws: one offset and N global coefficient vectors
    const double u = ctx.rng.ensemble_stream(Purpose::Resample).uniform() / static_cast<double>(n);
    Matrix z(n, n);
    for (Index i = 0; i < n; ++i) {
        RngStream s = ctx.rng.stream(static_cast<std::uint64_t>(i), Purpose::Spread);
        z.col(i) = s.normal_vector(n);
    }

    Matrix xa(nx, n);
    Vector cvec = Vector::Zero(nx);
    std::vector<int> counts(static_cast<std::size_t>(nx), 0);
    std::vector<char> rank_deficient(static_cast<std::size_t>(nx), 0);
    parallel_for(nx, ctx.threads, [&](Index j) {
        std::vector<Index> used;
        std::vector<double> rho;
        for (Index l = 0; l < obs.size(); ++l) {
            const double t = cfg.loc.taper_value(cyclic_distance(static_cast<double>(j), static_cast<double>(locs[static_cast<std::size_t>(l)]), nx));
            if (t <= 0.0) continue;
            used.push_back(l);
            rho.push_back(t);
        }
        const Index m = static_cast<Index>(used.size());
        counts[static_cast<std::size_t>(j)] = static_cast<int>(m);
        if (m == 0) {
            xa.row(j) = x.row(j);
            return;
        }
        Matrix ybl(m, n);
        Vector d(m), rinv(m);
        double innov2 = 0.0, rmean = 0.0;
        for (Index k = 0; k < m; ++k) {
            const Index l = used[static_cast<std::size_t>(k)];
            ybl.row(k) = yb.row(l);
            d[k] = innov[l];
            rinv[k] = rho[static_cast<std::size_t>(k)] / r[l];
            innov2 += innov[l] * innov[l];
            rmean += r[l];
        }
        innov2 /= static_cast<double>(m);
        rmean /= static_cast<double>(m);
        // Projection of the innovation onto the span of the predicted
        // observations in the R⁻¹ metric, through the whitened thin SVD
        const Vector rsq = rinv.cwiseSqrt();
        Eigen::JacobiSVD<Matrix> svd(rsq.asDiagonal() * ybl, Eigen::ComputeThinU);
        const Vector sv = svd.singularValues();
        const double cut = 1e-5 * std::max(1e-300, sv.size() ? sv[0] : 0.0);
        Index rank = 0;
        while (rank < sv.size() && sv[rank] > cut) ++rank;
        if (rank < std::min<Index>(m, n - 1)) rank_deficient[static_cast<std::size_t>(j)] = 1;
        const Matrix ur = svd.matrixU().leftCols(rank);
        const Vector proj = (ur * (ur.transpose() * rsq.asDiagonal() * d)).cwiseQuotient(rsq);
        Vector lw(n);
        for (Index i = 0; i < n; ++i) {
            const Vector e = proj - ybl.col(i);
            lw[i] = -0.5 * e.dot(rinv.asDiagonal() * e) + logprior[i];
        }
        const Vector w = safe_normalize(lw);
        ResampleResult res = universal_resample_sorted(w, u);
        const double hph = (ybl.array().square().rowwise().sum()).sum() / (nd - 1.0) / static_cast<double>(m);
        double c = cfg.fixed_c;
        if (c < 0.0) c = hph > 0.0 ? std::clamp((innov2 - rmean) / hph, cfg.c_min, cfg.c_max) : cfg.c_max;
        cvec[j] = c;
        const Vector spread = std::sqrt(c / (nd - 1.0)) * (xp.row(j) * z).transpose();
        for (Index i = 0; i < n; ++i) xa(j, i) = x(j, res.indices[static_cast<std::size_t>(i)]) + spread[i];
    });
    const int deficient = static_cast<int>(std::count(rank_deficient.begin(), rank_deficient.end(), char{1}));
    if (deficient > 0) diag.warn(std::to_string(deficient) + " LAPF boxes used a pseudo-inverse projection");
    if (*std::max_element(counts.begin(), counts.end()) > 10)
        diag.warn("a localization box holds more than 10 observations");
    if (report) {
        report->c = cvec;
        const Vector r_mean = r;
        report->obs_spread = std::sqrt((yb.array().square().rowwise().sum() / (nd - 1.0)).mean() + r_mean.mean());
        report->innovation = std::sqrt(innov.squaredNorm() / static_cast<double>(innov.size()));
    }
    diag.record_weights(uniform_weights(n));
    diag.resampled = true;
    return Ensemble::uniform(std::move(xa));
}

// ---------------------------------------------------------------------------

Matrix letpf_transform(const Matrix& members, const LocalWeightField& field, bool second_order,
                       const StepContext& ctx) {
    const Index nx = members.rows();
    Matrix out(nx, members.cols());
    parallel_for(nx, ctx.threads, [&](Index k) {
        const Vector xk = members.row(k).transpose();
        TransportPlan plan = solve_transport_1d(xk, field.w.col(k));
        if (second_order) plan.d = etpf_second_order_correction(plan.d, field.w.col(k));
        out.row(k) = (members.row(k) * plan.d);
    });
    return out;
}

Ensemble letpf_step(const Ensemble& forecast, const ObservationBundle& obs, const LetpfConfig& cfg,
                    const StepContext& ctx, StepDiagnostics& diag) {
    LocalWeightField field = local_weights(forecast.members, obs, cfg.loc, &forecast.weights);
    warn_crowded_boxes(field, diag);
    diag.record_weights(field.w.col(0));
    diag.resampled = true;
    return Ensemble::uniform(letpf_transform(forecast.members, field, cfg.second_order, ctx));
}

// ---------------------------------------------------------------------------

Ensemble location_pf_step(const Ensemble& forecast, const ObservationBundle& obs, const LocationConfig& cfg,
                          const StepContext& ctx, StepDiagnostics& diag) {
    const Index nx = forecast.dim();
    const Index n = forecast.size();
    const auto& locs = obs_locations(obs);
    Matrix x = forecast.members;
    Vector logprior = forecast.weights.array().log();
    bool first = true;
    for (Index j = 0; j < nx; ++j) {
        std::vector<Index> here;
        for (Index l = 0; l < obs.size(); ++l)
            if (locs[static_cast<std::size_t>(l)] == j) here.push_back(l);
        if (here.empty()) continue;
        const Matrix lp = obs_log_densities(obs.op->apply_columns(x), obs);
        Vector logw = first ? logprior : Vector::Zero(n);
        for (Index l : here) logw += lp.row(l).transpose();
        const Vector w = log_weights_to_weights(logw);
        if (first) diag.record_weights(w);
        first = false;
        const auto stage = static_cast<std::uint32_t>(j);
        RngStream rs = ctx.rng.ensemble_stream(Purpose::Resample, stage);
        x = apply_resample(Ensemble(x, w), resample(w, cfg.method, rs)).members;
        if (cfg.jitter > 0.0 && n > 1) {
            GaussianCov s(Matrix(cfg.jitter * cfg.jitter * sample_covariance(x)));
            parallel_for(n, ctx.threads, [&](Index i) {
                RngStream js = ctx.rng.stream(static_cast<std::uint64_t>(i), Purpose::Jitter, stage);
                x.col(i) += s.sample(js);
            });
        }
    }
    if (first) return Ensemble(x, forecast.weights);
    diag.resampled = true;
    return Ensemble::uniform(std::move(x));
}

Ensemble space_time_pf_cycle(const Ensemble& previous, const SpatialChainModel& chain, const ObservationBundle& obs,
                             const SpaceTimeConfig& cfg, const StepContext& ctx, StepDiagnostics& diag,
                             SpaceTimeReport* report) {
    if (obs.op->kind() != ObsOperator::Kind::Selection)
        throw Error(ErrorCode::DimensionMismatch, "space-time PF needs a selection observation operator");
    if (chain.steps_per_cycle() != 1) throw Error(ErrorCode::ConfigInvalid, "space-time PF needs one model step per cycle");
    const Index sites = chain.dim();
    const Index n = previous.size();
    const Index m = cfg.local_members;
    if (m < 1) throw Error(ErrorCode::ConfigInvalid, "space-time PF needs at least one local member");
    const auto& idx = obs.op->indices();
    const Vector r = obs.r.diagonal_values();
    std::vector<std::vector<Index>> at_site(static_cast<std::size_t>(sites));
    for (std::size_t l = 0; l < idx.size(); ++l) at_site[static_cast<std::size_t>(idx[l])].push_back(static_cast<Index>(l));

    diag.forecast_mean = chain.step(previous.members * previous.weights);
    Matrix out(sites, n);
    Vector logg = previous.weights.array().log();
    Matrix stage_means = Matrix::Zero(n, sites);
    const double s = chain.noise_sd();
    parallel_for(n, ctx.threads, [&](Index i) {
        const Vector prev = previous.members.col(i);
        Matrix traj(sites, m);
        RngStream draw = ctx.rng.stream(static_cast<std::uint64_t>(i), Purpose::Proposal);
        for (Index l = 0; l < sites; ++l) {
            for (Index k = 0; k < m; ++k) {
                const double left = l > 0 ? traj(l - 1, k) : 0.0;
                traj(l, k) = chain.conditional_mean(l, left, prev[l]) + s * draw.normal();
            }
            const auto& here = at_site[static_cast<std::size_t>(l)];
            if (here.empty()) continue;
            Vector lw = Vector::Zero(m);
            for (Index o : here) {
                const double c = -0.5 * std::log(2.0 * std::numbers::pi * r[o]);
                lw += (-0.5 * (obs.y[o] - traj.row(l).array()).square() / r[o] + c).matrix().transpose();
            }
            const double mean_w = log_sum_exp(lw) - std::log(static_cast<double>(m));
            stage_means(i, l) = mean_w;
            logg[i] += mean_w;
            if (!std::isfinite(mean_w)) break;
            RngStream rs = ctx.rng.stream(static_cast<std::uint64_t>(i), Purpose::Local, static_cast<std::uint32_t>(l));
            const ResampleResult res = resample(safe_normalize(lw), cfg.method, rs);
            Matrix copy = traj.topRows(l + 1);
            for (Index k = 0; k < m; ++k) traj.topRows(l + 1).col(k) = copy.col(res.indices[static_cast<std::size_t>(k)]);
        }
        RngStream pick = ctx.rng.stream(static_cast<std::uint64_t>(i), Purpose::Mixture);
        const Index chosen = std::min<Index>(m - 1, static_cast<Index>(pick.uniform() * static_cast<double>(m)));
        out.col(i) = traj.col(chosen);
    });
    if (report) {
        report->log_global_weights = stage_means.rowwise().sum();
        report->log_stage_means = stage_means;
    }
    const Vector w = log_weights_to_weights(logg);
    diag.record_weights(w);
    diag.resampled = true;
    RngStream rs = ctx.rng.ensemble_stream(Purpose::Resample);
    return apply_resample(Ensemble(std::move(out), w), resample(w, cfg.method, rs));
}

}  // namespace pfda
