#include "pfda/harness.hpp"

#include "params.hpp"

#include "pfda/hybrid_filters.hpp"
#include "pfda/local_filters.hpp"
#include "pfda/proposal_filters.hpp"
#include "pfda/resampling.hpp"
#include "pfda/transport_filters.hpp"

namespace pfda {

namespace {

using detail::Params;

using CycleFn = std::function<Ensemble(const Ensemble&, const TransitionModel&, const ObservationBundle&,
                                       const StepContext&, StepDiagnostics&)>;
using AnalyseFn = std::function<Ensemble(const Ensemble&, const ObservationBundle&, const StepContext&, StepDiagnostics&)>;

class CycleFilter final : public Filter {
public:
    CycleFilter(std::string name, CycleFn fn) : name_(std::move(name)), fn_(std::move(fn)) {}
    std::string name() const override { return name_; }
    Ensemble cycle(const Ensemble& previous, const TransitionModel& model, const ObservationBundle& obs,
                   const StepContext& ctx, StepDiagnostics& diag) const override {
        return fn_(previous, model, obs, ctx, diag);
    }

private:
    std::string name_;
    CycleFn fn_;
};

class StepFilter final : public AnalysisFilter {
public:
    StepFilter(std::string name, AnalyseFn fn) : name_(std::move(name)), fn_(std::move(fn)) {}
    std::string name() const override { return name_; }
    Ensemble analyse(const Ensemble& forecast, const ObservationBundle& obs, const StepContext& ctx,
                     StepDiagnostics& diag) const override {
        return fn_(forecast, obs, ctx, diag);
    }

private:
    std::string name_;
    AnalyseFn fn_;
};

ResamplePolicy parse_policy(Params& p) {
    ResamplePolicy policy;
    if (!p.has("resample")) return policy;
    Params r(p.raw("resample"), "filter.resample");
    const std::string when = r.get<std::string>("when", "always");
    if (when == "always") policy.when = ResamplePolicy::When::Always;
    else if (when == "ess_below") policy.when = ResamplePolicy::When::EssBelow;
    else if (when == "never") policy.when = ResamplePolicy::When::Never;
    else throw Error(ErrorCode::ConfigInvalid, "filter.resample.when must be always, ess_below or never");
    policy.threshold = r.get<double>("threshold", policy.threshold);
    policy.method = parse_resample_method(r.get<std::string>("method", "systematic"));
    r.finish();
    return policy;
}

ResampleMethod parse_method(Params& p) { return parse_resample_method(p.get<std::string>("method", "systematic")); }

LocalizationSpec parse_loc_block(const Json& j) {
    Params p(j, "filter.localization");
    LocalizationSpec loc;
    loc.radius = p.get<double>("radius", loc.radius);
    const std::string taper = p.get<std::string>("taper", "gaspari_cohn");
    if (taper == "gaspari_cohn") loc.taper = Taper::GaspariCohn;
    else if (taper == "gaussian") loc.taper = Taper::Gaussian;
    else if (taper == "tophat") loc.taper = Taper::TopHat;
    else throw Error(ErrorCode::ConfigInvalid, "unknown taper " + taper);
    const std::string form = p.get<std::string>("form", "log_taper");
    if (form == "log_taper") loc.form = LocalWeightForm::LogTaper;
    else if (form == "sum_taper") loc.form = LocalWeightForm::SumTaper;
    else throw Error(ErrorCode::ConfigInvalid, "unknown local weight form " + form);
    loc.smoothing_radius = p.get<double>("smoothing_radius", loc.smoothing_radius);
    loc.block = p.get<int>("block", loc.block);
    p.finish();
    loc.validate();
    return loc;
}

LocalizationSpec required_loc(Params& p) { return p.has("localization") ? parse_loc_block(p.raw("localization")) : LocalizationSpec{}; }

std::optional<LocalizationSpec> optional_loc(Params& p) {
    if (!p.has("localization")) return std::nullopt;
    return parse_loc_block(p.raw("localization"));
}

std::vector<double> get_doubles(Params& p, const std::string& key) {
    return p.has(key) ? p.get<std::vector<double>>(key, {}) : std::vector<double>{};
}

using Factory = std::function<std::unique_ptr<Filter>(Params&)>;

struct Entry {
    FilterInfo info;
    Factory make;
};

template <class F>
std::unique_ptr<Filter> cycle_filter(const std::string& name, F fn) {
    return std::make_unique<CycleFilter>(name, CycleFn(std::move(fn)));
}
template <class F>
std::unique_ptr<Filter> step_filter(const std::string& name, F fn) {
    return std::make_unique<StepFilter>(name, AnalyseFn(std::move(fn)));
}

const std::vector<Entry>& entries() {
    static const std::vector<Entry> list = [] {
        std::vector<Entry> v;
        auto add = [&](std::string name, std::string module, bool gated, std::string summary, Factory f) {
            v.push_back({FilterInfo{std::move(name), std::move(module), gated, std::move(summary)}, std::move(f)});
        };

        // --- proposal filters ---
        add("bootstrap", "proposal_filters", true, "standard particle filter", [](Params& p) {
            const ResamplePolicy policy = parse_policy(p);
            return step_filter("bootstrap", [policy](const Ensemble& f, const ObservationBundle& o, const StepContext& c,
                                                     StepDiagnostics& d) { return bootstrap_analysis(f, o, policy, c, d); });
        });
        add("relaxation", "proposal_filters", false, "nudged proposal, T = tau QH'(HQH'+R)^-1", [](Params& p) {
            const ResamplePolicy policy = parse_policy(p);
            const double tau = p.get<double>("tau", 1.0);
            return cycle_filter("relaxation", [policy, tau](const Ensemble& prev, const TransitionModel& m,
                                                            const ObservationBundle& o, const StepContext& c,
                                                            StepDiagnostics& d) {
                const Matrix h = o.h();
                const Matrix qh = m.noise().matrix() * h.transpose();
                GaussianCov s(Matrix(h * qh + o.r.matrix()));
                RelaxationConfig rc{tau * s.solve(Matrix(qh.transpose())).transpose(), m.noise()};
                return relaxation_cycle(prev, m, o, rc, policy, c, d);
            });
        });
        add("wekf", "proposal_filters", true, "weighted ensemble Kalman proposal", [](Params& p) {
            const ResamplePolicy policy = parse_policy(p);
            return cycle_filter("wekf", [policy](const Ensemble& prev, const TransitionModel& m, const ObservationBundle& o,
                                                 const StepContext& c, StepDiagnostics& d) {
                return wekf_step(prev, m, o, policy, c, d);
            });
        });
        add("optimal_proposal", "proposal_filters", true, "Gaussian optimal proposal", [](Params& p) {
            const ResamplePolicy policy = parse_policy(p);
            return cycle_filter("optimal_proposal", [policy](const Ensemble& prev, const TransitionModel& m,
                                                             const ObservationBundle& o, const StepContext& c,
                                                             StepDiagnostics& d) {
                return optimal_proposal_step(prev, m, o, policy, c, d);
            });
        });
        add("implicit", "proposal_filters", true, "implicit particle filter, random map", [](Params& p) {
            const ResamplePolicy policy = parse_policy(p);
            ImplicitConfig ic;
            ic.gradient_tol = p.get<double>("gradient_tol", ic.gradient_tol);
            ic.max_iterations = p.get<int>("max_iterations", ic.max_iterations);
            return cycle_filter("implicit", [policy, ic](const Ensemble& prev, const TransitionModel& m,
                                                         const ObservationBundle& o, const StepContext& c,
                                                         StepDiagnostics& d) {
                return implicit_pf_step(prev, m, o, ic, policy, c, d);
            });
        });
        add("auxiliary", "proposal_filters", true, "auxiliary particle filter", [](Params& p) {
            const ResamplePolicy policy = parse_policy(p);
            const std::string mode_name = p.get<std::string>("mode", "probe");
            AuxiliaryMode mode;
            if (mode_name == "probe") mode = AuxiliaryMode::Probe;
            else if (mode_name == "optimal") mode = AuxiliaryMode::Optimal;
            else throw Error(ErrorCode::ConfigInvalid, "filter.mode must be probe or optimal");
            return cycle_filter("auxiliary", [policy, mode](const Ensemble& prev, const TransitionModel& m,
                                                            const ObservationBundle& o, const StepContext& c,
                                                            StepDiagnostics& d) {
                return auxiliary_pf_step(prev, m, o, mode, policy, c, d);
            });
        });
        add("ewpf", "proposal_filters", false, "equivalent-weights particle filter", [](Params& p) {
            EwpfConfig ec;
            ec.keep_fraction = p.get<double>("keep_fraction", ec.keep_fraction);
            ec.epsilon = p.get<double>("epsilon", ec.epsilon);
            ec.gamma_u = p.get<double>("gamma_u", ec.gamma_u);
            if (!(ec.keep_fraction > 0.0 && ec.keep_fraction <= 1.0))
                throw Error(ErrorCode::ConfigInvalid, "filter.keep_fraction must lie in (0, 1]");
            return cycle_filter("ewpf", [ec](const Ensemble& prev, const TransitionModel& m, const ObservationBundle& o,
                                             const StepContext& c, StepDiagnostics& d) {
                return ewpf_step(prev, m, o, ec, c, d);
            });
        });
        add("iewpf", "proposal_filters", false, "implicit equal-weights particle filter", [](Params&) {
            return cycle_filter("iewpf", [](const Ensemble& prev, const TransitionModel& m, const ObservationBundle& o,
                                            const StepContext& c, StepDiagnostics& d) {
                return iewpf_step(prev, m, o, c, d);
            });
        });

        // --- transport filters ---
        add("etpf", "transport_filters", true, "ensemble transform particle filter", [](Params& p) {
            EtpfConfig ec;
            const std::string solver = p.get<std::string>("solver", "exact");
            if (solver == "exact") ec.solver = TransportSolver::Exact;
            else if (solver == "sinkhorn") ec.solver = TransportSolver::Sinkhorn;
            else throw Error(ErrorCode::ConfigInvalid, "filter.solver must be exact or sinkhorn");
            ec.second_order = p.get<bool>("second_order", false);
            ec.sinkhorn.lambda = p.get<double>("sinkhorn_lambda", ec.sinkhorn.lambda);
            ec.exact_limit = p.get<int>("exact_limit", ec.exact_limit);
            return step_filter("etpf", [ec](const Ensemble& f, const ObservationBundle& o, const StepContext&,
                                            StepDiagnostics& d) { return etpf_step(f, o, ec, d); });
        });
        add("tempered", "transport_filters", true, "likelihood tempering with resampling", [](Params& p) {
            TemperConfig tc;
            std::vector<double> g = get_doubles(p, "gammas");
            const int stages = p.get<int>("stages", 4);
            tc.schedule = g.empty() ? TemperSchedule::uniform(stages) : TemperSchedule{g};
            tc.schedule.validate();
            tc.jitter = p.get<double>("jitter", 0.0);
            tc.method = parse_method(p);
            return step_filter("tempered", [tc](const Ensemble& f, const ObservationBundle& o, const StepContext& c,
                                                StepDiagnostics& d) { return tempered_pf_step(f, o, tc, c, d); });
        });
        add("guided", "transport_filters", true, "guided PF over the model steps", [](Params& p) {
            GuidedConfig gc;
            gc.gammas = get_doubles(p, "gammas");
            gc.policy = parse_policy(p);
            return cycle_filter("guided", [gc](const Ensemble& prev, const TransitionModel& m, const ObservationBundle& o,
                                               const StepContext& c, StepDiagnostics& d) {
                return guided_pf_cycle(prev, m, o, gc, c, d);
            });
        });
        add("mapping_pf", "transport_filters", false, "Stein variational mapping PF", [](Params& p) {
            SteinConfig sc;
            sc.bandwidth = p.get<double>("bandwidth", sc.bandwidth);
            sc.step = p.get<double>("step", sc.step);
            sc.max_iterations = p.get<int>("max_iterations", sc.max_iterations);
            sc.tolerance = p.get<double>("tolerance", sc.tolerance);
            return step_filter("mapping_pf", [sc](const Ensemble& f, const ObservationBundle& o, const StepContext& c,
                                                  StepDiagnostics& d) { return mapping_pf_step(f, o, sc, c, d); });
        });

        // --- local filters ---
        add("penny", "local_filters", false, "localized PF with weight and field smoothing", [](Params& p) {
            PennyConfig pc;
            pc.loc = required_loc(p);
            pc.alpha = p.get<double>("alpha", pc.alpha);
            return step_filter("penny", [pc](const Ensemble& f, const ObservationBundle& o, const StepContext& c,
                                             StepDiagnostics& d) { return penny_localized_pf_step(f, o, pc, c, d); });
        });
        add("poterjoy", "local_filters", false, "local particle filter with partial updates", [](Params& p) {
            PoterjoyConfig pc;
            pc.loc = required_loc(p);
            pc.alpha = p.get<double>("alpha", pc.alpha);
            pc.moment_correction = p.get<bool>("moment_correction", false);
            pc.dressing_factor = p.get<double>("dressing_factor", pc.dressing_factor);
            return step_filter("poterjoy", [pc](const Ensemble& f, const ObservationBundle& o, const StepContext& c,
                                                StepDiagnostics& d) { return poterjoy_lpf_step(f, o, pc, c, d); });
        });
        add("lapf", "local_filters", false, "local adaptive particle filter", [](Params& p) {
            LapfConfig lc;
            lc.loc = required_loc(p);
            lc.c_min = p.get<double>("c_min", lc.c_min);
            lc.c_max = p.get<double>("c_max", lc.c_max);
            lc.fixed_c = p.get<double>("fixed_c", lc.fixed_c);
            return step_filter("lapf", [lc](const Ensemble& f, const ObservationBundle& o, const StepContext& c,
                                            StepDiagnostics& d) { return lapf_step(f, o, lc, c, d); });
        });
        add("letpf", "local_filters", true, "localized ensemble transform PF", [](Params& p) {
            LetpfConfig lc;
            lc.loc = required_loc(p);
            lc.second_order = p.get<bool>("second_order", false);
            return step_filter("letpf", [lc](const Ensemble& f, const ObservationBundle& o, const StepContext& c,
                                             StepDiagnostics& d) { return letpf_step(f, o, lc, c, d); });
        });
        add("location_pf", "local_filters", true, "sequential per-location resampling", [](Params& p) {
            LocationConfig lc;
            lc.jitter = p.get<double>("jitter", 0.0);
            lc.method = parse_method(p);
            return step_filter("location_pf", [lc](const Ensemble& f, const ObservationBundle& o, const StepContext& c,
                                                   StepDiagnostics& d) { return location_pf_step(f, o, lc, c, d); });
        });
        add("space_time_pf", "local_filters", true, "space-time PF on the spatial chain", [](Params& p) {
            SpaceTimeConfig sc;
            sc.local_members = p.get<Index>("local_members", sc.local_members);
            sc.method = parse_method(p);
            return cycle_filter("space_time_pf", [sc](const Ensemble& prev, const TransitionModel& m,
                                                      const ObservationBundle& o, const StepContext& c,
                                                      StepDiagnostics& d) {
                const auto* chain = dynamic_cast<const SpatialChainModel*>(&m);
                if (!chain) throw Error(ErrorCode::ConfigInvalid, "space_time_pf needs the chain model");
                return space_time_pf_cycle(prev, *chain, o, sc, c, d);
            });
        });

        // --- hybrids ---
        add("etkf", "hybrid_filters", false, "ensemble transform Kalman filter (local when localized)", [](Params& p) {
            EtkfConfig ec;
            ec.loc = optional_loc(p);
            ec.inflation = p.get<double>("inflation", 1.0);
            return step_filter("etkf", [ec](const Ensemble& f, const ObservationBundle& o, const StepContext& c,
                                            StepDiagnostics& d) { return etkf_step(f, o, ec, c, d); });
        });
        add("agm", "hybrid_filters", true, "adaptive Gaussian mixture filter", [](Params& p) {
            AgmConfig ac;
            ac.h = p.get<double>("h", ac.h);
            ac.alpha = p.get<double>("alpha", ac.alpha);
            ac.adaptive = p.get<bool>("adaptive", true);
            if (p.has("resample")) ac.policy = parse_policy(p);
            return step_filter("agm", [ac](const Ensemble& f, const ObservationBundle& o, const StepContext& c,
                                           StepDiagnostics& d) { return agm_step(f, o, ac, c, d); });
        });
        add("enkpf", "hybrid_filters", true, "ensemble Kalman particle filter", [](Params& p) {
            EnkpfConfig ec;
            ec.alpha = p.get<double>("alpha", ec.alpha);
            ec.adaptive = p.get<bool>("adaptive", false);
            if (p.has("alpha_grid")) ec.alpha_grid = get_doubles(p, "alpha_grid");
            ec.ess_fraction = p.get<double>("ess_fraction", ec.ess_fraction);
            ec.method = parse_method(p);
            return step_filter("enkpf", [ec](const Ensemble& f, const ObservationBundle& o, const StepContext& c,
                                             StepDiagnostics& d) { return enkpf_step(f, o, ec, c, d); });
        });
        add("merging", "hybrid_filters", false, "merging particle filter", [](Params&) {
            return step_filter("merging", [](const Ensemble& f, const ObservationBundle& o, const StepContext& c,
                                             StepDiagnostics& d) { return merging_pf_step(f, o, c, d); });
        });
        add("netf", "hybrid_filters", false, "nonlinear ensemble transform filter (local when localized)", [](Params& p) {
            NetfConfig nc;
            nc.loc = optional_loc(p);
            return step_filter("netf", [nc](const Ensemble& f, const ObservationBundle& o, const StepContext& c,
                                            StepDiagnostics& d) { return netf_step(f, o, nc, c, d); });
        });
        add("nleaf", "hybrid_filters", true, "nonlinear ensemble adjustment filter", [](Params&) {
            return step_filter("nleaf", [](const Ensemble& f, const ObservationBundle& o, const StepContext& c,
                                           StepDiagnostics& d) { return nleaf_step(f, o, c, d); });
        });
        add("hybrid_letpf_letkf", "hybrid_filters", true, "LETPF on R/alpha then LETKF on R/(1-alpha)", [](Params& p) {
            HybridConfig hc;
            hc.alpha = p.get<double>("alpha", hc.alpha);
            hc.loc = optional_loc(p);
            return step_filter("hybrid_letpf_letkf", [hc](const Ensemble& f, const ObservationBundle& o,
                                                          const StepContext& c, StepDiagnostics& d) {
                return hybrid_letpf_letkf_step(f, o, hc, c, d);
            });
        });
        return v;
    }();
    return list;
}

}  // namespace

const std::vector<FilterInfo>& filter_registry() {
    static const std::vector<FilterInfo> infos = [] {
        std::vector<FilterInfo> v;
        for (const auto& e : entries()) v.push_back(e.info);
        return v;
    }();
    return infos;
}

const FilterInfo& filter_info(const std::string& name) {
    for (const auto& f : filter_registry())
        if (f.name == name) return f;
    throw Error(ErrorCode::ConfigInvalid, "unknown filter " + name);
}

std::unique_ptr<Filter> make_filter(const Json& block) {
    Params p(block, "filter");
    const std::string name = p.get<std::string>("name", "");
    p.has("n");
    for (const auto& e : entries()) {
        if (e.info.name != name) continue;
        auto f = e.make(p);
        p.finish();
        return f;
    }
    throw Error(ErrorCode::ConfigInvalid, "unknown filter " + (name.empty() ? std::string("(missing name)") : name));
}

}  // namespace pfda
