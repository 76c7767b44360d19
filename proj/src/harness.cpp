#include "pfda/harness.hpp"

#include "params.hpp"

#include "pfda/hybrid_filters.hpp"
#include "pfda/oracles_metrics.hpp"
#include "pfda/proposal_filters.hpp"
#include "pfda/resampling.hpp"
#include "pfda/transport_filters.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#ifndef PFDA_VERSION
#define PFDA_VERSION "dev"
#endif

namespace pfda {

using detail::Params;

namespace {

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(double v) {
    if (std::isnan(v)) return "nan";
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.12g", v);
    return buf;
}

Json num_or_null(double v) { return std::isfinite(v) ? Json(v) : Json(nullptr); }

double median(std::vector<double> v) {
    v.erase(std::remove_if(v.begin(), v.end(), [](double x) { return std::isnan(x); }), v.end());
    if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
    std::sort(v.begin(), v.end());
    const std::size_t m = v.size() / 2;
    return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

double mean_of(const std::vector<double>& v) {
    double s = 0.0;
    std::size_t k = 0;
    for (double x : v)
        if (!std::isnan(x)) {
            s += x;
            ++k;
        }
    return k ? s / static_cast<double>(k) : std::numeric_limits<double>::quiet_NaN();
}

// --- config pieces -----------------------------------------------------------

/// Number → scalar variance, flat array → diagonal, nested array → full matrix.
GaussianCov parse_cov(const Json& j, Index n, const std::string& where) {
    if (j.is_number()) return GaussianCov::scalar(n, j.get<double>());
    if (!j.is_array()) throw Error(ErrorCode::ConfigInvalid, where + " must be a number or an array");
    if (!j.empty() && j.front().is_array()) {
        if (static_cast<Index>(j.size()) != n) throw Error(ErrorCode::ConfigInvalid, where + " has the wrong size");
        Matrix m(n, n);
        for (Index r = 0; r < n; ++r) {
            if (static_cast<Index>(j[static_cast<std::size_t>(r)].size()) != n)
                throw Error(ErrorCode::ConfigInvalid, where + " has the wrong size");
            for (Index c = 0; c < n; ++c) m(r, c) = j[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)].get<double>();
        }
        return GaussianCov(m);
    }
    if (static_cast<Index>(j.size()) != n) throw Error(ErrorCode::ConfigInvalid, where + " has the wrong size");
    Vector d(n);
    for (Index k = 0; k < n; ++k) d[k] = j[static_cast<std::size_t>(k)].get<double>();
    return GaussianCov::diagonal(d);
}

Vector parse_vector(const Json& j, Index n, const std::string& where) {
    if (j.is_number()) return Vector::Constant(n, j.get<double>());
    if (!j.is_array() || static_cast<Index>(j.size()) != n)
        throw Error(ErrorCode::ConfigInvalid, where + " must be a number or an array of length " + std::to_string(n));
    Vector v(n);
    for (Index k = 0; k < n; ++k) v[k] = j[static_cast<std::size_t>(k)].get<double>();
    return v;
}

Matrix parse_matrix(const Json& j, const std::string& where) {
    if (!j.is_array() || j.empty() || !j.front().is_array())
        throw Error(ErrorCode::ConfigInvalid, where + " must be a nested array");
    const Index rows = static_cast<Index>(j.size());
    const Index cols = static_cast<Index>(j.front().size());
    Matrix m(rows, cols);
    for (Index r = 0; r < rows; ++r) {
        if (static_cast<Index>(j[static_cast<std::size_t>(r)].size()) != cols)
            throw Error(ErrorCode::ConfigInvalid, where + " is ragged");
        for (Index c = 0; c < cols; ++c) m(r, c) = j[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)].get<double>();
    }
    return m;
}

std::shared_ptr<const TransitionModel> parse_model(const Json& j) {
    Params p(j, "model");
    const std::string type = p.get<std::string>("type", "");
    const int steps = p.get<int>("steps_per_cycle", 1);
    if (steps < 1) throw Error(ErrorCode::ConfigInvalid, "model.steps_per_cycle must be positive");
    auto noise = [&](Index n) { return p.has("q") ? parse_cov(p.raw("q"), n, "model.q") : GaussianCov::scalar(n, 0.0); };
    std::shared_ptr<const TransitionModel> model;
    if (type == "linear") {
        Matrix m;
        if (p.has("matrix")) {
            m = parse_matrix(p.raw("matrix"), "model.matrix");
        } else {
            const Index nx = p.get<Index>("nx", 1);
            m = p.get<double>("scalar", 1.0) * Matrix::Identity(nx, nx);
        }
        if (m.rows() != m.cols()) throw Error(ErrorCode::ConfigInvalid, "model.matrix must be square");
        model = std::make_shared<LinearGaussianModel>(m, noise(m.rows()), steps);
    } else if (type == "lorenz63") {
        model = std::make_shared<Lorenz63Model>(p.get<double>("dt", 0.01), noise(3), steps, p.get<double>("sigma", 10.0),
                                                p.get<double>("rho", 28.0), p.get<double>("beta", 8.0 / 3.0));
    } else if (type == "lorenz96") {
        const Index nx = p.get<Index>("nx", 40);
        model = std::make_shared<Lorenz96Model>(nx, p.get<double>("forcing", 8.0), p.get<double>("dt", 0.05), noise(nx),
                                                steps);
    } else if (type == "chain") {
        if (steps != 1) throw Error(ErrorCode::ConfigInvalid, "the chain model has one step per cycle");
        model = std::make_shared<SpatialChainModel>(p.get<Index>("sites", 10), p.get<double>("spatial", 0.5),
                                                    p.get<double>("temporal", 0.5), p.get<double>("noise_sd", 1.0));
    } else {
        throw Error(ErrorCode::ConfigInvalid, "model.type must be linear, lorenz63, lorenz96 or chain");
    }
    p.finish();
    return model;
}

void parse_observation(const Json& j, TwinExperiment& twin) {
    Params p(j, "observation");
    const Index nx = twin.model->dim();
    const std::string kind = p.get<std::string>("operator", "selection");
    std::vector<Index> idx;
    if (p.has("indices")) {
        idx = p.get<std::vector<Index>>("indices", {});
    } else {
        const Index stride = p.get<Index>("stride", 1);
        const Index offset = p.get<Index>("offset", 0);
        const Index count = p.get<Index>("count", -1);
        if (stride < 1 || offset < 0) throw Error(ErrorCode::ConfigInvalid, "observation.stride/offset invalid");
        for (Index k = offset; k < nx; k += stride) idx.push_back(k);
        if (count >= 0) {
            if (count > static_cast<Index>(idx.size())) throw Error(ErrorCode::ConfigInvalid, "observation.count exceeds the grid");
            idx.resize(static_cast<std::size_t>(count));
        }
    }
    for (Index k : idx)
        if (k < 0 || k >= nx) throw Error(ErrorCode::ConfigInvalid, "observation index out of range");
    if (kind == "selection") twin.op = ObsOperator::selection(nx, idx);
    else if (kind == "square") twin.op = ObsOperator::square(nx, idx);
    else if (kind == "abs") twin.op = ObsOperator::absolute(nx, idx);
    else if (kind == "dense") twin.op = ObsOperator::dense(parse_matrix(p.raw("matrix"), "observation.matrix"));
    else throw Error(ErrorCode::ConfigInvalid, "observation.operator must be selection, dense, square or abs");
    if (twin.op->input_dim() != nx) throw Error(ErrorCode::ConfigInvalid, "observation.matrix has the wrong width");
    const Index ny = twin.op->output_dim();
    twin.r = p.has("r") ? parse_cov(p.raw("r"), ny, "observation.r") : GaussianCov::scalar(ny, 1.0);
    twin.obs_every = p.get<int>("every_cycles", 1);
    if (p.has("locations")) twin.obs_locations = p.get<std::vector<Index>>("locations", {});
    else if (kind != "dense") twin.obs_locations = idx;
    if (!twin.obs_locations.empty() && static_cast<Index>(twin.obs_locations.size()) != ny)
        throw Error(ErrorCode::ConfigInvalid, "observation.locations needs one entry per observation");
    p.finish();
}

void parse_initial(const Json& j, TwinExperiment& twin) {
    Params p(j, "initial");
    const Index nx = twin.model->dim();
    Vector truth;
    if (p.has("truth")) {
        truth = parse_vector(p.raw("truth"), nx, "initial.truth");
    } else if (twin.model->kind() == "lorenz96") {
        truth = Vector::Constant(nx, static_cast<const Lorenz96Model&>(*twin.model).forcing());
    } else if (twin.model->kind() == "lorenz63") {
        truth = Vector::Ones(3);
    } else {
        truth = Vector::Zero(nx);
    }
    truth[0] += p.get<double>("truth_perturbation", 0.0);
    const int spinup = p.get<int>("spinup_steps", 0);
    for (int k = 0; k < spinup; ++k) truth = twin.model->step(truth);
    twin.initial_truth = truth;
    twin.initial_mean = p.has("mean") ? parse_vector(p.raw("mean"), nx, "initial.mean") : truth;
    twin.initial_cov = p.has("cov") ? parse_cov(p.raw("cov"), nx, "initial.cov") : GaussianCov::scalar(nx, 1.0);
    p.finish();
}

// --- dotted paths for sweeps ----------------------------------------------------

void set_path(Json& doc, const std::string& path, const Json& value) {
    Json* node = &doc;
    std::stringstream ss(path);
    std::string part;
    std::vector<std::string> parts;
    while (std::getline(ss, part, '.')) parts.push_back(part);
    if (parts.empty()) throw Error(ErrorCode::ConfigInvalid, "empty sweep path");
    for (std::size_t k = 0; k + 1 < parts.size(); ++k) {
        if (!node->is_object()) throw Error(ErrorCode::ConfigInvalid, "sweep path " + path + " does not name an object");
        node = &(*node)[parts[k]];
    }
    (*node)[parts.back()] = value;
}

}  // namespace

// ---------------------------------------------------------------------------

ExperimentConfig parse_config(const Json& doc) {
    Params top(doc, "config");
    ExperimentConfig cfg;
    cfg.raw = doc;
    if (!top.has("model") || !top.has("observation") || !top.has("filter"))
        throw Error(ErrorCode::ConfigInvalid, "config needs model, observation and filter blocks");
    cfg.twin.model = parse_model(top.raw("model"));
    parse_observation(top.raw("observation"), cfg.twin);
    parse_initial(top.has("initial") ? top.raw("initial") : Json::object(), cfg.twin);

    cfg.filter = top.raw("filter");
    if (!cfg.filter.is_object() || !cfg.filter.contains("n") || !cfg.filter["n"].is_number_integer())
        throw Error(ErrorCode::ConfigInvalid, "filter.n must be an integer");
    cfg.members = cfg.filter["n"].get<Index>();
    if (cfg.members < 1) throw Error(ErrorCode::ConfigInvalid, "filter.n must be positive");
    make_filter(cfg.filter);  // validates the filter block

    Params run(top.has("run") ? top.raw("run") : Json::object(), "run");
    cfg.twin.cycles = run.get<int>("cycles", 0);
    if (cfg.twin.cycles < 0) throw Error(ErrorCode::ConfigInvalid, "run.cycles must be non-negative");
    cfg.seed = run.get<std::uint64_t>("seed", 1);
    cfg.seeds = run.get<std::vector<std::uint64_t>>("seeds", {});
    cfg.twin.truth_seed = run.get<std::uint64_t>("truth_seed", 101);
    cfg.twin.obs_seed = run.get<std::uint64_t>("obs_seed", 202);
    cfg.out = run.get<std::string>("out", "out");
    run.finish();
    top.finish();
    return cfg;
}

ExperimentConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::ConfigInvalid, "cannot read " + path);
    Json doc;
    try {
        doc = Json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::ConfigInvalid, std::string("invalid JSON: ") + e.what());
    }
    return parse_config(doc);
}

std::string config_hash(const Json& doc) {
    const std::string s = doc.dump();
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

// ---------------------------------------------------------------------------

RunResult run_experiment(const ExperimentConfig& cfg, int threads) {
    const auto t0 = std::chrono::steady_clock::now();
    RunResult res;
    const auto filter = make_filter(cfg.filter);
    const TwinRun twin = run_truth_and_observations(cfg.twin);
    Ensemble ens = initial_ensemble(cfg.twin, cfg.members, cfg.seed);
    const double inv_n = 1.0 / static_cast<double>(cfg.members);
    for (int c = 1; c <= cfg.twin.cycles; ++c) {
        StepContext ctx{RngFactory{cfg.seed, static_cast<std::uint64_t>(c)}, threads};
        StepDiagnostics diag;
        try {
            const auto& y = twin.observations[static_cast<std::size_t>(c - 1)];
            if (y) ens = filter->cycle(ens, *cfg.twin.model, bundle_for_cycle(cfg.twin, *y), ctx, diag);
            else ens = filter->forecast_only(ens, *cfg.twin.model, ctx, diag);
            ens.check_finite();
        } catch (const std::exception& e) {
            res.aborted = true;
            res.error = "cycle " + std::to_string(c) + ": " + e.what();
            break;
        }
        if (std::isnan(diag.ess)) diag.record_weights(ens.weights);
        const Vector& truth = twin.truth[static_cast<std::size_t>(c)];
        CycleRecord r;
        r.cycle = c;
        r.rmse_a = ensemble_rmse(ens, truth);
        r.rmse_f = diag.forecast_mean.size() == truth.size() ? rmse(diag.forecast_mean, truth)
                                                              : std::numeric_limits<double>::quiet_NaN();
        r.ess = diag.ess;
        r.max_w = diag.max_weight;
        r.spread = spread(ens);
        r.crps = ensemble_crps(ens, truth);
        r.degenerate = diag.degenerate;
        const Vector& w = diag.analysis_weights.size() == cfg.members ? diag.analysis_weights : ens.weights;
        r.weight_var = (w.array() - inv_n).square().mean();
        res.records.push_back(r);
        for (auto& msg : diag.warnings)
            if (std::find(res.warnings.begin(), res.warnings.end(), msg) == res.warnings.end()) res.warnings.push_back(msg);
    }
    RunSummary& s = res.summary;
    s.filter = filter->name();
    s.n = cfg.members;
    s.cycles = static_cast<int>(res.records.size());
    std::vector<double> ra, rf, es, mw, wv;
    for (const auto& r : res.records) {
        ra.push_back(r.rmse_a);
        rf.push_back(r.rmse_f);
        es.push_back(r.ess);
        mw.push_back(r.max_w);
        wv.push_back(r.weight_var);
        s.degen_count += r.degenerate ? 1 : 0;
    }
    s.rmse_a_mean = mean_of(ra);
    s.rmse_f_mean = mean_of(rf);
    s.ess_mean = mean_of(es);
    s.max_w_median = median(mw);
    s.weight_var_mean = mean_of(wv);
    s.wall_s = seconds_since(t0);
    return res;
}

std::string diagnostics_csv_header() { return "cycle,filter,rmse_a,rmse_f,ess,max_w,spread,crps,degen_flag\r\n"; }

std::string diagnostics_csv(const std::string& filter, const std::vector<CycleRecord>& records) {
    std::string out = diagnostics_csv_header();
    for (const auto& r : records) {
        out += std::to_string(r.cycle) + "," + filter + "," + fmt(r.rmse_a) + "," + fmt(r.rmse_f) + "," + fmt(r.ess) + "," +
               fmt(r.max_w) + "," + fmt(r.spread) + "," + fmt(r.crps) + "," + (r.degenerate ? "1" : "0") + "\r\n";
    }
    return out;
}

Json summary_json(const RunSummary& s) {
    return Json{{"filter", s.filter},
                {"n", s.n},
                {"cycles", s.cycles},
                {"rmse_a_mean", num_or_null(s.rmse_a_mean)},
                {"ess_mean", num_or_null(s.ess_mean)},
                {"max_w_median", num_or_null(s.max_w_median)},
                {"degen_count", s.degen_count},
                {"wall_s", s.wall_s}};
}

void write_run_outputs(const ExperimentConfig& cfg, const RunResult& result, const std::string& dir, int threads) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    const fs::path base(dir);
    {
        std::ofstream f(base / "diagnostics.csv", std::ios::binary);
        f << diagnostics_csv(result.summary.filter, result.records);
    }
    {
        std::ofstream f(base / "summary.json");
        f << summary_json(result.summary).dump(2) << "\n";
    }
    Json manifest{{"config_hash", config_hash(cfg.raw)},
                  {"code_version", PFDA_VERSION},
                  {"seeds", {{"filter", cfg.seed}, {"truth", cfg.twin.truth_seed}, {"observation", cfg.twin.obs_seed}}},
                  {"threads", threads},
                  {"wall_s", result.summary.wall_s},
                  {"status", result.aborted ? "aborted" : "ok"},
                  {"outputs", {"diagnostics.csv", "summary.json", "manifest.json"}}};
    if (result.aborted) manifest["error"] = result.error;
    if (!result.warnings.empty()) manifest["warnings"] = result.warnings;
    std::ofstream f(base / "manifest.json");
    f << manifest.dump(2) << "\n";
}

// ---------------------------------------------------------------------------

std::vector<SweepRow> run_sweep(const Json& doc, const Json& grid, int threads) {
    if (!grid.is_object() || grid.empty()) throw Error(ErrorCode::ConfigInvalid, "sweep grid must be a non-empty object");
    std::vector<std::string> keys;
    std::vector<std::vector<Json>> values;
    for (auto it = grid.begin(); it != grid.end(); ++it) {
        if (!it.value().is_array() || it.value().empty())
            throw Error(ErrorCode::ConfigInvalid, "sweep grid entry " + it.key() + " must be a non-empty array");
        keys.push_back(it.key());
        values.emplace_back(it.value().begin(), it.value().end());
    }
    std::vector<SweepRow> rows;
    std::vector<std::size_t> pos(keys.size(), 0);
    Index point = 0;
    while (true) {
        Json d = doc;
        Json vals = Json::object();
        for (std::size_t k = 0; k < keys.size(); ++k) {
            set_path(d, keys[k], values[k][pos[k]]);
            vals[keys[k]] = values[k][pos[k]];
        }
        ExperimentConfig cfg = parse_config(d);
        std::vector<std::uint64_t> seeds = cfg.seeds.empty() ? std::vector<std::uint64_t>{cfg.seed} : cfg.seeds;
        for (std::uint64_t s : seeds) {
            cfg.seed = s;
            RunResult r = run_experiment(cfg, threads);
            rows.push_back(SweepRow{point, vals, s, r.summary, r.aborted});
        }
        ++point;
        std::size_t k = keys.size();
        while (k > 0) {
            --k;
            if (++pos[k] < values[k].size()) break;
            pos[k] = 0;
            if (k == 0) return rows;
        }
        if (keys.empty()) return rows;
    }
}

namespace {

std::string csv_value(const Json& v) { return v.is_string() ? v.get<std::string>() : v.dump(); }

/// (1/N²)(1−ρ)/ρ for the EWPF, empty otherwise.
std::string reference_weight_var(const SweepRow& r, const Json& doc_filter) {
    if (r.summary.filter != "ewpf") return "";
    double rho = 0.8;
    if (r.values.contains("filter.keep_fraction")) rho = r.values["filter.keep_fraction"].get<double>();
    else if (doc_filter.contains("keep_fraction")) rho = doc_filter["keep_fraction"].get<double>();
    const double n = static_cast<double>(r.summary.n);
    return fmt((1.0 - rho) / rho / (n * n));
}

}  // namespace

std::string sweep_csv(const Json& grid, const std::vector<SweepRow>& rows) {
    std::string out = "point";
    for (auto it = grid.begin(); it != grid.end(); ++it) out += "," + it.key();
    out += ",seed,filter,n,cycles,rmse_a_mean,rmse_f_mean,ess_mean,max_w_median,degen_count,weight_var_mean,"
           "reference_weight_var,status\r\n";
    for (const auto& r : rows) {
        out += std::to_string(r.point);
        for (auto it = grid.begin(); it != grid.end(); ++it) out += "," + csv_value(r.values[it.key()]);
        const auto& s = r.summary;
        out += "," + std::to_string(r.seed) + "," + s.filter + "," + std::to_string(s.n) + "," + std::to_string(s.cycles) +
               "," + fmt(s.rmse_a_mean) + "," + fmt(s.rmse_f_mean) + "," + fmt(s.ess_mean) + "," + fmt(s.max_w_median) +
               "," + std::to_string(s.degen_count) + "," + fmt(s.weight_var_mean) + "," +
               reference_weight_var(r, Json::object()) + "," + (r.aborted ? "aborted" : "ok") + "\r\n";
    }
    return out;
}

std::string sweep_aggregate_csv(const Json& grid, const std::vector<SweepRow>& rows) {
    std::string out = "point";
    for (auto it = grid.begin(); it != grid.end(); ++it) out += "," + it.key();
    out += ",seeds,max_w_median,ess_mean,rmse_a_mean,weight_var_mean,reference_weight_var\r\n";
    std::size_t k = 0;
    while (k < rows.size()) {
        std::size_t e = k;
        std::vector<double> mw, es, ra, wv;
        while (e < rows.size() && rows[e].point == rows[k].point) {
            mw.push_back(rows[e].summary.max_w_median);
            es.push_back(rows[e].summary.ess_mean);
            ra.push_back(rows[e].summary.rmse_a_mean);
            wv.push_back(rows[e].summary.weight_var_mean);
            ++e;
        }
        out += std::to_string(rows[k].point);
        for (auto it = grid.begin(); it != grid.end(); ++it) out += "," + csv_value(rows[k].values[it.key()]);
        out += "," + std::to_string(e - k) + "," + fmt(median(mw)) + "," + fmt(mean_of(es)) + "," + fmt(mean_of(ra)) + "," +
               fmt(mean_of(wv)) + "," + reference_weight_var(rows[k], Json::object()) + "\r\n";
        k = e;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Kalman gate

GateSetting gate_setting(const std::string& name) {
    filter_info(name);
    if (name == "bootstrap") return {100000, 30};
    if (name == "nleaf") return {3000, 30};
    if (name == "mapping_pf") return {50, 30};
    if (name == "netf" || name == "etkf") return {400, 30};
    if (name == "lapf" || name == "penny") return {2000, 30};
    return {10000, 30};
}

namespace {

struct GateProblem {
    std::shared_ptr<const TransitionModel> model;
    ObservationBundle obs;
    Vector m0;
    Matrix p0;
};

GateProblem gate_problem(const std::string& name) {
    GateProblem g;
    if (name == "space_time_pf") {
        const Index l = 5;
        g.model = std::make_shared<SpatialChainModel>(l, 0.5, 0.7, 0.8);
        std::vector<Index> idx{0, 1, 2, 3, 4};
        Vector y(l);
        y << 1.0, 0.5, -0.5, 0.8, 0.2;
        g.obs = ObservationBundle(y, GaussianCov::scalar(l, 0.5), ObsOperator::selection(l, idx), idx);
        g.m0 = Vector::Zero(l);
        g.p0 = Matrix::Identity(l, l);
        return g;
    }
    if (name == "guided") g.model = std::make_shared<LinearGaussianModel>(Matrix::Constant(1, 1, 1.0), GaussianCov::scalar(1, 0.125), 4);
    else g.model = std::make_shared<LinearGaussianModel>(Matrix::Constant(1, 1, 0.9), GaussianCov::scalar(1, 0.5), 1);
    g.obs = ObservationBundle(Vector::Constant(1, 1.0), GaussianCov::scalar(1, 0.5), ObsOperator::selection(1, {0}), {0});
    g.m0 = Vector::Zero(1);
    g.p0 = Matrix::Identity(1, 1);
    return g;
}

Ensemble gate_prior(const GateProblem& g, Index n, std::uint64_t seed) {
    GaussianCov p0(g.p0);
    Matrix m(g.m0.size(), n);
    for (Index i = 0; i < n; ++i) {
        RngStream s(seed, 0, static_cast<std::uint64_t>(i), Purpose::Initial);
        m.col(i) = g.m0 + p0.sample(s);
    }
    return Ensemble::uniform(std::move(m));
}

}  // namespace

GateResult kalman_gate(const std::string& name, std::uint64_t seed, Index n_override, int seeds_override) {
    return kalman_gate_block(Json{{"name", name}}, seed, n_override, seeds_override);
}

GateResult kalman_gate_block(const Json& block, std::uint64_t seed, Index n_override, int seeds_override) {
    const auto t0 = std::chrono::steady_clock::now();
    const std::string name = block.at("name").get<std::string>();
    const FilterInfo& info = filter_info(name);
    const GateSetting set = gate_setting(name);
    GateResult r;
    r.filter = name;
    r.n = n_override > 0 ? n_override : set.n;
    r.seeds = seeds_override > 0 ? seeds_override : set.seeds;
    r.asserted = info.gated;
    const GateProblem g = gate_problem(name);
    const KalmanState ks = kalman_step(KalmanState{g.m0, g.p0}, *g.model, g.obs);
    r.kalman_mean = ks.mean;
    r.kalman_var = ks.cov.diagonal();
    const auto filter = make_filter(block);
    const Index d = g.m0.size();
    Matrix est(d, r.seeds);
    Matrix var(d, r.seeds);
    for (int k = 0; k < r.seeds; ++k) {
        const std::uint64_t s = seed * 1000003ull + static_cast<std::uint64_t>(k);
        StepContext ctx{RngFactory{s, 1}, 1};
        StepDiagnostics diag;
        const Ensemble a = filter->cycle(gate_prior(g, r.n, s), *g.model, g.obs, ctx, diag);
        est.col(k) = a.members * a.weights;
        var.col(k) = a.covariance().diagonal();
    }
    r.estimate = est.rowwise().mean();
    const Matrix dev = est.colwise() - r.estimate;
    r.se = (dev.rowwise().squaredNorm() / static_cast<double>(r.seeds - 1) / static_cast<double>(r.seeds)).cwiseSqrt();
    r.max_z = ((r.estimate - r.kalman_mean).cwiseAbs().array() / r.se.array()).maxCoeff();
    r.var_estimate = var.rowwise().mean();
    const Matrix vdev = var.colwise() - r.var_estimate;
    r.var_se = (vdev.rowwise().squaredNorm() / static_cast<double>(r.seeds - 1) / static_cast<double>(r.seeds)).cwiseSqrt();
    r.var_z = ((r.var_estimate - r.kalman_var).cwiseAbs().array() / r.var_se.array()).maxCoeff();
    r.pass = std::isfinite(r.max_z) && r.max_z <= 3.0;
    r.wall_s = seconds_since(t0);
    return r;
}

namespace {

Json vec_json(const Vector& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

Json invariant(const std::string& name, double value, double bound, bool pass) {
    return Json{{"name", name}, {"value", num_or_null(value)}, {"bound", bound}, {"pass", pass}};
}

/// Invariants shared by every filter: finite output and normalized weights.
std::vector<Json> generic_invariants(const std::string& name, std::uint64_t seed) {
    const GateProblem g = gate_problem(name);
    const auto filter = make_filter(Json{{"name", name}});
    StepContext ctx{RngFactory{seed, 1}, 1};
    StepDiagnostics diag;
    const Ensemble a = filter->cycle(gate_prior(g, 200, seed), *g.model, g.obs, ctx, diag);
    const double wsum = std::abs(a.weights.sum() - 1.0);
    return {invariant("analysis_finite", a.members.allFinite() ? 0.0 : 1.0, 0.0, a.members.allFinite()),
            invariant("weight_sum_error", wsum, 1e-12, wsum <= 1e-12)};
}

Ensemble random_ensemble(Index nx, Index n, std::uint64_t seed) {
    Matrix m(nx, n);
    for (Index i = 0; i < n; ++i) {
        RngStream s(seed, 0, static_cast<std::uint64_t>(i), Purpose::Initial);
        m.col(i) = s.normal_vector(nx);
    }
    return Ensemble::uniform(std::move(m));
}

std::vector<Json> specific_invariants(const std::string& name, std::uint64_t seed) {
    std::vector<Json> out;
    if (name == "netf" || name == "etpf") {
        const Ensemble f = random_ensemble(3, 12, seed);
        const Vector y = Vector::Constant(2, 0.5);
        ObservationBundle obs(y, GaussianCov::scalar(2, 0.5), ObsOperator::selection(3, {0, 2}), {0, 2});
        const Vector w = log_weights_to_weights(obs.log_likelihoods(f.members));
        StepDiagnostics diag;
        Matrix a;
        if (name == "netf") {
            a = f.members * netf_transform_matrix(w);
        } else {
            EtpfConfig ec;
            ec.second_order = true;
            a = etpf_transform(f.members, w, ec, diag).members;
            EtpfConfig plain;
            const TransportPlan p = etpf_plan(f.members, w, plain, diag);
            const double me = p.marginal_error(w);
            out.push_back(invariant("transport_marginal_error", me, 1e-8, me <= 1e-8));
            const double mean_err = ((f.members * p.d / 12.0).rowwise().sum() - f.members * w).cwiseAbs().maxCoeff();
            out.push_back(invariant("weighted_mean_error", mean_err, 1e-12, mean_err <= 1e-12));
        }
        const SecondOrderReport r = second_order_report(a, f.members, w);
        out.push_back(invariant("second_order_mean_error", r.mean_error, 1e-10, r.mean_error <= 1e-10));
        out.push_back(invariant("second_order_covariance_error", r.covariance_error, 1e-10, r.covariance_error <= 1e-10));
    } else if (name == "iewpf" || name == "ewpf") {
        const Index nx = 4;
        LinearGaussianModel model(0.9 * Matrix::Identity(nx, nx), GaussianCov::scalar(nx, 0.3), 1);
        ObservationBundle obs(Vector::Constant(2, 0.7), GaussianCov::scalar(2, 0.4), ObsOperator::selection(nx, {0, 2}), {0, 2});
        const Ensemble prev = random_ensemble(nx, 100, seed);
        StepContext ctx{RngFactory{seed, 1}, 1};
        StepDiagnostics diag;
        if (name == "iewpf") {
            IewpfReport rep;
            iewpf_step(prev, model, obs, ctx, diag, &rep);
            const double spread = rep.final_log_weights.maxCoeff() - rep.final_log_weights.minCoeff();
            const double res = rep.residual.cwiseAbs().maxCoeff();
            out.push_back(invariant("final_log_weight_spread", spread, 1e-8, spread < 1e-8));
            out.push_back(invariant("alpha_residual", res, 1e-10, res < 1e-10));
        } else {
            EwpfReport rep;
            EwpfConfig ec;
            ewpf_step(prev, model, obs, ec, ctx, diag, &rep);
            const double need = std::ceil(ec.keep_fraction * 100.0);
            out.push_back(invariant("kept_minus_ceil_n_rho", static_cast<double>(rep.kept) - need, 0.0,
                                    static_cast<double>(rep.kept) == need));
            out.push_back(invariant("kept_not_at_target", static_cast<double>(rep.kept - rep.at_target), 0.0,
                                    rep.kept == rep.at_target));
        }
    } else if (name == "merging") {
        const auto a = merging_coefficients();
        const double s1 = std::abs(a[0] + a[1] + a[2] - 1.0);
        const double s2 = std::abs(a[0] * a[0] + a[1] * a[1] + a[2] * a[2] - 1.0);
        out.push_back(invariant("coefficient_sum_error", s1, 1e-14, s1 <= 1e-14));
        out.push_back(invariant("coefficient_square_sum_error", s2, 1e-14, s2 <= 1e-14));
    }
    return out;
}

}  // namespace

Json oracle_check(const std::string& name, std::uint64_t seed) {
    const FilterInfo& info = filter_info(name);
    Json report{{"filter", name}, {"module", info.module}};
    bool pass = true;
    try {
        const GateResult g = kalman_gate(name, seed);
        report["gate"] = Json{{"asserted", g.asserted}, {"n", g.n},       {"seeds", g.seeds},
                              {"kalman_mean", vec_json(g.kalman_mean)}, {"estimate", vec_json(g.estimate)},
                              {"se", vec_json(g.se)},                   {"max_z", num_or_null(g.max_z)},
                              {"pass", g.pass},                         {"wall_s", g.wall_s}};
        if (g.asserted && !g.pass) pass = false;
    } catch (const std::exception& e) {
        report["gate"] = Json{{"asserted", info.gated}, {"error", e.what()}, {"pass", false}};
        if (info.gated) pass = false;
    }
    Json inv = Json::array();
    try {
        for (auto& j : generic_invariants(name, seed)) inv.push_back(j);
        for (auto& j : specific_invariants(name, seed)) inv.push_back(j);
    } catch (const std::exception& e) {
        inv.push_back(Json{{"name", "invariant_suite"}, {"error", e.what()}, {"pass", false}});
    }
    for (const auto& j : inv) pass = pass && j["pass"].get<bool>();
    report["invariants"] = inv;
    report["pass"] = pass;
    return report;
}

}  // namespace pfda
