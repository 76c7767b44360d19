// Python module _pfda. JSON crosses the boundary as text; the package
// __init__ converts to and from dicts.

#include "pfda/harness.hpp"
#include "pfda/hybrid_filters.hpp"
#include "pfda/oracles_metrics.hpp"
#include "pfda/resampling.hpp"
#include "pfda/transport_filters.hpp"

#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

namespace py = pybind11;
using namespace pfda;

namespace {

std::string run_json(const std::string& config, int threads) {
    const ExperimentConfig cfg = parse_config(Json::parse(config));
    RunResult res;
    {
        py::gil_scoped_release release;
        res = run_experiment(cfg, threads);
    }
    Json records = Json::array();
    for (const auto& r : res.records)
        records.push_back({{"cycle", r.cycle}, {"rmse_a", r.rmse_a}, {"rmse_f", r.rmse_f}, {"ess", r.ess},
                           {"max_w", r.max_w}, {"spread", r.spread}, {"crps", r.crps}, {"degen_flag", r.degenerate}});
    Json out{{"summary", summary_json(res.summary)},
             {"records", records},
             {"aborted", res.aborted},
             {"error", res.error},
             {"warnings", res.warnings},
             {"csv", diagnostics_csv(res.summary.filter, res.records)}};
    return out.dump();
}

std::string gate_json(const std::string& name, std::uint64_t seed, Index n, int seeds) {
    GateResult g;
    {
        py::gil_scoped_release release;
        g = kalman_gate(name, seed, n, seeds);
    }
    auto vec = [](const Vector& v) { return std::vector<double>(v.data(), v.data() + v.size()); };
    return Json{{"filter", g.filter}, {"n", g.n}, {"seeds", g.seeds}, {"kalman_mean", vec(g.kalman_mean)},
                {"estimate", vec(g.estimate)}, {"se", vec(g.se)}, {"max_z", g.max_z}, {"pass", g.pass},
                {"asserted", g.asserted}, {"wall_s", g.wall_s}}
        .dump();
}

}  // namespace

PYBIND11_MODULE(_pfda, m) {
    m.doc() = "Particle filters for data assimilation";
    m.attr("__version__") = PFDA_VERSION;

    py::register_exception<Error>(m, "PfdaError");

    m.def("filter_names", [] {
        std::vector<std::string> names;
        for (const auto& f : filter_registry()) names.push_back(f.name);
        return names;
    });
    m.def("run_json", &run_json, py::arg("config"), py::arg("threads") = 1);
    m.def("kalman_gate_json", &gate_json, py::arg("name"), py::arg("seed") = 1, py::arg("n") = 0,
          py::arg("seeds") = 0);
    m.def("oracle_check_json", [](const std::string& name, std::uint64_t seed) {
        py::gil_scoped_release release;
        return oracle_check(name, seed).dump();
    }, py::arg("name"), py::arg("seed") = 1);
    m.def("config_hash", [](const std::string& config) { return config_hash(Json::parse(config)); });

    m.def("ess", &ess, py::arg("weights"));
    m.def("systematic_resample",
          [](const Vector& w, double u) { return systematic_resample(w, u).indices; }, py::arg("weights"),
          py::arg("u"));
    m.def("merging_coefficients", [] {
        const auto a = merging_coefficients();
        return std::vector<double>(a.begin(), a.end());
    });
    m.def("netf_transform_matrix", [](const Vector& w) { return netf_transform_matrix(w); }, py::arg("weights"));
    m.def("transport_plan", [](const Matrix& members, const Vector& w) { return solve_transport(members, w).d; },
          py::arg("members"), py::arg("weights"),
          "Optimal coupling D (N x N): columns sum to 1, rows to N w_i; members are columns.");
    m.def("kalman_update",
          [](const Vector& mean, const Matrix& cov, const Matrix& h, const Matrix& r, const Vector& y) {
              const KalmanState s = kalman_update(KalmanState{mean, cov}, h, r, y);
              return py::make_tuple(s.mean, s.cov);
          },
          py::arg("mean"), py::arg("cov"), py::arg("h"), py::arg("r"), py::arg("y"));
    m.def("crps", &crps, py::arg("values"), py::arg("weights"), py::arg("truth"));
}
