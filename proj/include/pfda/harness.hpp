#pragma once

#include "pfda/core.hpp"
#include "pfda/filter.hpp"
#include "pfda/models.hpp"

#include "json.hpp"

#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace pfda {

using Json = nlohmann::json;

// ---------------------------------------------------------------------------
// Filter registry

struct FilterInfo {
    std::string name;
    std::string module;
    bool gated = false;  // asserted in the linear-Gaussian Kalman gate
    std::string summary;
};

/// Names every filter the library ships, in a fixed order.
const std::vector<FilterInfo>& filter_registry();
const FilterInfo& filter_info(const std::string& name);

/// Builds a filter from its JSON block ({"name": ..., parameters...}).
/// Unknown keys throw ConfigInvalid. "n" is accepted and ignored here.
std::unique_ptr<Filter> make_filter(const Json& block);

// ---------------------------------------------------------------------------
// Experiments

struct ExperimentConfig {
    TwinExperiment twin;
    Json filter;                // filter block
    Index members = 0;
    std::uint64_t seed = 1;
    std::vector<std::uint64_t> seeds;  // sweep replicates; defaults to {seed}
    std::string out = "out";
    Json raw;                   // the parsed document, after overrides
};

/// Validates the document and builds the twin experiment.
ExperimentConfig parse_config(const Json& doc);
ExperimentConfig load_config(const std::string& path);

/// FNV-1a 64 over the compact dump of the document.
std::string config_hash(const Json& doc);

struct CycleRecord {
    int cycle = 0;
    double rmse_a = 0.0;
    double rmse_f = 0.0;
    double ess = 0.0;
    double max_w = 0.0;
    double spread = 0.0;
    double crps = 0.0;
    bool degenerate = false;
    double weight_var = 0.0;  // (1/N) Σ (w_i − 1/N)² before resampling
};

struct RunSummary {
    std::string filter;
    Index n = 0;
    int cycles = 0;            // completed cycles
    double rmse_a_mean = 0.0;
    double rmse_f_mean = 0.0;
    double ess_mean = 0.0;
    double max_w_median = 0.0;
    int degen_count = 0;
    double weight_var_mean = 0.0;
    double wall_s = 0.0;
};

struct RunResult {
    std::vector<CycleRecord> records;
    RunSummary summary;
    bool aborted = false;
    std::string error;
    std::vector<std::string> warnings;
};

RunResult run_experiment(const ExperimentConfig& cfg, int threads = 1);

std::string diagnostics_csv_header();
std::string diagnostics_csv(const std::string& filter, const std::vector<CycleRecord>& records);
Json summary_json(const RunSummary& s);
/// Writes diagnostics.csv, summary.json and manifest.json into dir.
void write_run_outputs(const ExperimentConfig& cfg, const RunResult& result, const std::string& dir, int threads);

/// Grid over dotted config paths, e.g. {"filter.n": [50, 100]}. One summary
/// row per grid point per seed.
struct SweepRow {
    Index point = 0;
    Json values;
    std::uint64_t seed = 0;
    RunSummary summary;
    bool aborted = false;
};

std::vector<SweepRow> run_sweep(const Json& doc, const Json& grid, int threads = 1);
std::string sweep_csv(const Json& grid, const std::vector<SweepRow>& rows);
/// Median over seeds of each row statistic per grid point.
std::string sweep_aggregate_csv(const Json& grid, const std::vector<SweepRow>& rows);

// ---------------------------------------------------------------------------
// Oracle checks

struct GateSetting {
    Index n = 10000;
    int seeds = 30;
};

/// Documented ensemble size and replicate count of a filter's Kalman gate.
GateSetting gate_setting(const std::string& name);

struct GateResult {
    std::string filter;
    Index n = 0;
    int seeds = 0;
    Vector kalman_mean;
    Vector estimate;  // mean over seeds of the analysis mean
    Vector se;        // standard error over seeds
    double max_z = 0.0;
    Vector kalman_var;    // posterior marginal variances
    Vector var_estimate;  // mean over seeds of the weighted ensemble variance
    Vector var_se;
    double var_z = 0.0;   // reported, not part of pass
    bool pass = false;
    bool asserted = false;
    double wall_s = 0.0;
};

/// One analysis cycle from N(0, 1) on the shared 1-D problem (chain model for
/// the space-time PF), repeated over seeds.
GateResult kalman_gate(const std::string& name, std::uint64_t seed = 1, Index n_override = 0, int seeds_override = 0);
/// Same gate for a full filter block, e.g. {"name": "enkpf", "alpha": 0.3}.
GateResult kalman_gate_block(const Json& block, std::uint64_t seed = 1, Index n_override = 0, int seeds_override = 0);

/// Gate plus the filter's own invariant suite, as a machine-readable report.
Json oracle_check(const std::string& name, std::uint64_t seed = 1);

}  // namespace pfda
