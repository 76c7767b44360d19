// Command-line front end: run, sweep, oracle-check, list-filters.

#include "pfda/harness.hpp"

#include "CLI11.hpp"

#include <filesystem>
#include <fstream>
#include <iostream>

namespace {

pfda::Json read_json(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw pfda::Error(pfda::ErrorCode::ConfigInvalid, "cannot read " + path);
    try {
        return pfda::Json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw pfda::Error(pfda::ErrorCode::ConfigInvalid, std::string("invalid JSON in ") + path + ": " + e.what());
    }
}

/// Seed and output overrides from the command line go into the document so
/// the manifest hash reflects them.
pfda::Json with_overrides(pfda::Json doc, const std::optional<std::uint64_t>& seed, const std::string& out) {
    if (!doc.contains("run")) doc["run"] = pfda::Json::object();
    if (seed) doc["run"]["seed"] = *seed;
    if (!out.empty()) doc["run"]["out"] = out;
    return doc;
}

void write_file(const std::filesystem::path& p, const std::string& s) {
    std::ofstream f(p, std::ios::binary);
    f << s;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Particle filter data assimilation experiments"};
    app.require_subcommand(1);

    std::string config;
    std::string out;
    std::optional<std::uint64_t> seed;
    int threads = 1;

    auto* run = app.add_subcommand("run", "Twin experiment from a JSON config");
    run->add_option("--config", config, "Experiment config")->required()->check(CLI::ExistingFile);
    run->add_option("--seed", seed, "Filter seed (overrides run.seed)");
    run->add_option("--out", out, "Output directory (overrides run.out)");
    run->add_option("--threads", threads, "Worker threads")->check(CLI::PositiveNumber);

    std::string grid;
    auto* sweep = app.add_subcommand("sweep", "Parameter sweep; one summary row per grid point and seed");
    sweep->add_option("--config", config, "Base experiment config")->required()->check(CLI::ExistingFile);
    sweep->add_option("--grid", grid, "Grid JSON file or inline object, e.g. {\"filter.n\": [50, 100]}")->required();
    sweep->add_option("--seed", seed, "Filter seed (overrides run.seed)");
    sweep->add_option("--out", out, "Output directory (overrides run.out)");
    sweep->add_option("--threads", threads, "Worker threads")->check(CLI::PositiveNumber);

    std::string filter;
    bool all = false;
    auto* check = app.add_subcommand("oracle-check", "Kalman gate and invariant suite for a filter");
    check->add_option("filter", filter, "Registered filter name");
    check->add_flag("--all", all, "Every registered filter");
    check->add_option("--seed", seed, "Base seed");
    check->add_option("--out", out, "Write the JSON report to this file");

    auto* list = app.add_subcommand("list-filters", "Registered filters");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*list) {
            for (const auto& f : pfda::filter_registry())
                std::cout << f.name << "\t" << f.module << "\t" << (f.gated ? "gated" : "-") << "\t" << f.summary << "\n";
            return 0;
        }
        if (*run) {
            const pfda::Json doc = with_overrides(read_json(config), seed, out);
            const pfda::ExperimentConfig cfg = pfda::parse_config(doc);
            const pfda::RunResult res = pfda::run_experiment(cfg, threads);
            pfda::write_run_outputs(cfg, res, cfg.out, threads);
            std::cout << pfda::summary_json(res.summary).dump() << "\n";
            for (const auto& w : res.warnings) std::cerr << "warning: " << w << "\n";
            if (res.aborted) {
                std::cerr << "FilterAborted: " << res.error << "\n";
                return 2;
            }
            return 0;
        }
        if (*sweep) {
            const pfda::Json doc = with_overrides(read_json(config), seed, out);
            const pfda::ExperimentConfig cfg = pfda::parse_config(doc);
            pfda::Json g;
            if (std::filesystem::exists(grid)) {
                g = read_json(grid);
            } else {
                try {
                    g = pfda::Json::parse(grid);
                } catch (const nlohmann::json::exception& e) {
                    throw pfda::Error(pfda::ErrorCode::ConfigInvalid, std::string("invalid grid: ") + e.what());
                }
            }
            const auto rows = pfda::run_sweep(doc, g, threads);
            std::filesystem::create_directories(cfg.out);
            write_file(std::filesystem::path(cfg.out) / "sweep.csv", pfda::sweep_csv(g, rows));
            write_file(std::filesystem::path(cfg.out) / "sweep_summary.csv", pfda::sweep_aggregate_csv(g, rows));
            std::cout << pfda::sweep_aggregate_csv(g, rows);
            for (const auto& r : rows)
                if (r.aborted) return 2;
            return 0;
        }
        if (*check) {
            if (!all && filter.empty()) throw pfda::Error(pfda::ErrorCode::ConfigInvalid, "name a filter or pass --all");
            pfda::Json report = pfda::Json::array();
            bool pass = true;
            const std::uint64_t s = seed.value_or(1);
            if (all) {
                for (const auto& f : pfda::filter_registry()) {
                    report.push_back(pfda::oracle_check(f.name, s));
                    std::cerr << f.name << ": " << (report.back()["pass"].get<bool>() ? "pass" : "FAIL") << "\n";
                }
            } else {
                report.push_back(pfda::oracle_check(filter, s));
            }
            for (const auto& r : report) pass = pass && r["pass"].get<bool>();
            const pfda::Json doc{{"pass", pass}, {"filters", report}};
            if (!out.empty()) write_file(out, doc.dump(2) + "\n");
            std::cout << doc.dump(2) << "\n";
            return 0;  // failures are report content
        }
    } catch (const pfda::Error& e) {
        std::cerr << e.what() << "\n";
        return e.code() == pfda::ErrorCode::ConfigInvalid ? 1 : 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
