// Command-line front end: run / sweep / validate scenario files.
#include <cstdio>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "mzsim/runner.hpp"

namespace {

enum Exit { kOk = 0, kFailure = 1, kConfig = 2, kBudget = 3 };

std::vector<double> parse_values(const std::string &list) {
    std::vector<double> v;
    std::stringstream ss(list);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty()) continue;
        std::size_t used = 0;
        double x = 0;
        try {
            x = std::stod(item, &used);
        } catch (const std::exception &) {
            used = 0;
        }
        if (used != item.size()) throw mzsim::runner::ConfigError("bad sweep value '" + item + "'");
        v.push_back(x);
    }
    if (v.empty()) throw mzsim::runner::ConfigError("--values is empty");
    return v;
}

} // namespace

int main(int argc, char **argv) {
    using namespace mzsim::runner;
    CLI::App app{"Nonlinear Mach-Zehnder interferometer simulator"};
    app.require_subcommand(1);
    unsigned threads = 1;
    double mem_budget = 0;
    std::string out = "out";
    app.add_option("--threads", threads, "worker threads")->check(CLI::PositiveNumber);
    app.add_option("--mem-budget", mem_budget, "memory budget in GiB (overrides the config)")->check(CLI::PositiveNumber);
    app.add_option("--out", out, "output directory");

    std::string config;
    auto *run = app.add_subcommand("run", "evolve a scenario and write <out>/<scenario>.csv + .meta.json");
    run->add_option("config", config, "scenario file")->required();

    auto *sw = app.add_subcommand("sweep", "run a scenario over values of one axis and compare successive runs");
    std::string axis, values;
    unsigned jobs = 1;
    double threshold = 1e-3;
    sw->add_option("config", config, "scenario file")->required();
    sw->add_option("--axis", axis, "cutoff.pump|cutoff.idler|cutoff.signal|cutoff.phonon|nu|phi|alpha|alpha2")->required();
    sw->add_option("--values", values, "comma separated values")->required();
    sw->add_option("--jobs", jobs, "sweep points run concurrently")->check(CLI::PositiveNumber);
    sw->add_option("--threshold", threshold, "relative deviation declared converged")->check(CLI::PositiveNumber);

    auto *val = app.add_subcommand("validate", "check a scenario file without running it");
    val->add_option("config", config, "scenario file")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        const Scenario s = load_scenario(config);
        RunOptions ro;
        ro.threads = threads;
        if (mem_budget > 0) ro.mem_budget_gib = mem_budget;
        if (val->parsed()) {
            const Plan p = make_plan(s);
            std::printf("%s: ok (%s, %s, dim %zu, evolved dim %zu, estimated memory %.3f GiB)\n", config.c_str(),
                        to_string(s.topology).c_str(), p.factorized ? "factorized" : "joint", p.joint.space.total_dim(),
                        p.evolved_dim, static_cast<double>(p.memory_bytes) / (1 << 30));
            return kOk;
        }
        if (run->parsed()) {
            const TimeSeries ts = simulate(s, ro);
            const auto path = write_outputs(ts, out, s.name);
            std::printf("wrote %s (%zu samples, %.1f s)\n", path.string().c_str(), ts.times.size(),
                        ts.meta["wall_seconds"].get<double>());
            return kOk;
        }
        SweepOptions so;
        so.run = ro;
        so.jobs = jobs;
        so.threshold = threshold;
        const auto report = sweep(s, axis, parse_values(values), so, out);
        std::printf("wrote %s/sweep_report.json (converged: %s)\n", out.c_str(), report["converged"].get<bool>() ? "yes" : "no");
        return kOk;
    } catch (const ConfigError &e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return kConfig;
    } catch (const BudgetError &e) {
        std::fprintf(stderr, "memory budget: %s\n", e.what());
        return kBudget;
    } catch (const std::exception &e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kFailure;
    }
}
