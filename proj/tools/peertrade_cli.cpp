#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "peertrade/peertrade.hpp"

using namespace peertrade;

namespace {

constexpr int exit_ok = 0;
constexpr int exit_usage = 2;
constexpr int exit_max_rounds = 3;
constexpr int exit_solver = 4;

struct GenArgs
{
    GeneratorConfig cfg;
    std::string profile;
    std::string out;
};

struct RefArgs
{
    std::string scenario;
    std::string out;
};

struct RunArgs
{
    std::string scenario;
    std::string algo = "standard";
    double rho = 0.5;
    double budget = 1.0;
    std::string strategy = "smart";
    std::size_t kbar = 0;
    double eps1 = 1e-4;
    double eps2 = 1e-4;
    std::size_t max_rounds = 1000;
    std::uint64_t seed = 1;
    std::string ref;
    std::string trace_out;
    bool monitor_dual = false;
};

struct CompareArgs
{
    RunArgs run;
    std::vector<std::string> strategies{"round-robin", "random", "smart"};
    std::vector<std::uint64_t> seeds{1};
    std::optional<double> gap_target;
    double gap_fraction = 0.1;
    std::string out;
};

struct ReportArgs
{
    std::string trace;
    std::string plot_out;
};

void print_bounds(const Scenario& s)
{
    const auto& lc = s.lipschitz();
    std::size_t min_degree = s.size() == 0 ? 0 : s.prosumer(0).num_peers();
    for (const auto& p : s.prosumers()) min_degree = std::min(min_degree, p.num_peers());
    std::printf("prosumers      %zu\n", s.size());
    std::printf("edges          %zu\n", s.edges().size());
    std::printf("horizon        %zu\n", s.horizon());
    std::printf("degree         min %zu max %zu\n", min_degree, s.max_degree());
    std::printf("L              %.6g\n", lc.total);
    std::printf("L_bar          %.6g\n", lc.max);
    std::printf("rho < 2/L      %.6g  (standard, edge)\n", edge_step_bound(lc));
    for (std::size_t k : {1, 2, 4, 8})
        std::printf("rho < node(%zu)  %.6g  (node, kbar = %zu)\n", k, node_step_bound(lc, k), k);
}

int do_gen(const GenArgs& a)
{
    GeneratorConfig cfg = a.cfg;
    if (!a.profile.empty()) cfg.profile = load_profiles(a.profile, cfg.horizon);
    const Scenario s = generate(cfg);
    save_scenario(s, a.out);
    std::printf("wrote %s\n", a.out.c_str());
    print_bounds(s);
    return exit_ok;
}

int do_ref(const RefArgs& a)
{
    const Scenario s = load_scenario(a.scenario);
    const auto ref = reference_solution(s);
    save_reference(ref, a.out);
    std::printf("objective      %.10g\n", ref.objective);
    std::printf("residuals      primal %.3e dual %.3e complementarity %.3e\n", ref.primal_residual,
                ref.dual_residual, ref.complementarity_residual);
    std::printf("iterations     %d\n", ref.iterations);
    std::printf("wrote %s\n", a.out.c_str());
    return exit_ok;
}

RunConfig run_config(const RunArgs& a)
{
    RunConfig cfg;
    cfg.algorithm = parse_algorithm(a.algo);
    cfg.rho = a.rho;
    cfg.budget.value = a.budget;
    cfg.strategy = parse_strategy(a.strategy);
    cfg.staleness_cap = a.kbar;
    cfg.eps1 = a.eps1;
    cfg.eps2 = a.eps2;
    cfg.max_rounds = a.max_rounds;
    cfg.seed = a.seed;
    cfg.monitor_dual = a.monitor_dual;
    return cfg;
}

int exit_for(RunStatus s)
{
    switch (s) {
    case RunStatus::converged:
    case RunStatus::gap_reached: return exit_ok;
    case RunStatus::max_rounds: return exit_max_rounds;
    case RunStatus::solver_failure: return exit_solver;
    }
    return exit_solver;
}

int do_run(const RunArgs& a)
{
    const Scenario s = load_scenario(a.scenario);
    std::optional<ReferenceSolution> ref;
    if (!a.ref.empty()) ref = load_reference(a.ref, s);
    const RunConfig cfg = run_config(a);
    const RunTrace trace = run_negotiation(s, cfg, ref ? &*ref : nullptr);
    for (const auto& w : trace.warnings) std::fprintf(stderr, "warning: %s\n", w.c_str());
    if (!a.trace_out.empty()) export_report(index_report(trace), a.trace_out);

    std::printf("algorithm      %s\n", to_string(trace.algorithm));
    if (trace.algorithm != Algorithm::standard) {
        std::printf("strategy       %s\n", to_string(trace.strategy));
        std::printf("kbar           %zu\n", trace.staleness_cap);
    }
    std::printf("rho            %.6g (bound %.6g)\n", trace.rho, trace.step_bound);
    std::printf("status         %s\n", to_string(trace.status));
    std::printf("rounds         %zu\n", trace.rounds.size());
    if (!trace.rounds.empty()) {
        const auto& last = trace.rounds.back();
        std::printf("primal residue %.3e\n", last.primal_residue);
        std::printf("dual residue   %.3e\n", last.dual_residue);
        if (ref) std::printf("gap            %.3e\n", last.gap);
    }
    if (a.monitor_dual) {
        const auto verdicts = descent_monitor(trace, s);
        const auto failed = std::count_if(verdicts.begin(), verdicts.end(), [](const auto& v) { return !v.pass; });
        std::printf("descent check  %zu of %zu rounds pass\n", verdicts.size() - static_cast<std::size_t>(failed),
                    verdicts.size());
    }
    if (trace.status == RunStatus::solver_failure) std::fprintf(stderr, "error: %s\n", trace.failure.c_str());
    return exit_for(trace.status);
}

int do_compare(const CompareArgs& a)
{
    const Scenario s = load_scenario(a.run.scenario);
    const ReferenceSolution ref = a.run.ref.empty() ? reference_solution(s) : load_reference(a.run.ref, s);
    std::vector<Strategy> strategies;
    for (const auto& name : a.strategies) strategies.push_back(parse_strategy(name));

    struct Entry
    {
        Strategy strategy;
        std::uint64_t seed;
        std::size_t rounds;
        bool reached;
    };
    std::vector<Entry> table;
    for (std::uint64_t seed : a.seeds) {
        for (Strategy st : strategies) {
            RunConfig cfg = run_config(a.run);
            cfg.strategy = st;
            cfg.seed = seed;
            double target = 0.0;
            if (a.gap_target) {
                target = *a.gap_target;
            } else {
                // The target is relative to the gap after the first round,
                // which no selection rule can influence.
                RunConfig probe = cfg;
                probe.max_rounds = 1;
                const auto first = run_negotiation(s, probe, &ref);
                if (first.status == RunStatus::solver_failure) throw SolverError(first.failure);
                target = a.gap_fraction * first.rounds.front().gap;
            }
            cfg.stop_gap = target;
            const auto trace = run_negotiation(s, cfg, &ref);
            if (trace.status == RunStatus::solver_failure) throw SolverError(trace.failure);
            const bool reached = !trace.rounds.empty() && trace.rounds.back().gap <= target;
            table.push_back({st, seed, reached ? trace.rounds.size() : cfg.max_rounds, reached});
        }
    }

    std::ostringstream csv;
    csv << "strategy,seed,rounds,reached\n";
    std::printf("%-12s %8s %8s %s\n", "strategy", "seed", "rounds", "reached");
    for (const auto& e : table) {
        csv << to_string(e.strategy) << ',' << e.seed << ',' << e.rounds << ',' << (e.reached ? 1 : 0) << '\n';
        std::printf("%-12s %8llu %8zu %s\n", to_string(e.strategy), static_cast<unsigned long long>(e.seed), e.rounds,
                    e.reached ? "yes" : "max-rounds");
    }
    std::printf("\n%-12s %14s\n", "strategy", "median rounds");
    for (Strategy st : strategies) {
        std::vector<double> r;
        for (const auto& e : table)
            if (e.strategy == st) r.push_back(static_cast<double>(e.rounds));
        std::sort(r.begin(), r.end());
        const double med = r.size() % 2 ? r[r.size() / 2] : 0.5 * (r[r.size() / 2 - 1] + r[r.size() / 2]);
        std::printf("%-12s %14.1f\n", to_string(st), med);
    }
    if (!a.out.empty()) {
        std::ofstream f(a.out, std::ios::binary);
        if (!f) throw Error("cannot open " + a.out + " for writing");
        f << csv.str();
    }
    return exit_ok;
}

int do_report(const ReportArgs& a)
{
    const IndexReport report = import_report(a.trace);
    if (report.empty()) throw ParseError("trace " + a.trace + " has no rounds");
    write_svg(report, a.plot_out);
    const auto& last = report.back();
    std::printf("rounds         %zu\n", report.size());
    std::printf("final gap      %s\n", std::isnan(last.gap) ? "n/a" : std::to_string(last.gap).c_str());
    std::printf("wrote %s\n", a.plot_out.c_str());
    return exit_ok;
}

void add_run_flags(CLI::App* cmd, RunArgs& r)
{
    cmd->add_option("--scenario", r.scenario, "scenario file")->required();
    cmd->add_option("--algo", r.algo, "standard, edge or node")->capture_default_str();
    cmd->add_option("--rho", r.rho, "price step size")->capture_default_str();
    cmd->add_option("--budget", r.budget, "links per round: a fraction <= 1 or a count")->capture_default_str();
    cmd->add_option("--strategy", r.strategy, "round-robin, random or smart")->capture_default_str();
    cmd->add_option("--kbar", r.kbar, "staleness cap in rounds, 0 for twice the minimum")->capture_default_str();
    cmd->add_option("--eps1", r.eps1, "proposal change threshold")->capture_default_str();
    cmd->add_option("--eps2", r.eps2, "price change threshold")->capture_default_str();
    cmd->add_option("--max-rounds", r.max_rounds, "round limit")->capture_default_str();
    cmd->add_option("--seed", r.seed, "seed of the random strategy")->capture_default_str();
    cmd->add_option("--ref", r.ref, "reference file from `ref`");
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"peer-to-peer trading negotiation simulator"};
    app.require_subcommand(1);

    GenArgs gen;
    auto* g = app.add_subcommand("gen", "generate a synthetic community");
    g->add_option("--prosumers", gen.cfg.prosumers, "number of prosumers")->capture_default_str();
    g->add_option("--degree", gen.cfg.mean_degree, "mean number of peers")->capture_default_str();
    g->add_option("--horizon", gen.cfg.horizon, "periods per day")->capture_default_str();
    g->add_option("--seed", gen.cfg.seed, "generator seed")->capture_default_str();
    g->add_option("--profile", gen.profile, "profile table replacing the synthetic shapes");
    g->add_option("--out", gen.out, "scenario file to write")->required();

    RefArgs refa;
    auto* r = app.add_subcommand("ref", "solve the centralized problem");
    r->add_option("--scenario", refa.scenario, "scenario file")->required();
    r->add_option("--out", refa.out, "reference file to write")->required();

    RunArgs runa;
    auto* run = app.add_subcommand("run", "run one negotiation");
    add_run_flags(run, runa);
    run->add_option("--trace-out", runa.trace_out, "per-round CSV");
    run->add_flag("--monitor-dual", runa.monitor_dual, "evaluate D(lambda) every round and check the descent bound");

    CompareArgs cmp;
    cmp.run.algo = "node";
    cmp.run.budget = 0.6;
    cmp.run.max_rounds = 5000;
    auto* c = app.add_subcommand("compare", "rounds to a gap target for several strategies and seeds");
    add_run_flags(c, cmp.run);
    c->add_option("--strategies", cmp.strategies, "comma separated")->delimiter(',')->capture_default_str();
    c->add_option("--seeds", cmp.seeds, "comma separated")->delimiter(',')->capture_default_str();
    c->add_option("--gap-target", cmp.gap_target, "absolute gap target");
    c->add_option("--gap-fraction", cmp.gap_fraction, "target as a fraction of the first-round gap")
        ->capture_default_str();
    c->add_option("--out", cmp.out, "table as CSV");

    ReportArgs rep;
    auto* rp = app.add_subcommand("report", "plot a trace");
    rp->add_option("--trace", rep.trace, "trace CSV from `run`")->required();
    rp->add_option("--plot-out", rep.plot_out, "SVG file to write")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return exit_usage;
    }

    try {
        if (*g) return do_gen(gen);
        if (*r) return do_ref(refa);
        if (*run) return do_run(runa);
        if (*c) return do_compare(cmp);
        if (*rp) return do_report(rep);
    } catch (const SolverError& e) {
        std::fprintf(stderr, "solver failure: %s\n", e.what());
        return exit_solver;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return exit_usage;
    }
    return exit_usage;
}
