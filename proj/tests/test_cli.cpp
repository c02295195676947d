#include <gtest/gtest.h>

#include <sys/wait.h>
#include <unistd.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "peertrade/peertrade.hpp"

#ifndef PEERTRADE_CLI
#error "PEERTRADE_CLI must name the peertrade binary"
#endif

using namespace peertrade;
namespace fs = std::filesystem;

namespace {

fs::path scratch()
{
    static const fs::path dir = [] {
        // one directory per process so ctest -j does not race
        auto d = fs::temp_directory_path() / ("peertrade_cli_test_" + std::to_string(getpid()));
        fs::remove_all(d);
        fs::create_directories(d);
        return d;
    }();
    return dir;
}

std::string file(const std::string& name) { return (scratch() / name).string(); }

std::string slurp(const std::string& path)
{
    std::ifstream in(path, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

struct Result
{
    int code;
    std::string out;
    std::string err;
};

Result cli(const std::string& args)
{
    static int n = 0;
    const std::string out = file("stdout" + std::to_string(n)), err = file("stderr" + std::to_string(n));
    ++n;
    const std::string cmd = std::string("\"") + PEERTRADE_CLI + "\" " + args + " >" + out + " 2>" + err;
    const int raw = std::system(cmd.c_str());
    return {WIFEXITED(raw) ? WEXITSTATUS(raw) : -1, slurp(out), slurp(err)};
}

// Three prosumers on a triangle, written once.
const std::string& triangle()
{
    static const std::string path = [] {
        const auto p = file("triangle.json");
        const auto r = cli("gen --prosumers 3 --degree 2 --horizon 24 --seed 7 --out " + p);
        EXPECT_EQ(r.code, 0) << r.err;
        return p;
    }();
    return path;
}

} // namespace

TEST(CliGen, WritesScenarioAndPrintsBounds)
{
    const auto path = file("gen30.json");
    const auto r = cli("gen --prosumers 30 --degree 8 --horizon 24 --seed 7 --out " + path);
    ASSERT_EQ(r.code, 0) << r.err;
    const auto s = load_scenario(path);
    EXPECT_EQ(s.size(), 30u);
    EXPECT_EQ(s.edges().size(), 120u);
    char expect[64];
    std::snprintf(expect, sizeof expect, "%.6g", edge_step_bound(s.lipschitz()));
    EXPECT_NE(r.out.find(std::string("rho < 2/L      ") + expect), std::string::npos) << r.out;
    std::snprintf(expect, sizeof expect, "%.6g", node_step_bound(s.lipschitz(), 2));
    EXPECT_NE(r.out.find(expect), std::string::npos) << r.out;
}

TEST(CliGen, SameFlagsGiveIdenticalFiles)
{
    const auto a = file("same_a.json"), b = file("same_b.json");
    ASSERT_EQ(cli("gen --prosumers 12 --degree 4 --seed 3 --out " + a).code, 0);
    ASSERT_EQ(cli("gen --prosumers 12 --degree 4 --seed 3 --out " + b).code, 0);
    EXPECT_EQ(slurp(a), slurp(b));
    EXPECT_FALSE(slurp(a).empty());
}

TEST(CliGen, UsageErrors)
{
    EXPECT_EQ(cli("gen --degree 40 --prosumers 30 --out " + file("bad.json")).code, 2);
    EXPECT_EQ(cli("gen --prosumers 30").code, 2);
    EXPECT_EQ(cli("gen --prosumers many --out " + file("bad.json")).code, 2);
    EXPECT_EQ(cli("").code, 2);
    EXPECT_EQ(cli("frobnicate").code, 2);
}

TEST(CliRun, StandardWithReferenceConverges)
{
    const auto ref = file("triangle_ref.json"), trace = file("triangle_trace.csv");
    ASSERT_EQ(cli("ref --scenario " + triangle() + " --out " + ref).code, 0);
    const auto r = cli("run --scenario " + triangle() + " --algo standard --rho 0.5 --eps1 1e-5 --eps2 1e-5 --ref " + ref +
                       " --trace-out " + trace);
    ASSERT_EQ(r.code, 0) << r.out << r.err;
    const auto report = import_report(trace);
    ASSERT_FALSE(report.empty());
    EXPECT_LT(report.back().gap, 1e-3);
}

TEST(CliRun, NodeSmartAtSixtyPercent)
{
    const auto path = file("node.json"), trace = file("node_trace.csv");
    ASSERT_EQ(cli("gen --prosumers 6 --degree 3 --seed 2 --out " + path).code, 0);
    const auto s = load_scenario(path);
    std::size_t kbar = 0;
    for (const auto& p : s.prosumers()) {
        const std::size_t b = ActivationBudget{0.6}.resolve(p.num_peers());
        kbar = std::max(kbar, 2 * ((p.num_peers() + b - 1) / b));
    }
    char rho[32];
    std::snprintf(rho, sizeof rho, "%.17g", 0.9 * node_step_bound(s.lipschitz(), kbar));
    const auto r = cli("run --scenario " + path + " --algo node --strategy smart --budget 0.6 --kbar " +
                       std::to_string(kbar) + " --rho " + rho + " --max-rounds 20000 --trace-out " + trace);
    ASSERT_EQ(r.code, 0) << r.out << r.err;
    EXPECT_EQ(r.err.find("warning"), std::string::npos) << r.err;
    EXPECT_GT(import_report(trace).size(), 1u);
}

TEST(CliRun, MaxRoundsGivesExitThreeAndOneRow)
{
    const auto trace = file("one_row.csv");
    const auto r = cli("run --scenario " + triangle() + " --max-rounds 1 --trace-out " + trace);
    EXPECT_EQ(r.code, 3) << r.err;
    EXPECT_EQ(import_report(trace).size(), 1u);
}

TEST(CliRun, LargeStepWarnsAndProceeds)
{
    const auto r = cli("run --scenario " + triangle() + " --rho 100 --max-rounds 3");
    EXPECT_EQ(r.code, 3);
    EXPECT_NE(r.err.find("warning"), std::string::npos) << r.err;
}

TEST(CliRun, BadInputs)
{
    EXPECT_EQ(cli("run --scenario " + file("missing.json")).code, 2);
    EXPECT_EQ(cli("run --scenario " + triangle() + " --algo gossip").code, 2);
    EXPECT_EQ(cli("run --scenario " + triangle() + " --rho -1").code, 2);
}

TEST(CliRun, InfeasibleProsumerIsASolverFailure)
{
    auto doc = nlohmann::json::parse(slurp(triangle()));
    doc["prosumers"][1]["load"]["daily_min"] = 1000.0;
    const auto path = file("infeasible.json");
    std::ofstream(path) << doc.dump();
    EXPECT_EQ(cli("run --scenario " + path + " --max-rounds 5").code, 4);
}

TEST(CliCompare, SingleStrategyTableAndRerunsMatch)
{
    const auto path = file("cmp.json"), a = file("cmp_a.csv"), b = file("cmp_b.csv");
    ASSERT_EQ(cli("gen --prosumers 6 --degree 3 --seed 4 --out " + path).code, 0);
    const std::string args = "compare --scenario " + path + " --strategies smart --seeds 1,2 --rho 0.05 --out ";
    ASSERT_EQ(cli(args + a).code, 0);
    ASSERT_EQ(cli(args + b).code, 0);
    const auto text = slurp(a);
    EXPECT_EQ(text, slurp(b));
    std::istringstream in(text);
    std::string line;
    std::size_t rows = 0;
    std::getline(in, line);
    EXPECT_EQ(line, "strategy,seed,rounds,reached");
    while (std::getline(in, line)) {
        ++rows;
        EXPECT_EQ(line.rfind("smart,", 0), 0u) << line;
    }
    EXPECT_EQ(rows, 2u);
}

TEST(CliReport, PlotIsDeterministic)
{
    const auto trace = file("plot_trace.csv"), a = file("a.svg"), b = file("b.svg");
    ASSERT_EQ(cli("run --scenario " + triangle() + " --trace-out " + trace).code, 0);
    ASSERT_EQ(cli("report --trace " + trace + " --plot-out " + a).code, 0);
    ASSERT_EQ(cli("report --trace " + trace + " --plot-out " + b).code, 0);
    const auto svg = slurp(a);
    EXPECT_EQ(svg.rfind("<svg", 0), 0u);
    EXPECT_EQ(svg, slurp(b));
}

TEST(CliReport, EmptyOrMalformedTrace)
{
    const auto empty = file("empty.csv"), bad = file("bad.csv");
    std::ofstream(empty) << "round,gap,primal_residue,dual_residue,dual_value,links_activated\n";
    std::ofstream(bad) << "round,gap\n1,x\n";
    EXPECT_EQ(cli("report --trace " + empty + " --plot-out " + file("e.svg")).code, 2);
    EXPECT_EQ(cli("report --trace " + bad + " --plot-out " + file("m.svg")).code, 2);
}
