#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "fixtures.hpp"

using namespace peertrade;

#ifndef PEERTRADE_GOLDEN_DIR
#error "PEERTRADE_GOLDEN_DIR must point at tests/golden"
#endif

namespace {

std::string read_file(const std::string& path)
{
    std::ifstream in(path, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::string temp_path(const std::string& name)
{
    return (std::filesystem::temp_directory_path() / ("peertrade_test_" + name)).string();
}

bool same_number(double a, double b) { return (std::isnan(a) && std::isnan(b)) || a == b; }

bool same_report(const IndexReport& a, const IndexReport& b)
{
    if (a.size() != b.size()) return false;
    for (std::size_t k = 0; k < a.size(); ++k) {
        const auto &x = a[k], &y = b[k];
        if (x.round != y.round || x.links_activated != y.links_activated || !same_number(x.gap, y.gap) ||
            !same_number(x.primal_residue, y.primal_residue) || !same_number(x.dual_residue, y.dual_residue) ||
            !same_number(x.dual_value, y.dual_value))
            return false;
    }
    return true;
}

// Fixed load, idle storage, one period: only the trade between the two is free.
ProsumerModel rigid(std::size_t id, double load, double pv)
{
    auto p = fixtures::flat_prosumer(id, 1);
    p.load_min.setConstant(load);
    p.load_max.setConstant(load);
    p.daily_load_min = load;
    p.storage.charge_max = 0.0;
    p.storage.discharge_max = 0.0;
    p.pv.setConstant(pv);
    return p;
}

IndexReport hand_report()
{
    return {{1, 2.5, 0.75, 0.125, -1234.5, 3},
            {2, not_available, 1e-300, 0.0, not_available, 0},
            {3, 0.1, 3.0e8, 7.25e-5, 42.0, 12}};
}

} // namespace

// Selling to the grid earns 2 and buying costs 10. With t the seller's export
// the community cost is 16 - 8t + 2 beta t + 2 alpha t^2, minimised at t = 1.5;
// the seller's stationarity 2 + 2 alpha t + beta + lambda = 0 gives lambda = -6.
TEST(Reference, CheapSellerExpensiveBuyerMatchesHandKkt)
{
    const auto s = fixtures::pair(1, rigid(0, 1.0, 3.0), rigid(1, 2.0, 0.0), fixtures::flat_prices(1, 10.0, 2.0));
    const auto ref = reference_solution(s);
    EXPECT_NEAR(ref.decisions[0].trades[0][0], 1.5, 1e-6);
    EXPECT_NEAR(ref.decisions[1].trades[0][0], -1.5, 1e-6);
    EXPECT_NEAR(ref.prices[0][0], -6.0, 1e-5);
    double alone = 0.0;
    for (const auto& p : s.prosumers()) alone += standalone_optimum(p, s.prices());
    EXPECT_NEAR(ref.objective - alone, 11.5 - 16.0, 1e-6);
    EXPECT_LT(ref.primal_residual, 1e-6);

    TradeState st;
    st.prices = ref.prices;
    st.decisions = ref.decisions;
    const auto band = price_band(s, st);
    EXPECT_EQ(band.active, 1u);
    EXPECT_EQ(band.inside, 1u);
    for (const auto& e : individual_rationality(s, st)) EXPECT_TRUE(e.pass) << e.prosumer;
}

TEST(Reference, SymmetricPairDoesNotTrade)
{
    const auto s = fixtures::pair(4, fixtures::flat_prosumer(0, 4), fixtures::flat_prosumer(1, 4),
                                  fixtures::flat_prices(4, 0.5, 0.5));
    const auto ref = reference_solution(s);
    for (const auto& d : ref.decisions) EXPECT_LT(d.trades[0].lpNorm<Eigen::Infinity>(), 1e-6);
    double alone = 0.0;
    for (const auto& p : s.prosumers()) alone += standalone_optimum(p, s.prices());
    EXPECT_NEAR(ref.objective, alone, 1e-6 * std::abs(alone));
}

TEST(Gap, ZeroAtTheReferenceAndLinearInAPerturbation)
{
    const auto s = fixtures::desk(7);
    const auto ref = reference_solution(s);
    std::vector<Vector> x, t;
    for (const auto& d : ref.decisions) {
        x.push_back(d.schedule());
        t.push_back(d.stacked_trades());
    }
    EXPECT_EQ(optimality_gap(x, t, ref), 0.0);
    Vector dir = Vector::LinSpaced(x[1].size(), -1.0, 2.0);
    const double delta = 0.37;
    x[1] += delta * dir / dir.norm();
    EXPECT_NEAR(optimality_gap(x, t, ref), delta / 3.0, 1e-12);
    x.pop_back();
    EXPECT_THROW(optimality_gap(x, t, ref), StructuralError);
}

TEST(Gap, ConvergingRunEndsBelowThreshold)
{
    const auto s = fixtures::desk(7);
    const auto ref = reference_solution(s);
    RunConfig cfg;
    cfg.eps1 = cfg.eps2 = 1e-5;
    cfg.max_rounds = 5000;
    const auto t = run_standard(s, cfg, &ref);
    ASSERT_EQ(t.status, RunStatus::converged);
    EXPECT_LT(t.rounds.back().gap, 1e-3);
    EXPECT_LT(t.rounds.back().gap, t.rounds.front().gap);
    EXPECT_LT(t.rounds.back().primal_residue, cfg.eps1);
    EXPECT_LT(t.rounds.back().dual_residue, cfg.eps2);
}

TEST(Indexes, IdleRoundGivesZero)
{
    const auto s = fixtures::desk(7);
    RunConfig cfg;
    cfg.max_rounds = 4;
    const auto st = run_standard(s, cfg).final_state;
    EXPECT_EQ(transaction_change(st, st), 0.0);
    EXPECT_EQ(price_change(s, st.prices, st.prices), 0.0);
}

TEST(Indexes, SinglePairStepIsCountedFromBothEnds)
{
    const auto s = fixtures::desk(4, 6, 3.0);
    RunConfig cfg;
    cfg.max_rounds = 2;
    const auto before = run_standard(s, cfg).final_state;
    const double rho = 0.3;
    Vector delta = Vector::LinSpaced(24, 0.5, -1.5);
    auto now = before;
    now.prices[2] += rho * delta;
    EXPECT_NEAR(price_change(s, now.prices, before.prices), 2.0 * (rho * delta).norm() / 6.0, 1e-12);
    now = before;
    now.records[3][0] += delta;
    EXPECT_NEAR(transaction_change(now, before), delta.norm() / 6.0, 1e-12);
}

TEST(ReportCsv, ThreeRoundsGiveFourLines)
{
    const auto s = fixtures::desk(7);
    RunConfig cfg;
    cfg.max_rounds = 3;
    cfg.monitor_dual = true;
    const auto report = index_report(run_standard(s, cfg));
    const std::string path = temp_path("report.csv");
    export_report(report, path);
    const std::string first = read_file(path);
    EXPECT_EQ(std::count(first.begin(), first.end(), '\n'), 4);
    export_report(report, path);
    EXPECT_EQ(read_file(path), first);
    EXPECT_TRUE(same_report(import_report(path), report));
    std::filesystem::remove(path);
}

TEST(ReportCsv, GoldenFile)
{
    const std::string golden = read_file(std::string(PEERTRADE_GOLDEN_DIR) + "/report.csv");
    ASSERT_FALSE(golden.empty());
    EXPECT_EQ(format_report(hand_report()), golden);
    std::istringstream in(golden);
    EXPECT_TRUE(same_report(parse_report(in), hand_report()));
}

TEST(ReportCsv, MalformedInputNamesRowAndColumn)
{
    const std::string header = std::string(report_header) + "\n";
    struct Case
    {
        std::string text;
        std::size_t row, column;
    };
    for (const auto& c : {Case{"round,gap\n", 1, 1}, Case{header + "1,1,1,1,1,1\n2,x,1,1,1,1\n", 3, 2},
                          Case{header + "1,1,1,1\n", 2, 5}, Case{header + "-1,1,1,1,1,1\n", 2, 1},
                          Case{header + "1,1,1,1,1,2.5\n", 2, 6}}) {
        std::istringstream in(c.text);
        try {
            parse_report(in);
            FAIL() << c.text;
        } catch (const ParseError& e) {
            EXPECT_EQ(e.row(), c.row) << c.text;
            EXPECT_EQ(e.column(), c.column) << c.text;
        }
    }
}

TEST(DescentMonitor, EdgeModeBelowTheBoundPasses)
{
    const auto s = fixtures::desk(3, 10, 4.0);
    RunConfig cfg;
    cfg.rho = 0.9 * 2.0 / s.lipschitz().total;
    cfg.budget = ActivationBudget{0.375};
    cfg.max_rounds = 50;
    cfg.monitor_dual = true;
    const auto t = run_edge(s, cfg);
    const auto v = descent_monitor(t, s);
    ASSERT_EQ(v.size(), t.rounds.size());
    for (const auto& x : v) EXPECT_TRUE(x.pass) << "round " << x.round << " slack " << x.slack;
}

// Past the bound the monitor is a diagnostic: it must report, not throw.
TEST(DescentMonitor, LargeStepIsReportedConsistently)
{
    const auto s = fixtures::desk(3, 10, 4.0);
    RunConfig cfg;
    cfg.rho = 10.0 / s.lipschitz().total;
    cfg.budget = ActivationBudget{0.5};
    cfg.max_rounds = 40;
    cfg.monitor_dual = true;
    const auto t = run_edge(s, cfg);
    EXPECT_FALSE(t.warnings.empty());
    for (const auto& x : descent_monitor(t, s)) {
        EXPECT_EQ(x.pass, x.slack >= 0.0);
        EXPECT_NEAR(x.slack, x.rhs + 1e-8 * (1.0 + std::abs(x.lhs)) - x.lhs, 1e-9 * (1.0 + std::abs(x.lhs)));
    }
}

TEST(DescentMonitor, NodeModeCumulativeFormPasses)
{
    const auto s = fixtures::desk(3, 10, 4.0);
    RunConfig cfg;
    cfg.budget = ActivationBudget{0.6};
    cfg.strategy = Strategy::random;
    cfg.max_rounds = 80;
    cfg.monitor_dual = true;
    cfg.algorithm = Algorithm::node;
    const auto budgets = resolve_budgets(s, cfg);
    cfg.rho = 0.9 * step_bound(s, Algorithm::node, 2 * minimum_cap(s, Algorithm::node, budgets));
    const auto t = run_node(s, cfg);
    const auto v = descent_monitor(t, s);
    ASSERT_EQ(v.size(), t.rounds.size());
    for (const auto& x : v) EXPECT_TRUE(x.pass) << "round " << x.round;
}

// Without monitoring, D(lambda) of the final round is never computed.
TEST(DescentMonitor, MissingDualValuesAreSkipped)
{
    const auto s = fixtures::desk(7);
    RunConfig cfg;
    cfg.max_rounds = 5;
    const auto t = run_standard(s, cfg);
    EXPECT_TRUE(std::isnan(t.rounds.back().dual_value));
    const auto v = descent_monitor(t, s);
    ASSERT_EQ(v.size(), 4u);
    EXPECT_EQ(v.back().round, 4u);
    auto blind = t;
    blind.initial_dual_value = not_available;
    EXPECT_TRUE(descent_monitor(blind, s).empty());
}

TEST(Staleness, NodeRunsStayWithinTheCap)
{
    const auto s = fixtures::desk(6, 10, 5.0);
    RunConfig cfg;
    cfg.rho = 0.05;
    cfg.max_rounds = 80;
    cfg.budget = ActivationBudget{0.5};
    for (auto strategy : {Strategy::smart, Strategy::random, Strategy::round_robin}) {
        cfg.strategy = strategy;
        const auto t = run_node(s, cfg);
        const auto a = staleness_audit(t, s);
        EXPECT_EQ(a.cap, t.staleness_cap);
        EXPECT_TRUE(a.intervals_ok) << a.longest_interval << " > " << a.cap;
        EXPECT_TRUE(a.lag_ok) << a.worst_lag_margin;
        EXPECT_GE(a.longest_interval, 1u);
    }
}

TEST(Staleness, OverdueLinkIsFlagged)
{
    const auto s = fixtures::desk(6, 10, 5.0);
    RunConfig cfg;
    cfg.rho = 0.05;
    cfg.max_rounds = 12;
    cfg.budget = ActivationBudget{0.5};
    auto t = run_edge(s, cfg);
    const std::size_t victim = t.rounds.front().activated.front();
    for (auto& r : t.rounds) std::erase(r.activated, victim);
    const auto a = staleness_audit(t, s);
    EXPECT_FALSE(a.intervals_ok);
    EXPECT_EQ(a.longest_interval, 12u);
}

TEST(Settlement, ConvergedDeskIsIndividuallyRational)
{
    const auto s = fixtures::desk(9, 6, 3.0);
    RunConfig cfg;
    cfg.rho = 0.3;
    cfg.eps1 = cfg.eps2 = 1e-6;
    cfg.max_rounds = 20000;
    const auto t = run_standard(s, cfg);
    ASSERT_EQ(t.status, RunStatus::converged);
    for (const auto& e : individual_rationality(s, t.final_state))
        EXPECT_TRUE(e.pass) << e.prosumer << ": " << e.settled << " > " << e.standalone;
}

TEST(Plot, DeterministicSvg)
{
    const std::string a = render_svg(hand_report());
    EXPECT_EQ(a, render_svg(hand_report()));
    EXPECT_EQ(a.rfind("<svg", 0), 0u);
    EXPECT_NE(a.find("</svg>"), std::string::npos);
    EXPECT_THROW(render_svg({}), ParseError);
    const std::string path = temp_path("plot.svg");
    write_svg(hand_report(), path);
    EXPECT_EQ(read_file(path), a);
    std::filesystem::remove(path);
}
