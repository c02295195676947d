#include <gtest/gtest.h>

#include <cstdlib>
#include <set>

#include "fixtures.hpp"

using namespace peertrade;

namespace {

// Largest |t_ij + t_ji| over pairs and periods.
double imbalance(const Scenario& s, const TradeState& st)
{
    double m = 0.0;
    for (std::size_t i = 0; i < s.size(); ++i)
        for (std::size_t slot = 0; slot < s.links(i).size(); ++slot) {
            const auto& l = s.links(i)[slot];
            m = std::max(m, (st.decisions[i].trades[slot] + st.decisions[l.peer].trades[l.reverse_slot])
                                .lpNorm<Eigen::Infinity>());
        }
    return m;
}

std::vector<std::uint64_t> digests(const RunTrace& t)
{
    std::vector<std::uint64_t> d;
    for (const auto& r : t.rounds) d.push_back(r.price_digest);
    return d;
}

// Identical prosumers; grid energy at 0.5 is worth less than the unit fee, so
// no trade pays off at zero prices.
Scenario identical_pair()
{
    return fixtures::pair(4, fixtures::flat_prosumer(0, 4), fixtures::flat_prosumer(1, 4),
                          fixtures::flat_prices(4, 0.5, 0.5));
}

} // namespace

TEST(Standard, IdenticalPairStaysAtZeroTrade)
{
    const auto s = identical_pair();
    RunConfig cfg;
    cfg.eps1 = cfg.eps2 = 1e-6;
    const auto t = run_standard(s, cfg);
    EXPECT_EQ(t.status, RunStatus::converged);
    ASSERT_FALSE(t.rounds.empty());
    // round 1 already proposes t = 0; round 2 confirms nothing moved
    EXPECT_LE(t.rounds.size(), 2u);
    EXPECT_LT(t.rounds.front().max_price_change, 1e-6);
    for (const auto& d : t.final_state.decisions) EXPECT_LT(d.trades[0].lpNorm<Eigen::Infinity>(), 1e-6);
    EXPECT_LT(t.final_state.prices[0].lpNorm<Eigen::Infinity>(), 1e-6);
}

TEST(Standard, DeskMatchesCentralizedOptimum)
{
    const auto s = fixtures::desk(7);
    const auto ref = reference_solution(s);
    for (double eps : {1e-5, 1e-6}) {
        RunConfig cfg;
        cfg.rho = 0.5;
        cfg.eps1 = cfg.eps2 = eps;
        cfg.max_rounds = 20000;
        const auto t = run_standard(s, cfg, &ref);
        ASSERT_EQ(t.status, RunStatus::converged) << eps;
        const double tol = eps > 5e-6 ? 1e-3 : 1e-4;
        double worst_t = 0.0, worst_l = 0.0;
        for (std::size_t i = 0; i < s.size(); ++i) {
            worst_t = std::max(worst_t, (t.final_state.decisions[i].schedule() - ref.decisions[i].schedule())
                                            .lpNorm<Eigen::Infinity>());
            for (std::size_t slot = 0; slot < s.links(i).size(); ++slot) {
                const Vector& got = t.final_state.decisions[i].trades[slot];
                const Vector& want = ref.decisions[i].trades[slot];
                worst_t = std::max(worst_t, (got - want).lpNorm<Eigen::Infinity>());
                // prices are unique only where the trade leaves the fee kink
                const auto e = s.links(i)[slot].edge;
                for (Eigen::Index k = 0; k < want.size(); ++k)
                    if (std::abs(want[k]) > 1e-2)
                        worst_l = std::max(worst_l, std::abs(t.final_state.prices[e][k] - ref.prices[e][k]));
            }
        }
        EXPECT_LT(worst_t, tol) << eps;
        EXPECT_LT(worst_l, tol) << eps;
        EXPECT_LT(t.rounds.back().gap, tol) << eps;
        EXPECT_LE(imbalance(s, t.final_state), 10.0 * eps / cfg.rho);
    }
}

TEST(Standard, HalfStepConvergesOnSmallGeneratedCommunities)
{
    for (std::uint64_t seed : {1u, 2u, 3u}) {
        const auto s = fixtures::desk(seed, 6, 3.0);
        RunConfig cfg;
        cfg.rho = 0.5;
        cfg.eps1 = cfg.eps2 = 1e-5;
        cfg.max_rounds = 20000;
        const auto t = run_standard(s, cfg);
        EXPECT_EQ(t.status, RunStatus::converged) << seed;
        EXPECT_TRUE(t.warnings.empty());
        EXPECT_LE(imbalance(s, t.final_state), 10.0 * cfg.eps2 / cfg.rho);
    }
}

TEST(Degeneration, FullBudgetMatchesStandardBitwise)
{
    const auto s = fixtures::desk(5, 8, 4.0);
    RunConfig cfg;
    cfg.rho = 0.4;
    cfg.eps1 = cfg.eps2 = 1e-5;
    cfg.max_rounds = 400;
    const auto st = run_standard(s, cfg);
    for (auto strategy : {Strategy::smart, Strategy::random, Strategy::round_robin}) {
        cfg.strategy = strategy;
        const auto e = run_edge(s, cfg);
        const auto n = run_node(s, cfg);
        EXPECT_EQ(digests(e), digests(st));
        EXPECT_EQ(digests(n), digests(st));
        EXPECT_EQ(e.rounds.size(), st.rounds.size());
        EXPECT_EQ(n.status, st.status);
    }
}

TEST(Degeneration, ThreadCountDoesNotChangeTheTrace)
{
    const auto s = fixtures::desk(5, 8, 4.0);
    RunConfig cfg;
    cfg.rho = 0.4;
    cfg.max_rounds = 30;
    cfg.budget = ActivationBudget{0.5};
    ::setenv("PEERTRADE_THREADS", "1", 1);
    const auto one = run_node(s, cfg);
    ::setenv("PEERTRADE_THREADS", "3", 1);
    const auto three = run_node(s, cfg);
    ::unsetenv("PEERTRADE_THREADS");
    EXPECT_EQ(digests(one), digests(three));
}

TEST(EdgeMode, UnselectedEdgesKeepTheirPrice)
{
    const auto s = fixtures::desk(4, 10, 4.0);
    RunConfig cfg;
    cfg.rho = 0.2;
    cfg.max_rounds = 40;
    cfg.budget = ActivationBudget{0.375};
    cfg.record_prices = true;
    for (auto strategy : {Strategy::smart, Strategy::random, Strategy::round_robin}) {
        cfg.strategy = strategy;
        const auto t = run_edge(s, cfg);
        ASSERT_EQ(t.price_history.size(), t.rounds.size());
        EXPECT_EQ(t.stop_window, t.staleness_cap);
        for (std::size_t k = 0; k < t.rounds.size(); ++k) {
            EXPECT_EQ(t.rounds[k].activated.size(), t.budgets[0]);
            const std::set<std::size_t> on(t.rounds[k].activated.begin(), t.rounds[k].activated.end());
            for (std::size_t e = 0; e < s.edges().size(); ++e) {
                const Vector before = k == 0 ? Vector::Zero(24) : t.price_history[k - 1][e];
                if (!on.count(e)) EXPECT_TRUE(t.price_history[k][e] == before) << "round " << k + 1 << " edge " << e;
            }
        }
    }
}

// Per-round descent bound evaluated directly from the logged dual values.
TEST(EdgeMode, DualDescendsEveryRound)
{
    const auto s = fixtures::desk(3, 10, 4.0);
    const double L = s.lipschitz().total;
    for (double frac : {0.375, 0.5}) {
        RunConfig cfg;
        cfg.rho = 0.9 * 2.0 / L;
        cfg.budget = ActivationBudget{frac};
        cfg.max_rounds = 60;
        cfg.monitor_dual = true;
        const auto t = run_edge(s, cfg);
        ASSERT_FALSE(t.rounds.empty());
        double prev = t.initial_dual_value;
        for (const auto& r : t.rounds) {
            ASSERT_TRUE(std::isfinite(r.dual_value));
            const double rhs = -prev - (1.0 / cfg.rho - L / 2.0) * r.price_step_sq + 1e-8 * (1.0 + std::abs(r.dual_value));
            EXPECT_LE(-r.dual_value, rhs) << "round " << r.round;
            prev = r.dual_value;
        }
    }
}

TEST(NodeMode, CumulativeBoundHoldsAndRunConverges)
{
    const auto s = fixtures::desk(3, 10, 4.0);
    const auto ref = reference_solution(s);
    const auto& lc = s.lipschitz();
    RunConfig cfg;
    cfg.budget = ActivationBudget{0.6};
    cfg.eps1 = cfg.eps2 = 1e-5;
    cfg.max_rounds = 20000;
    cfg.monitor_dual = true;
    const auto budgets = resolve_budgets(s, [&] { auto c = cfg; c.algorithm = Algorithm::node; return c; }());
    std::size_t kbar = 1;
    for (std::size_t i = 0; i < s.size(); ++i) {
        const std::size_t deg = s.prosumer(i).num_peers();
        kbar = std::max(kbar, 2 * ((deg + budgets[i] - 1) / budgets[i]));
    }
    const double bound = 1.0 / (lc.total / 2.0 + 2.0 * static_cast<double>(kbar) * lc.max);
    cfg.rho = 0.9 * bound;
    for (auto strategy : {Strategy::smart, Strategy::random, Strategy::round_robin}) {
        cfg.strategy = strategy;
        const auto t = run_node(s, cfg, &ref);
        EXPECT_EQ(t.staleness_cap, kbar);
        EXPECT_NEAR(t.step_bound, bound, 1e-15);
        EXPECT_TRUE(t.warnings.empty());
        ASSERT_EQ(t.status, RunStatus::converged) << to_string(strategy);
        EXPECT_LT(t.rounds.back().gap, 1e-3);
        const double c = 1.0 / cfg.rho - lc.total / 2.0 - 2.0 * static_cast<double>(kbar) * lc.max;
        double sum = 0.0;
        for (const auto& r : t.rounds) {
            sum += r.price_step_sq;
            EXPECT_LE(-r.dual_value, -t.initial_dual_value - c * sum + 1e-8 * (1.0 + std::abs(r.dual_value)))
                << to_string(strategy) << " round " << r.round;
        }
    }
}

// Every directed push in the trace belongs to its sender's budget.
TEST(NodeMode, PushesRespectPerProsumerBudgets)
{
    const auto s = fixtures::desk(6, 10, 5.0);
    RunConfig cfg;
    cfg.rho = 0.05;
    cfg.max_rounds = 25;
    cfg.budget = ActivationBudget{0.6};
    const auto t = run_node(s, cfg);
    for (const auto& r : t.rounds) {
        std::vector<std::size_t> per(s.size(), 0);
        for (std::size_t link : r.activated) {
            std::size_t i = 0;
            while (i + 1 < s.size() && s.directed_link(i + 1, 0) <= link) ++i;
            ++per[i];
        }
        for (std::size_t i = 0; i < s.size(); ++i) EXPECT_EQ(per[i], t.budgets[i]);
    }
}

// Independent replay of the node protocol in which each endpoint keeps its own
// copy of lambda, updated only from pushes it sent or received.
TEST(NodeMode, BothEndpointsReconstructTheSamePrices)
{
    const auto s = fixtures::desk(2, 7, 4.0);
    RunConfig cfg;
    cfg.rho = 0.05;
    cfg.max_rounds = 30;
    cfg.budget = ActivationBudget{0.5};
    cfg.strategy = Strategy::round_robin;
    cfg.record_prices = true;
    const auto trace = run_node(s, cfg);
    ASSERT_EQ(trace.rounds.size(), 30u);

    const std::size_t I = s.size();
    const auto T = static_cast<Eigen::Index>(s.horizon());
    std::vector<std::vector<Vector>> lam(I), rec(I); // lam[i][slot]: i's copy
    std::vector<std::unique_ptr<LocalSolver>> solvers;
    std::vector<std::optional<QpWarmStart>> warm(I);
    for (std::size_t i = 0; i < I; ++i) {
        lam[i].assign(s.links(i).size(), Vector::Zero(T));
        rec[i].assign(s.links(i).size(), Vector::Zero(T));
        solvers.push_back(std::make_unique<LocalSolver>(s.prosumer(i), s.prices(), cfg.qp));
    }
    for (std::size_t k = 1; k <= 30; ++k) {
        std::vector<BestResponse> br(I);
        for (std::size_t i = 0; i < I; ++i) br[i] = solvers[i]->solve(lam[i], warm[i] ? &*warm[i] : nullptr);
        std::vector<std::vector<char>> pushed(I);
        for (std::size_t i = 0; i < I; ++i) {
            warm[i] = br[i].warm;
            const std::size_t deg = s.links(i).size();
            const std::size_t b = trace.budgets[i];
            pushed[i].assign(deg, 0);
            const auto pick = b == deg ? [&] { std::vector<std::size_t> a(deg); std::iota(a.begin(), a.end(), 0u); return a; }()
                                       : select_round_robin(deg, b, k);
            for (std::size_t slot : pick) {
                pushed[i][slot] = 1;
                rec[i][slot] = br[i].decision.trades[slot];
            }
        }
        for (std::size_t i = 0; i < I; ++i)
            for (std::size_t slot = 0; slot < s.links(i).size(); ++slot) {
                const auto& l = s.links(i)[slot];
                if (pushed[i][slot] || pushed[l.peer][l.reverse_slot])
                    lam[i][slot] += cfg.rho * (rec[i][slot] + rec[l.peer][l.reverse_slot]);
            }
        for (std::size_t i = 0; i < I; ++i)
            for (std::size_t slot = 0; slot < s.links(i).size(); ++slot) {
                const auto& l = s.links(i)[slot];
                ASSERT_TRUE(lam[i][slot] == lam[l.peer][l.reverse_slot]) << "round " << k;
                EXPECT_LT((lam[i][slot] - trace.price_history[k - 1][l.edge]).lpNorm<Eigen::Infinity>(), 1e-12)
                    << "round " << k;
            }
    }
}

TEST(NodeMode, RecordLagStaysWithinRecentProposalSteps)
{
    const auto s = fixtures::desk(6, 10, 5.0);
    RunConfig cfg;
    cfg.rho = 0.05;
    cfg.max_rounds = 60;
    cfg.budget = ActivationBudget{0.5};
    for (auto strategy : {Strategy::smart, Strategy::random, Strategy::round_robin}) {
        cfg.strategy = strategy;
        const auto t = run_node(s, cfg);
        const std::size_t kbar = t.staleness_cap;
        for (std::size_t k = 0; k < t.rounds.size(); ++k)
            for (std::size_t i = 0; i < s.size(); ++i) {
                double budget = 0.0;
                for (std::size_t back = 0; back < kbar && back <= k; ++back) budget += t.rounds[k - back].proposal_step[i];
                EXPECT_LE(t.rounds[k].record_lag[i], budget + 1e-9);
            }
    }
}

TEST(StoppingRule, AllZeroDeltasStop)
{
    EXPECT_TRUE(check_stopping({0.0, 0.0}, {0.0, 0.0}, 1e-4, 1e-4, 1));
    EXPECT_TRUE(check_stopping({0.0, 0.0}, {0.0, 0.0}, 1e-4, 1e-4, 2));
}

TEST(StoppingRule, BoundaryIsStrict)
{
    EXPECT_FALSE(check_stopping({0.0}, {1e-4}, 1e-4, 1e-4, 1));
    EXPECT_FALSE(check_stopping({1e-4}, {0.0}, 1e-4, 1e-4, 1));
    EXPECT_TRUE(check_stopping({0.99e-4}, {0.99e-4}, 1e-4, 1e-4, 1));
}

// An idle round with tiny residues must not end a run whose window still
// contains a large change.
TEST(StoppingRule, IdleRoundDoesNotMaskTheWindow)
{
    const std::vector<double> x = {0.5, 0.3, 1e-9};
    const std::vector<double> l = {0.2, 0.4, 0.0};
    EXPECT_TRUE(check_stopping(x, l, 1e-4, 1e-4, 1));
    EXPECT_FALSE(check_stopping(x, l, 1e-4, 1e-4, 2));
    EXPECT_FALSE(check_stopping(x, l, 1e-4, 1e-4, 3));
    EXPECT_FALSE(check_stopping({1e-9}, {0.0}, 1e-4, 1e-4, 2)); // history shorter than the window
    EXPECT_THROW(check_stopping(x, l, 1e-4, 1e-4, 0), ConfigError);
}

TEST(DualFunctionTotal, ZeroPricesGiveTheSumOfLocalOptima)
{
    const auto s = fixtures::desk(7, 5, 2.0);
    const std::vector<Vector> zero(s.edges().size(), Vector::Zero(24));
    double sum = 0.0;
    for (const auto& p : s.prosumers()) sum += solve_local(p, s.prices(), zero_prices(p)).objective;
    EXPECT_NEAR(dual_function(s, zero), sum, 1e-9 * std::abs(sum));
    EXPECT_THROW(dual_function(s, {}), StructuralError);
}

TEST(DualFunctionTotal, ConcaveAtMidpoints)
{
    const auto s = fixtures::desk(7, 5, 2.0);
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> u(-6.0, 6.0);
    for (int k = 0; k < 10; ++k) {
        std::vector<Vector> a(s.edges().size(), Vector(24)), b = a, m = a;
        for (std::size_t e = 0; e < a.size(); ++e)
            for (Eigen::Index t = 0; t < 24; ++t) {
                a[e][t] = u(rng);
                b[e][t] = u(rng);
                m[e][t] = 0.5 * (a[e][t] + b[e][t]);
            }
        const double da = dual_function(s, a), db = dual_function(s, b);
        EXPECT_GE(dual_function(s, m), 0.5 * (da + db) - 1e-6 * (1.0 + std::abs(da) + std::abs(db)));
    }
}

TEST(RunStatusReporting, MaxRoundsKeepsTheTrace)
{
    const auto s = fixtures::desk(7);
    RunConfig cfg;
    cfg.max_rounds = 3;
    const auto t = run_standard(s, cfg);
    EXPECT_EQ(t.status, RunStatus::max_rounds);
    ASSERT_EQ(t.rounds.size(), 3u);
    for (std::size_t k = 0; k < 3; ++k) EXPECT_EQ(t.rounds[k].round, k + 1);
    EXPECT_EQ(t.final_state.round, 3u);
}

// Prosumer 1 must consume 100 kWh with at most 2 kW over four periods.
TEST(RunStatusReporting, SolverFailureAbortsWithPartialTrace)
{
    auto b = fixtures::flat_prosumer(1, 4);
    b.daily_load_min = 100.0;
    const auto s = fixtures::pair(4, fixtures::flat_prosumer(0, 4), b, fixtures::flat_prices(4));
    RunConfig cfg;
    const auto t = run_standard(s, cfg);
    EXPECT_EQ(t.status, RunStatus::solver_failure);
    EXPECT_TRUE(t.rounds.empty());
    EXPECT_NE(t.failure.find("best response"), std::string::npos);
}

TEST(RunStatusReporting, GapTargetStopsEarly)
{
    const auto s = fixtures::desk(7);
    const auto ref = reference_solution(s);
    RunConfig cfg;
    cfg.stop_gap = 0.05;
    cfg.max_rounds = 5000;
    const auto t = run_standard(s, cfg, &ref);
    EXPECT_EQ(t.status, RunStatus::gap_reached);
    EXPECT_LE(t.rounds.back().gap, 0.05);
    for (std::size_t k = 0; k + 1 < t.rounds.size(); ++k) EXPECT_GT(t.rounds[k].gap, 0.05);
}

TEST(Configuration, LargeStepWarnsButRuns)
{
    const auto s = fixtures::desk(7, 30, 8.0);
    RunConfig cfg;
    cfg.rho = 0.5;
    cfg.max_rounds = 1;
    const auto t = run_standard(s, cfg);
    EXPECT_EQ(t.rounds.size(), 1u);
    ASSERT_EQ(t.warnings.size(), 1u);
    EXPECT_NE(t.warnings[0].find("rho"), std::string::npos);
}

TEST(Configuration, InvalidSettingsRejected)
{
    const auto s = fixtures::desk(7);
    RunConfig cfg;
    cfg.rho = 0.0;
    EXPECT_THROW(run_standard(s, cfg), ConfigError);
    cfg.rho = 0.5;
    cfg.eps1 = 0.0;
    EXPECT_THROW(run_standard(s, cfg), ConfigError);
    cfg.eps1 = 1e-4;
    cfg.stop_gap = 0.1;
    EXPECT_THROW(run_standard(s, cfg), ConfigError);
    cfg.stop_gap.reset();
    const auto big = fixtures::desk(7, 10, 4.0);
    cfg.budget = ActivationBudget{0.25};
    cfg.staleness_cap = 1;
    EXPECT_THROW(run_edge(big, cfg), ConfigError);
}
