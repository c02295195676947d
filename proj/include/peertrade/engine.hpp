#pragma once
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdlib>
#include <cstring>
#include <exception>
#include <limits>
#include <memory>
#include <mutex>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include "local.hpp"
#include "model.hpp"
#include "reference.hpp"
#include "select.hpp"

// Negotiation loops. Every round: all prosumers best-respond to the current
// prices, the activation rule picks which links communicate, records and
// prices of the communicating links are updated, and the round is logged.
//
//   standard  every edge exchanges and updates every round
//   edge      only the selected edges exchange (mutually) and update
//   node      each prosumer pushes its proposal to the peers it selects;
//             an edge updates whenever either side pushed

namespace peertrade {

enum class Algorithm { standard, edge, node };

inline const char* to_string(Algorithm a)
{
    switch (a) {
    case Algorithm::standard: return "standard";
    case Algorithm::edge: return "edge";
    case Algorithm::node: return "node";
    }
    return "unknown";
}

inline Algorithm parse_algorithm(const std::string& name)
{
    if (name == "standard") return Algorithm::standard;
    if (name == "edge") return Algorithm::edge;
    if (name == "node") return Algorithm::node;
    throw ConfigError("unknown algorithm '" + name + "' (expected standard, edge or node)");
}

struct RunConfig
{
    Algorithm algorithm = Algorithm::standard;
    double rho = 0.5;  // price step, cents / kW per kW of imbalance
    double eps1 = 1e-4; // proposal change threshold, kW
    double eps2 = 1e-4; // price change threshold, cents / kW
    std::size_t max_rounds = 1000;
    ActivationBudget budget{1.0};
    Strategy strategy = Strategy::smart;
    std::size_t staleness_cap = 0; // 0 picks the default
    std::uint64_t seed = 1;
    bool monitor_dual = false; // log D(lambda) after every round
    std::size_t stop_window = 0; // 0 picks the default
    std::optional<double> stop_gap; // also stop once the gap falls below this
    bool record_prices = false;     // keep lambda after every round
    QpSettings qp{};
};

enum class RunStatus { converged, max_rounds, gap_reached, solver_failure };

inline const char* to_string(RunStatus s)
{
    switch (s) {
    case RunStatus::converged: return "converged";
    case RunStatus::max_rounds: return "max_rounds";
    case RunStatus::gap_reached: return "gap_reached";
    case RunStatus::solver_failure: return "solver_failure";
    }
    return "unknown";
}

inline constexpr double not_available = std::numeric_limits<double>::quiet_NaN();

struct RoundRecord
{
    std::size_t round = 0;
    std::vector<std::size_t> activated; // edge ids, or directed link ids in node mode
    double primal_residue = 0.0;        // I^-1 sum_i ||rec_i(k) - rec_i(k-1)||
    double dual_residue = 0.0;          // I^-1 sum_i ||lambda_i(k) - lambda_i(k-1)||
    double gap = not_available;
    double dual_value = not_available; // D(lambda(k))
    double max_proposal_change = 0.0;  // max_i ||(x_i, t_i)(k) - (x_i, t_i)(k-1)||
    double max_price_change = 0.0;     // max over edges of ||lambda_ij(k) - lambda_ij(k-1)||
    double price_step_sq = 0.0;        // sum over edges of ||lambda_ij(k) - lambda_ij(k-1)||^2
    std::uint64_t price_digest = 0;    // hash of the bytes of lambda(k)
    double wall_ms = 0.0;
    std::vector<double> record_lag;    // node mode: ||t_i(k) - rec_i(k)||
    std::vector<double> proposal_step; // ||t_i(k) - t_i(k-1)||
};

// Trading state after the last completed round.
struct TradeState
{
    std::size_t round = 0;
    std::vector<Vector> prices;               // lambda per edge
    std::vector<LocalDecision> decisions;     // latest x_i, t_i
    std::vector<std::vector<Vector>> records; // records[i][slot] = last value i sent to that peer

    std::vector<Vector> schedules() const
    {
        std::vector<Vector> out;
        for (const auto& d : decisions) out.push_back(d.schedule());
        return out;
    }

    std::vector<Vector> stacked_records() const
    {
        std::vector<Vector> out;
        for (const auto& r : records) {
            Eigen::Index len = 0;
            for (const auto& v : r) len += v.size();
            Vector s(len);
            Eigen::Index off = 0;
            for (const auto& v : r) {
                s.segment(off, v.size()) = v;
                off += v.size();
            }
            out.push_back(std::move(s));
        }
        return out;
    }

    DualPriceView view(const Scenario& s, std::size_t i) const
    {
        DualPriceView v;
        for (const auto& link : s.links(i)) v.push_back(prices[link.edge]);
        return v;
    }
};

struct RunTrace
{
    Algorithm algorithm = Algorithm::standard;
    Strategy strategy = Strategy::smart;
    double rho = 0.0;
    double step_bound = 0.0; // ceiling on rho that guarantees convergence in this mode
    std::size_t staleness_cap = 0;
    std::size_t stop_window = 1;
    std::vector<std::size_t> budgets; // one entry (edge count) or one per prosumer
    std::vector<RoundRecord> rounds;
    double initial_dual_value = not_available; // D(lambda(0))
    std::vector<std::vector<Vector>> price_history;
    TradeState final_state;
    RunStatus status = RunStatus::max_rounds;
    std::string failure;
    std::vector<std::string> warnings;
};

// ---------------------------------------------------------------- helpers

inline std::uint64_t fnv1a(const void* data, std::size_t len, std::uint64_t h = 1469598103934665603ull)
{
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t k = 0; k < len; ++k) {
        h ^= p[k];
        h *= 1099511628211ull;
    }
    return h;
}

inline std::uint64_t price_digest(const std::vector<Vector>& prices)
{
    std::uint64_t h = 1469598103934665603ull;
    for (const auto& v : prices) h = fnv1a(v.data(), static_cast<std::size_t>(v.size()) * sizeof(double), h);
    return h;
}

// Worker count from PEERTRADE_THREADS, default 1.
inline std::size_t worker_count()
{
    if (const char* env = std::getenv("PEERTRADE_THREADS")) {
        const long v = std::strtol(env, nullptr, 10);
        if (v > 0) return static_cast<std::size_t>(v);
    }
    return 1;
}

// Runs body(i) for i in [0, n). Every index is handled independently, so the
// result does not depend on the worker count.
template <class Body>
void parallel_for(std::size_t n, Body&& body, std::size_t workers = worker_count())
{
    workers = std::min(workers, n);
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) body(i);
        return;
    }
    std::exception_ptr error;
    std::mutex m;
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&, w] {
            for (std::size_t i = w; i < n; i += workers) {
                try {
                    body(i);
                } catch (...) {
                    std::lock_guard<std::mutex> lock(m);
                    if (!error) error = std::current_exception();
                }
            }
        });
    }
    for (auto& t : pool) t.join();
    if (error) std::rethrow_exception(error);
}

// True iff in each of the last `window` entries every prosumer's proposal
// change is below eps1 and every edge's price change is below eps2.
inline bool check_stopping(const std::vector<double>& max_proposal_change, const std::vector<double>& max_price_change,
                           double eps1, double eps2, std::size_t window)
{
    if (window < 1) throw ConfigError("stopping window must be at least 1");
    if (max_proposal_change.size() != max_price_change.size())
        throw StructuralError("stopping histories differ in length");
    const std::size_t n = max_proposal_change.size();
    if (n < window) return false;
    for (std::size_t k = n - window; k < n; ++k)
        if (!(max_proposal_change[k] < eps1) || !(max_price_change[k] < eps2)) return false;
    return true;
}

inline double dual_function(const Scenario& s, const std::vector<Vector>& prices, const QpSettings& settings = {})
{
    if (prices.size() != s.edges().size()) throw StructuralError("one price series per edge is required");
    double d = 0.0;
    for (std::size_t i = 0; i < s.size(); ++i) {
        DualPriceView v;
        for (const auto& link : s.links(i)) v.push_back(prices[link.edge]);
        d += dual_value(s.prosumer(i), s.prices(), v, settings);
    }
    return d;
}

// Activation budgets: one entry for edge mode, one per prosumer in node mode.
inline std::vector<std::size_t> resolve_budgets(const Scenario& s, const RunConfig& cfg)
{
    switch (cfg.algorithm) {
    case Algorithm::standard: return {s.edges().size()};
    case Algorithm::edge: {
        const std::size_t b = cfg.budget.resolve(s.edges().size());
        if (b > s.edges().size())
            throw StructuralError("edge budget " + std::to_string(b) + " exceeds the " +
                                  std::to_string(s.edges().size()) + " edges");
        return {b};
    }
    case Algorithm::node: {
        std::vector<std::size_t> b;
        for (const auto& p : s.prosumers()) b.push_back(std::min(cfg.budget.resolve(p.num_peers()), p.num_peers()));
        return b;
    }
    }
    return {};
}

// Smallest cap the budgets can honour; the default is twice that.
inline std::size_t minimum_cap(const Scenario& s, Algorithm algo, const std::vector<std::size_t>& budgets)
{
    if (algo == Algorithm::standard) return 1;
    if (algo == Algorithm::edge) return minimum_staleness_cap(s.edges().size(), budgets[0]);
    std::size_t c = 1;
    for (std::size_t i = 0; i < s.size(); ++i)
        if (budgets[i] > 0) c = std::max(c, minimum_staleness_cap(s.prosumer(i).num_peers(), budgets[i]));
    return c;
}

inline double step_bound(const Scenario& s, Algorithm algo, std::size_t kbar)
{
    return algo == Algorithm::node ? node_step_bound(s.lipschitz(), kbar) : edge_step_bound(s.lipschitz());
}

// ---------------------------------------------------------------- negotiation

class Negotiation
{
public:
    Negotiation(const Scenario& scenario, RunConfig cfg, const ReferenceSolution* ref = nullptr)
        : s_(scenario), cfg_(std::move(cfg)), ref_(ref), rng_(cfg_.seed)
    {
        if (!(cfg_.rho > 0.0) || !std::isfinite(cfg_.rho)) throw ConfigError("rho must be positive");
        if (!(cfg_.eps1 > 0.0) || !(cfg_.eps2 > 0.0)) throw ConfigError("stopping thresholds must be positive");
        if (cfg_.max_rounds < 1) throw ConfigError("max rounds must be at least 1");
        if (cfg_.stop_gap && !ref_) throw ConfigError("a gap target needs a reference solution");

        budgets_ = resolve_budgets(s_, cfg_);
        const std::size_t need = minimum_cap(s_, cfg_.algorithm, budgets_);
        kbar_ = cfg_.staleness_cap == 0 ? 2 * need : cfg_.staleness_cap;
        if (cfg_.algorithm != Algorithm::standard && kbar_ < need)
            throw ConfigError("staleness cap " + std::to_string(kbar_) + " is below the minimum " +
                              std::to_string(need) + " the budget allows");
        full_budget_ = cfg_.algorithm == Algorithm::standard ||
                       (cfg_.algorithm == Algorithm::edge && budgets_[0] == s_.edges().size()) ||
                       (cfg_.algorithm == Algorithm::node && [&] {
                           for (std::size_t i = 0; i < s_.size(); ++i)
                               if (budgets_[i] != s_.prosumer(i).num_peers()) return false;
                           return true;
                       }());
        window_ = cfg_.stop_window != 0 ? cfg_.stop_window : (full_budget_ ? 1 : kbar_);

        trace_.algorithm = cfg_.algorithm;
        trace_.strategy = cfg_.strategy;
        trace_.rho = cfg_.rho;
        trace_.staleness_cap = cfg_.algorithm == Algorithm::standard ? 1 : kbar_;
        trace_.stop_window = window_;
        trace_.budgets = budgets_;
        trace_.step_bound = step_bound(s_, cfg_.algorithm, trace_.staleness_cap);
        if (!(cfg_.rho < trace_.step_bound))
            trace_.warnings.push_back("rho " + std::to_string(cfg_.rho) + " is not below the convergence bound " +
                                      std::to_string(trace_.step_bound) + " for " + to_string(cfg_.algorithm) +
                                      " negotiation");

        const auto T = static_cast<Eigen::Index>(s_.horizon());
        state_.prices.assign(s_.edges().size(), Vector::Zero(T));
        state_.records.resize(s_.size());
        for (std::size_t i = 0; i < s_.size(); ++i) {
            const auto& p = s_.prosumer(i);
            state_.decisions.push_back(LocalDecision::zeros(s_.horizon(), p.num_peers()));
            state_.records[i].assign(p.num_peers(), Vector::Zero(T));
            solvers_.push_back(std::make_unique<LocalSolver>(p, s_.prices(), cfg_.qp));
        }
        warm_.resize(s_.size());
        if (cfg_.algorithm == Algorithm::node) {
            link_record_.resize(s_.size());
            for (std::size_t i = 0; i < s_.size(); ++i) link_record_[i] = ActivationRecord(s_.prosumer(i).num_peers());
        } else {
            edge_record_ = ActivationRecord(s_.edges().size());
        }
    }

    RunTrace run()
    {
        try {
            while (state_.round < cfg_.max_rounds) {
                step();
                const auto& last = trace_.rounds.back();
                if (cfg_.stop_gap && last.gap <= *cfg_.stop_gap) {
                    trace_.status = RunStatus::gap_reached;
                    break;
                }
                if (check_stopping(change_hist_, price_hist_, cfg_.eps1, cfg_.eps2, window_)) {
                    trace_.status = RunStatus::converged;
                    break;
                }
            }
            if (state_.round >= cfg_.max_rounds && trace_.status != RunStatus::converged &&
                trace_.status != RunStatus::gap_reached)
                trace_.status = RunStatus::max_rounds;
            if (cfg_.monitor_dual && !trace_.rounds.empty()) trace_.rounds.back().dual_value = solve_all(nullptr);
        } catch (const SolverError& e) {
            trace_.status = RunStatus::solver_failure;
            trace_.failure = e.what();
        }
        trace_.final_state = state_;
        return std::move(trace_);
    }

    const TradeState& state() const { return state_; }

private:
    // Best responses at the current prices; returns D(lambda).
    double solve_all(std::vector<BestResponse>* out)
    {
        std::vector<BestResponse> br(s_.size());
        parallel_for(s_.size(), [&](std::size_t i) {
            const auto view = state_.view(s_, i);
            br[i] = solvers_[i]->solve(view, warm_[i] ? &*warm_[i] : nullptr);
        });
        double d = 0.0;
        for (const auto& b : br) d += b.objective;
        if (out) *out = std::move(br);
        return d;
    }

    std::vector<std::size_t> select_edges(const std::vector<LocalDecision>& proposals)
    {
        const std::size_t E = s_.edges().size();
        if (cfg_.algorithm == Algorithm::standard || budgets_[0] == E) {
            std::vector<std::size_t> all(E);
            std::iota(all.begin(), all.end(), std::size_t{0});
            return all;
        }
        const std::size_t b = budgets_[0];
        const std::size_t k = state_.round;
        if (cfg_.strategy == Strategy::round_robin) return select_round_robin(E, b, k);
        std::vector<std::size_t> preference;
        if (cfg_.strategy == Strategy::random) {
            preference = random_ranking(rng_, E);
        } else {
            std::vector<double> imbalance(E);
            for (std::size_t e = 0; e < E; ++e) {
                const auto [a, c] = s_.edges()[e];
                const auto& la = s_.links(a);
                std::size_t slot = 0;
                while (la[slot].peer != c) ++slot;
                imbalance[e] = (proposals[a].trades[slot] + proposals[c].trades[la[slot].reverse_slot]).norm();
            }
            preference = rank_by_score(imbalance);
        }
        return enforce_staleness_cap(preference, edge_record_, kbar_, k, b);
    }

    // Slots prosumer i pushes to this round.
    std::vector<std::size_t> select_pushes(std::size_t i, const LocalDecision& own)
    {
        const std::size_t deg = s_.prosumer(i).num_peers();
        const std::size_t b = budgets_[i];
        if (deg == 0) return {};
        if (b == deg) {
            std::vector<std::size_t> all(deg);
            std::iota(all.begin(), all.end(), std::size_t{0});
            return all;
        }
        const std::size_t k = state_.round;
        if (cfg_.strategy == Strategy::round_robin) return select_round_robin(deg, b, k);
        std::vector<std::size_t> preference;
        if (cfg_.strategy == Strategy::random) {
            preference = random_ranking(rng_, deg);
        } else {
            // i's view: own proposals and the last records its peers pushed to i.
            std::vector<Vector> received;
            for (const auto& link : s_.links(i)) received.push_back(state_.records[link.peer][link.reverse_slot]);
            preference = rank_by_score(peer_scores(own.trades, received));
        }
        return enforce_staleness_cap(preference, link_record_[i], kbar_, k, b);
    }

    void step()
    {
        const auto t0 = std::chrono::steady_clock::now();
        const std::size_t I = s_.size();
        const std::size_t k = ++state_.round;

        std::vector<BestResponse> br;
        const double d_prev = solve_all(&br);
        if (k == 1)
            trace_.initial_dual_value = d_prev;
        else
            trace_.rounds.back().dual_value = d_prev;

        RoundRecord rec;
        rec.round = k;

        std::vector<LocalDecision> proposals(I);
        double max_change = 0.0;
        for (std::size_t i = 0; i < I; ++i) {
            proposals[i] = std::move(br[i].decision);
            warm_[i] = std::move(br[i].warm);
            const auto& old = state_.decisions[i];
            double sq = (proposals[i].schedule() - old.schedule()).squaredNorm();
            double tsq = 0.0;
            for (std::size_t j = 0; j < proposals[i].trades.size(); ++j)
                tsq += (proposals[i].trades[j] - old.trades[j]).squaredNorm();
            max_change = std::max(max_change, std::sqrt(sq + tsq));
            rec.proposal_step.push_back(std::sqrt(tsq));
        }

        const auto old_records = state_.records;
        const auto old_prices = state_.prices;
        std::vector<char> update(s_.edges().size(), 0);

        if (cfg_.algorithm == Algorithm::node) {
            std::vector<std::vector<std::size_t>> pushes(I);
            for (std::size_t i = 0; i < I; ++i) pushes[i] = select_pushes(i, proposals[i]);
            for (std::size_t i = 0; i < I; ++i) {
                link_record_[i].mark(pushes[i], k);
                for (std::size_t slot : pushes[i]) {
                    state_.records[i][slot] = proposals[i].trades[slot];
                    update[s_.links(i)[slot].edge] = 1;
                    rec.activated.push_back(s_.directed_link(i, slot));
                }
            }
        } else {
            auto active = select_edges(proposals);
            edge_record_.mark(active, k);
            for (std::size_t e : active) {
                const auto [a, c] = s_.edges()[e];
                const auto& la = s_.links(a);
                std::size_t slot = 0;
                while (la[slot].peer != c) ++slot;
                state_.records[a][slot] = proposals[a].trades[slot];
                state_.records[c][la[slot].reverse_slot] = proposals[c].trades[la[slot].reverse_slot];
                update[e] = 1;
            }
            rec.activated = std::move(active);
        }

        // lambda_ij += rho (rec_ij + rec_ji), summed in edge order (low id first).
        double max_dl = 0.0, step_sq = 0.0;
        for (std::size_t e = 0; e < s_.edges().size(); ++e) {
            if (!update[e]) continue;
            const auto [a, c] = s_.edges()[e];
            const auto& la = s_.links(a);
            std::size_t slot = 0;
            while (la[slot].peer != c) ++slot;
            state_.prices[e] += cfg_.rho * (state_.records[a][slot] + state_.records[c][la[slot].reverse_slot]);
            const double dl = (state_.prices[e] - old_prices[e]).squaredNorm();
            step_sq += dl;
            max_dl = std::max(max_dl, std::sqrt(dl));
        }
        state_.decisions = std::move(proposals);

        // Residues from the stacked per-prosumer views.
        double pr = 0.0, du = 0.0;
        for (std::size_t i = 0; i < I; ++i) {
            double rsq = 0.0, lsq = 0.0, lag = 0.0;
            for (std::size_t slot = 0; slot < s_.links(i).size(); ++slot) {
                rsq += (state_.records[i][slot] - old_records[i][slot]).squaredNorm();
                const auto e = s_.links(i)[slot].edge;
                lsq += (state_.prices[e] - old_prices[e]).squaredNorm();
                lag += (state_.decisions[i].trades[slot] - state_.records[i][slot]).squaredNorm();
            }
            pr += std::sqrt(rsq);
            du += std::sqrt(lsq);
            rec.record_lag.push_back(std::sqrt(lag));
        }
        rec.primal_residue = pr / static_cast<double>(I);
        rec.dual_residue = du / static_cast<double>(I);
        rec.max_proposal_change = max_change;
        rec.max_price_change = max_dl;
        rec.price_step_sq = step_sq;
        rec.price_digest = price_digest(state_.prices);
        if (ref_) rec.gap = optimality_gap(state_.schedules(), state_.stacked_records(), *ref_);
        if (cfg_.record_prices) trace_.price_history.push_back(state_.prices);

        change_hist_.push_back(max_change);
        price_hist_.push_back(max_dl);
        rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
        trace_.rounds.push_back(std::move(rec));
    }

    const Scenario& s_;
    RunConfig cfg_;
    const ReferenceSolution* ref_;
    std::mt19937_64 rng_;
    std::vector<std::size_t> budgets_;
    std::size_t kbar_ = 1;
    std::size_t window_ = 1;
    bool full_budget_ = true;
    TradeState state_;
    RunTrace trace_;
    std::vector<std::unique_ptr<LocalSolver>> solvers_;
    std::vector<std::optional<QpWarmStart>> warm_;
    ActivationRecord edge_record_;
    std::vector<ActivationRecord> link_record_;
    std::vector<double> change_hist_, price_hist_;
};

inline RunTrace run_negotiation(const Scenario& s, const RunConfig& cfg, const ReferenceSolution* ref = nullptr)
{
    return Negotiation(s, cfg, ref).run();
}

inline RunTrace run_standard(const Scenario& s, RunConfig cfg, const ReferenceSolution* ref = nullptr)
{
    cfg.algorithm = Algorithm::standard;
    return run_negotiation(s, cfg, ref);
}

inline RunTrace run_edge(const Scenario& s, RunConfig cfg, const ReferenceSolution* ref = nullptr)
{
    cfg.algorithm = Algorithm::edge;
    return run_negotiation(s, cfg, ref);
}

inline RunTrace run_node(const Scenario& s, RunConfig cfg, const ReferenceSolution* ref = nullptr)
{
    cfg.algorithm = Algorithm::node;
    return run_negotiation(s, cfg, ref);
}

} // namespace peertrade
