#pragma once
#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "errors.hpp"
#include "qp.hpp"

// Link activation: which edges (edge mode) or which peers of a prosumer
// (node mode) communicate in a round.

namespace peertrade {

enum class Strategy { round_robin, random, smart };

inline const char* to_string(Strategy s)
{
    switch (s) {
    case Strategy::round_robin: return "round-robin";
    case Strategy::random: return "random";
    case Strategy::smart: return "smart";
    }
    return "unknown";
}

inline Strategy parse_strategy(const std::string& name)
{
    if (name == "round-robin") return Strategy::round_robin;
    if (name == "random") return Strategy::random;
    if (name == "smart") return Strategy::smart;
    throw ConfigError("unknown strategy '" + name + "' (expected round-robin, random or smart)");
}

// A budget below or at 1 is a fraction of the links in scope (rounded up,
// at least one); above 1 it is a link count.
struct ActivationBudget
{
    double value = 1.0;

    std::size_t resolve(std::size_t links) const
    {
        if (!(value > 0.0) || !std::isfinite(value)) throw ConfigError("activation budget must be positive");
        if (links == 0) return 0;
        if (value <= 1.0) {
            const double raw = std::ceil(value * static_cast<double>(links) - 1e-9);
            return std::clamp<std::size_t>(static_cast<std::size_t>(raw), 1, links);
        }
        if (value != std::floor(value)) throw ConfigError("a budget above 1 must be a whole number of links");
        return static_cast<std::size_t>(value);
    }
};

inline std::size_t ceil_div(std::size_t a, std::size_t b) { return (a + b - 1) / b; }

// Links ranked by descending score; equal scores keep the lower index first.
inline std::vector<std::size_t> rank_by_score(const std::vector<double>& scores)
{
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    return order;
}

inline std::vector<std::size_t> top_by_score(const std::vector<double>& scores, std::size_t count)
{
    if (count > scores.size())
        throw StructuralError("cannot select " + std::to_string(count) + " of " + std::to_string(scores.size()) +
                              " links");
    auto order = rank_by_score(scores);
    order.resize(count);
    std::sort(order.begin(), order.end());
    return order;
}

// Edge mode: the ebar edges with the largest ||t_ij + t_ji||.
inline std::vector<std::size_t> select_edges_smart(const std::vector<double>& imbalance, std::size_t ebar)
{
    return top_by_score(imbalance, ebar);
}

// Score of peer slot k for prosumer i: ||t_ij(k) + record_ji(k-1)||.
inline std::vector<double> peer_scores(const std::vector<Vector>& own, const std::vector<Vector>& records)
{
    if (own.size() != records.size()) throw StructuralError("proposals and records differ in peer count");
    std::vector<double> s(own.size());
    for (std::size_t k = 0; k < own.size(); ++k) s[k] = (own[k] + records[k]).norm();
    return s;
}

// Node mode: the ebar_i peer slots of prosumer i with the largest imbalance as
// i sees it, from its own proposals and the last records received from peers.
inline std::vector<std::size_t> select_peers_smart(const std::vector<Vector>& own, const std::vector<Vector>& records,
                                                   std::size_t ebar_i)
{
    return top_by_score(peer_scores(own, records), ebar_i);
}

// Cyclic order over links 0..n-1; round k (1-based) takes the `budget` links
// that follow those of round k-1.
inline std::vector<std::size_t> select_round_robin(std::size_t links, std::size_t budget, std::size_t round)
{
    if (budget > links) throw StructuralError("round-robin budget exceeds the number of links");
    if (round < 1) throw StructuralError("rounds are numbered from 1");
    std::vector<std::size_t> out(budget);
    if (links == 0) return out;
    const std::size_t start = ((round - 1) % links) * (budget % links) % links;
    for (std::size_t k = 0; k < budget; ++k) out[k] = (start + k) % links;
    std::sort(out.begin(), out.end());
    return out;
}

// Uniformly random order of links 0..n-1.
inline std::vector<std::size_t> random_ranking(std::mt19937_64& rng, std::size_t links)
{
    std::vector<std::size_t> order(links);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    return order;
}

inline std::vector<std::size_t> select_random(std::mt19937_64& rng, std::size_t links, std::size_t budget)
{
    if (budget > links) throw StructuralError("random budget exceeds the number of links");
    auto order = random_ranking(rng, links);
    order.resize(budget);
    std::sort(order.begin(), order.end());
    return order;
}

// Round in which each link last communicated, 0 before the first round.
struct ActivationRecord
{
    std::vector<std::size_t> last;

    explicit ActivationRecord(std::size_t links = 0) : last(links, 0) {}

    void mark(const std::vector<std::size_t>& active, std::size_t round)
    {
        for (std::size_t l : active) last.at(l) = round;
    }

    // Rounds since the last activation, counting `round` itself as idle.
    std::size_t idle(std::size_t link, std::size_t round) const { return round - last[link]; }
};

// Minimum staleness cap that can be honoured with `budget` activations a round.
inline std::size_t minimum_staleness_cap(std::size_t links, std::size_t budget)
{
    return budget == 0 ? 0 : ceil_div(links, budget);
}

// Each link must be active at least once in every window of kbar rounds,
// i.e. again no later than round last + kbar. Earliest-deadline-first
// lookahead forces just enough links now that future rounds can still meet
// every deadline with `budget` slots each; the remaining slots go to the
// proposed links in `preference` order (most preferred first).
inline std::vector<std::size_t> enforce_staleness_cap(const std::vector<std::size_t>& preference,
                                                      const ActivationRecord& record, std::size_t kbar,
                                                      std::size_t round, std::size_t budget)
{
    const std::size_t n = record.last.size();
    if (budget > n) throw StructuralError("budget exceeds the number of links");
    if (kbar < 1) throw ConfigError("staleness cap must be at least 1");

    std::vector<std::size_t> by_deadline(n);
    std::iota(by_deadline.begin(), by_deadline.end(), std::size_t{0});
    auto deadline = [&](std::size_t l) { return record.last[l] + kbar; };
    std::stable_sort(by_deadline.begin(), by_deadline.end(),
                     [&](std::size_t a, std::size_t b) { return deadline(a) < deadline(b); });

    std::size_t force = 0;
    for (std::size_t c = 0; c < n; ++c) {
        const std::size_t d = deadline(by_deadline[c]);
        if (d < round)
            throw InvariantError("staleness_cap", "link " + std::to_string(by_deadline[c]) + " missed its deadline");
        // Links with deadline <= d: those up to the last of equal deadline.
        if (c + 1 < n && deadline(by_deadline[c + 1]) == d) continue;
        const std::size_t due = c + 1;
        const std::size_t later_slots = budget * (d - round);
        if (due > later_slots) force = std::max(force, due - later_slots);
    }
    if (force > budget)
        throw ConfigError("staleness cap " + std::to_string(kbar) + " cannot be met with budget " +
                          std::to_string(budget));

    std::vector<char> chosen(n, 0);
    std::vector<std::size_t> out;
    out.reserve(budget);
    for (std::size_t c = 0; c < force; ++c) {
        chosen[by_deadline[c]] = 1;
        out.push_back(by_deadline[c]);
    }
    for (std::size_t l : preference) {
        if (out.size() == budget) break;
        if (l >= n) throw StructuralError("preferred link index out of range");
        if (!chosen[l]) {
            chosen[l] = 1;
            out.push_back(l);
        }
    }
    if (out.size() != budget) throw StructuralError("preference list too short to fill the budget");
    std::sort(out.begin(), out.end());
    return out;
}

} // namespace peertrade
