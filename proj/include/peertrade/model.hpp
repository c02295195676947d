#pragma once
#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "errors.hpp"
#include "qp.hpp"

// Prosumer data, the trading graph, the cost J_i and the operating set of
// each prosumer. Units: cents, kW, kWh, hourly periods.

namespace peertrade {

struct TimeGrid
{
    std::size_t horizon = 24;
};

struct PeerLink
{
    std::size_t id = 0;
    double alpha = 1.0; // cents / kW^2, quadratic fee
    double beta = 1.0;  // cents / kW, linear fee
};

struct StorageParams
{
    double capacity = 0.0;      // kWh
    double soc_min = 0.0;       // kWh
    double soc_max = 0.0;       // kWh
    double soc_boundary = 0.0;  // kWh, SOC at the start and at the end of the horizon
    double eff_charge = 1.0;
    double eff_discharge = 1.0;
    double charge_max = 0.0;    // kW
    double discharge_max = 0.0; // kW
    double aging_cost = 0.0;    // cents / kW
};

struct WholesalePrices
{
    Vector buy;  // cents / kW
    Vector sell; // cents / kW
};

struct ProsumerModel
{
    std::size_t id = 0;
    Vector utility_quadratic; // xi, cents / kW^2, negative
    Vector utility_linear;    // varrho, cents / kW
    Vector load_min;          // kW
    Vector load_max;          // kW
    double daily_load_min = 0.0; // kWh
    StorageParams storage;
    Vector exchange_min; // kW
    Vector exchange_max; // kW
    Vector pv;           // kW
    std::vector<PeerLink> peers; // sorted by id

    std::size_t horizon() const { return static_cast<std::size_t>(utility_linear.size()); }
    std::size_t num_peers() const { return peers.size(); }

    void validate() const
    {
        const auto T = static_cast<Eigen::Index>(horizon());
        const std::string who = "prosumer " + std::to_string(id);
        if (T < 1) throw InvariantError("horizon_positive", who + " has an empty horizon");
        for (const Vector* v : {&utility_quadratic, &load_min, &load_max, &exchange_min, &exchange_max, &pv})
            if (v->size() != T) throw StructuralError(who + ": per-period series lengths differ");
        for (Eigen::Index t = 0; t < T; ++t) {
            if (!(utility_quadratic[t] < 0.0))
                throw InvariantError("utility_concave", who + " needs xi < 0 in every period");
            if (!(load_min[t] <= load_max[t]) || load_min[t] < 0.0)
                throw InvariantError("load_bounds_ordered", who + " needs 0 <= load_min <= load_max");
            if (!(exchange_min[t] <= exchange_max[t]))
                throw InvariantError("exchange_bounds_ordered", who + " needs exchange_min <= exchange_max");
            if (pv[t] < 0.0) throw InvariantError("pv_nonnegative", who + " has negative PV output");
        }
        const auto& s = storage;
        if (!(s.soc_min <= s.soc_boundary && s.soc_boundary <= s.soc_max))
            throw InvariantError("soc_boundary_in_window", who + " needs soc_min <= soc_boundary <= soc_max");
        if (s.charge_max < 0.0 || s.discharge_max < 0.0 || s.capacity < 0.0 || s.soc_min < 0.0)
            throw InvariantError("storage_caps_nonnegative", who + " has a negative storage cap");
        if (!(s.eff_charge > 0.0 && s.eff_charge <= 1.0 && s.eff_discharge > 0.0 && s.eff_discharge <= 1.0))
            throw InvariantError("efficiency_range", who + " needs efficiencies in (0, 1]");
        for (std::size_t k = 0; k < peers.size(); ++k) {
            if (!(peers[k].alpha > 0.0))
                throw InvariantError("fee_strongly_convex", who + " needs alpha > 0 for every peer");
            if (peers[k].beta < 0.0) throw InvariantError("fee_linear_nonnegative", who + " needs beta >= 0");
            if (peers[k].id == id) throw InvariantError("no_self_trade", who + " lists itself as a peer");
            if (k > 0 && peers[k - 1].id >= peers[k].id)
                throw InvariantError("peers_sorted_unique", who + " peer list must be sorted and unique");
        }
    }
};

// x_i = (load, charge, discharge, soc, exchange) and t_i, one series per peer slot.
struct LocalDecision
{
    Vector load;
    Vector charge;
    Vector discharge;
    Vector soc;
    Vector exchange;
    std::vector<Vector> trades;

    static LocalDecision zeros(std::size_t horizon, std::size_t num_peers)
    {
        const auto T = static_cast<Eigen::Index>(horizon);
        LocalDecision d;
        d.load = d.charge = d.discharge = d.soc = d.exchange = Vector::Zero(T);
        d.trades.assign(num_peers, Vector::Zero(T));
        return d;
    }

    // Stacked x_i.
    Vector schedule() const
    {
        const auto T = load.size();
        Vector x(5 * T);
        x << load, charge, discharge, soc, exchange;
        return x;
    }

    // Stacked t_i.
    Vector stacked_trades() const
    {
        Eigen::Index len = 0;
        for (const auto& t : trades) len += t.size();
        Vector v(len);
        Eigen::Index off = 0;
        for (const auto& t : trades) {
            v.segment(off, t.size()) = t;
            off += t.size();
        }
        return v;
    }
};

namespace detail {

inline void check_dimensions(const ProsumerModel& p, const LocalDecision& d)
{
    const auto T = static_cast<Eigen::Index>(p.horizon());
    for (const Vector* v : {&d.load, &d.charge, &d.discharge, &d.soc, &d.exchange})
        if (v->size() != T) throw StructuralError("decision series length differs from the horizon");
    if (d.trades.size() != p.num_peers()) throw StructuralError("decision has the wrong number of trade series");
    for (const auto& t : d.trades)
        if (t.size() != T) throw StructuralError("trade series length differs from the horizon");
}

} // namespace detail

// Peer-to-peer fee sum_j sum_tau (alpha |t| + beta) |t|.
inline double trading_fee(const ProsumerModel& p, const LocalDecision& d)
{
    double fee = 0.0;
    for (std::size_t k = 0; k < p.num_peers(); ++k) {
        const auto& link = p.peers[k];
        for (Eigen::Index t = 0; t < d.trades[k].size(); ++t) {
            const double a = std::abs(d.trades[k][t]);
            fee += (link.alpha * a + link.beta) * a;
        }
    }
    return fee;
}

inline double evaluate_cost(const ProsumerModel& p, const WholesalePrices& prices, const LocalDecision& d)
{
    detail::check_dimensions(p, d);
    const auto T = static_cast<Eigen::Index>(p.horizon());
    if (prices.buy.size() != T || prices.sell.size() != T)
        throw StructuralError("evaluate_cost: price series length differs from the horizon");
    double cost = 0.0;
    for (Eigen::Index t = 0; t < T; ++t) {
        const double ex = d.exchange[t];
        cost += prices.buy[t] * std::max(ex, 0.0) + prices.sell[t] * std::min(ex, 0.0);
        const double pl = d.load[t];
        cost -= p.utility_quadratic[t] * pl * pl + p.utility_linear[t] * pl;
        cost += p.storage.aging_cost * (d.charge[t] + d.discharge[t]);
    }
    return cost + trading_fee(p, d);
}

enum class ConstraintId {
    power_balance,
    soc_dynamics,
    soc_terminal,
    soc_bounds,
    load_bounds,
    daily_load_min,
    exchange_bounds,
    charge_bounds,
    discharge_bounds,
};

inline const char* to_string(ConstraintId c)
{
    switch (c) {
    case ConstraintId::power_balance: return "power_balance";
    case ConstraintId::soc_dynamics: return "soc_dynamics";
    case ConstraintId::soc_terminal: return "soc_terminal";
    case ConstraintId::soc_bounds: return "soc_bounds";
    case ConstraintId::load_bounds: return "load_bounds";
    case ConstraintId::daily_load_min: return "daily_load_min";
    case ConstraintId::exchange_bounds: return "exchange_bounds";
    case ConstraintId::charge_bounds: return "charge_bounds";
    case ConstraintId::discharge_bounds: return "discharge_bounds";
    }
    return "unknown";
}

struct Violation
{
    ConstraintId constraint;
    std::size_t period; // 0-based; 0 for whole-horizon constraints
    double magnitude;   // kW or kWh
};

inline std::vector<Violation> check_feasible(const ProsumerModel& p, const LocalDecision& d, double tol)
{
    if (tol < 0.0) throw ConfigError("check_feasible: tolerance must be nonnegative");
    detail::check_dimensions(p, d);
    const auto T = static_cast<Eigen::Index>(p.horizon());
    const auto& s = p.storage;
    std::vector<Violation> out;
    auto flag = [&](ConstraintId c, Eigen::Index t, double v) {
        if (v > tol) out.push_back({c, static_cast<std::size_t>(t), v});
    };
    auto box = [](double v, double lo, double hi) { return std::max({0.0, lo - v, v - hi}); };

    double total_load = 0.0;
    for (Eigen::Index t = 0; t < T; ++t) {
        double net_trade = 0.0;
        for (const auto& tr : d.trades) net_trade += tr[t];
        const double balance = d.load[t] + d.charge[t] - d.discharge[t] + net_trade - p.pv[t];
        flag(ConstraintId::power_balance, t, std::abs(d.exchange[t] - balance));

        const double prev = t == 0 ? s.soc_boundary : d.soc[t - 1];
        const double next = prev + s.eff_charge * d.charge[t] - s.eff_discharge * d.discharge[t];
        flag(ConstraintId::soc_dynamics, t, std::abs(d.soc[t] - next));
        flag(ConstraintId::soc_bounds, t, box(d.soc[t], s.soc_min, s.soc_max));
        flag(ConstraintId::load_bounds, t, box(d.load[t], p.load_min[t], p.load_max[t]));
        flag(ConstraintId::exchange_bounds, t, box(d.exchange[t], p.exchange_min[t], p.exchange_max[t]));
        flag(ConstraintId::charge_bounds, t, box(d.charge[t], 0.0, s.charge_max));
        flag(ConstraintId::discharge_bounds, t, box(d.discharge[t], 0.0, s.discharge_max));
        total_load += d.load[t];
    }
    flag(ConstraintId::soc_terminal, T - 1, std::abs(d.soc[T - 1] - s.soc_boundary));
    flag(ConstraintId::daily_load_min, 0, p.daily_load_min - total_load);
    return out;
}

// Modulus of strong convexity of J_i in t_i: the fee alpha t^2 is the only
// curvature in t, so m_i = 2 min_j alpha_ij. Infinite for a prosumer without peers.
inline double strong_convexity_modulus(const ProsumerModel& p)
{
    if (p.peers.empty()) return inf;
    double a = inf;
    for (const auto& link : p.peers) {
        if (!(link.alpha > 0.0))
            throw InvariantError("fee_strongly_convex", "prosumer " + std::to_string(p.id) + " has alpha <= 0");
        a = std::min(a, link.alpha);
    }
    return 2.0 * a;
}

struct LipschitzConstants
{
    std::vector<double> per_prosumer; // L_i = 1 / m_i
    double total = 0.0;               // L = sum_i L_i
    double max = 0.0;                 // L-bar = max_i L_i
};

inline LipschitzConstants lipschitz_constants(const std::vector<double>& moduli)
{
    LipschitzConstants out;
    out.per_prosumer.reserve(moduli.size());
    for (double m : moduli) {
        if (!(m > 0.0)) throw InvariantError("modulus_positive", "strong convexity modulus must be positive");
        const double li = std::isinf(m) ? 0.0 : 1.0 / m;
        out.per_prosumer.push_back(li);
        out.total += li;
        out.max = std::max(out.max, li);
    }
    return out;
}

// Undirected trading connection, first < second.
struct Edge
{
    std::size_t first = 0;
    std::size_t second = 0;

    friend bool operator==(const Edge&, const Edge&) = default;
};

// Peer slot of prosumer i, resolved against the edge list.
struct LinkRef
{
    std::size_t peer = 0;
    std::size_t edge = 0;
    std::size_t reverse_slot = 0; // slot of i in the peer's list
};

class Scenario
{
public:
    Scenario() = default;

    Scenario(TimeGrid grid, std::vector<ProsumerModel> prosumers, std::vector<Edge> edges, WholesalePrices prices)
        : grid_(grid), prosumers_(std::move(prosumers)), edges_(std::move(edges)), prices_(std::move(prices))
    {
        validate();
        index();
    }

    const TimeGrid& grid() const { return grid_; }
    std::size_t horizon() const { return grid_.horizon; }
    std::size_t size() const { return prosumers_.size(); }
    const std::vector<ProsumerModel>& prosumers() const { return prosumers_; }
    const ProsumerModel& prosumer(std::size_t i) const { return prosumers_.at(i); }
    const std::vector<Edge>& edges() const { return edges_; }
    const WholesalePrices& prices() const { return prices_; }
    const std::vector<LinkRef>& links(std::size_t i) const { return links_.at(i); }

    // Directed link (i -> slot k) as a flat index in [0, num_directed_links()).
    std::size_t directed_link(std::size_t i, std::size_t slot) const { return link_offset_[i] + slot; }
    std::size_t num_directed_links() const { return link_offset_.back(); }

    const std::vector<double>& moduli() const { return moduli_; }
    const LipschitzConstants& lipschitz() const { return lipschitz_; }

    std::size_t max_degree() const
    {
        std::size_t d = 0;
        for (const auto& p : prosumers_) d = std::max(d, p.num_peers());
        return d;
    }

    friend bool operator==(const Scenario& a, const Scenario& b)
    {
        auto same = [](const Vector& x, const Vector& y) { return x.size() == y.size() && x == y; };
        if (a.grid_.horizon != b.grid_.horizon || a.edges_ != b.edges_ || a.size() != b.size()) return false;
        if (!same(a.prices_.buy, b.prices_.buy) || !same(a.prices_.sell, b.prices_.sell)) return false;
        for (std::size_t i = 0; i < a.size(); ++i) {
            const auto& p = a.prosumers_[i];
            const auto& q = b.prosumers_[i];
            const auto& s = p.storage;
            const auto& r = q.storage;
            if (p.id != q.id || p.daily_load_min != q.daily_load_min) return false;
            if (!same(p.utility_quadratic, q.utility_quadratic) || !same(p.utility_linear, q.utility_linear) ||
                !same(p.load_min, q.load_min) || !same(p.load_max, q.load_max) ||
                !same(p.exchange_min, q.exchange_min) || !same(p.exchange_max, q.exchange_max) || !same(p.pv, q.pv))
                return false;
            if (s.capacity != r.capacity || s.soc_min != r.soc_min || s.soc_max != r.soc_max ||
                s.soc_boundary != r.soc_boundary || s.eff_charge != r.eff_charge ||
                s.eff_discharge != r.eff_discharge || s.charge_max != r.charge_max ||
                s.discharge_max != r.discharge_max || s.aging_cost != r.aging_cost)
                return false;
            if (p.peers.size() != q.peers.size()) return false;
            for (std::size_t k = 0; k < p.peers.size(); ++k)
                if (p.peers[k].id != q.peers[k].id || p.peers[k].alpha != q.peers[k].alpha ||
                    p.peers[k].beta != q.peers[k].beta)
                    return false;
        }
        return true;
    }

private:
    void validate() const
    {
        const auto T = static_cast<Eigen::Index>(grid_.horizon);
        if (T < 1) throw InvariantError("horizon_positive", "the horizon must contain at least one period");
        if (prices_.buy.size() != T || prices_.sell.size() != T)
            throw StructuralError("wholesale price series length differs from the horizon");
        for (Eigen::Index t = 0; t < T; ++t) {
            if (!(prices_.sell[t] >= 0.0) || !(prices_.buy[t] >= prices_.sell[t]))
                throw InvariantError("buy_price_at_least_sell_price",
                                     "period " + std::to_string(t + 1) + " needs buy >= sell >= 0");
        }
        for (std::size_t i = 0; i < prosumers_.size(); ++i) {
            const auto& p = prosumers_[i];
            if (p.id != i) throw InvariantError("prosumer_ids_dense", "prosumer ids must equal their position");
            if (p.horizon() != grid_.horizon) throw StructuralError("prosumer horizon differs from the time grid");
            p.validate();
        }
        // Symmetry of the peer relation and consistency with the edge list.
        std::vector<std::vector<std::size_t>> from_edges(prosumers_.size());
        for (std::size_t e = 0; e < edges_.size(); ++e) {
            const auto& [a, b] = edges_[e];
            if (!(a < b) || b >= prosumers_.size())
                throw InvariantError("edge_well_formed", "edge " + std::to_string(e) + " must have first < second < I");
            if (e > 0 && !(edges_[e - 1].first < a || (edges_[e - 1].first == a && edges_[e - 1].second < b)))
                throw InvariantError("edges_sorted_unique", "edges must be sorted and unique");
            from_edges[a].push_back(b);
            from_edges[b].push_back(a);
        }
        for (std::size_t i = 0; i < prosumers_.size(); ++i) {
            auto& expect = from_edges[i];
            std::sort(expect.begin(), expect.end());
            const auto& peers = prosumers_[i].peers;
            if (peers.size() != expect.size())
                throw InvariantError("peers_match_edges", "prosumer " + std::to_string(i) + " peer list disagrees with edges");
            for (std::size_t k = 0; k < peers.size(); ++k)
                if (peers[k].id != expect[k])
                    throw InvariantError("peers_match_edges",
                                         "prosumer " + std::to_string(i) + " peer list disagrees with edges");
        }
    }

    void index()
    {
        const std::size_t I = prosumers_.size();
        links_.assign(I, {});
        link_offset_.assign(I + 1, 0);
        for (std::size_t i = 0; i < I; ++i) {
            links_[i].resize(prosumers_[i].num_peers());
            link_offset_[i + 1] = link_offset_[i] + prosumers_[i].num_peers();
        }
        auto slot_of = [&](std::size_t i, std::size_t j) {
            const auto& peers = prosumers_[i].peers;
            auto it = std::lower_bound(peers.begin(), peers.end(), j,
                                       [](const PeerLink& l, std::size_t id) { return l.id < id; });
            return static_cast<std::size_t>(it - peers.begin());
        };
        for (std::size_t e = 0; e < edges_.size(); ++e) {
            const auto [a, b] = edges_[e];
            const auto sa = slot_of(a, b);
            const auto sb = slot_of(b, a);
            links_[a][sa] = {b, e, sb};
            links_[b][sb] = {a, e, sa};
        }
        moduli_.clear();
        for (const auto& p : prosumers_) moduli_.push_back(strong_convexity_modulus(p));
        lipschitz_ = lipschitz_constants(moduli_);
    }

    TimeGrid grid_;
    std::vector<ProsumerModel> prosumers_;
    std::vector<Edge> edges_;
    WholesalePrices prices_;
    std::vector<std::vector<LinkRef>> links_;
    std::vector<std::size_t> link_offset_{0};
    std::vector<double> moduli_;
    LipschitzConstants lipschitz_;
};

inline LipschitzConstants lipschitz_constants(const Scenario& s) { return s.lipschitz(); }

// Step-size ceilings: 2/L for synchronous and edge-activated negotiation,
// (L/2 + 2 kbar L-bar)^-1 for node-activated negotiation.
inline double edge_step_bound(const LipschitzConstants& c) { return 2.0 / c.total; }

inline double node_step_bound(const LipschitzConstants& c, std::size_t staleness_cap)
{
    return 1.0 / (c.total / 2.0 + 2.0 * static_cast<double>(staleness_cap) * c.max);
}

} // namespace peertrade
