#pragma once
#include <cstddef>
#include <optional>
#include <utility>
#include <vector>

#include "model.hpp"
#include "qp.hpp"

// Prosumer best response: min J_i(x_i, t_i) + sum_j <lambda_ij, t_ij> over Omega_i.
//
// The exchange and every trade are split into nonnegative parts so that the
// kinks of [p]+/[p]- and |t| become linear costs:
//   p_ex = buy - sell,     cost q_b buy - q_s sell
//   t_ij = tp - tn,        cost alpha (tp - tn)^2 + beta (tp + tn) + lambda (tp - tn)
// With alpha > 0, beta >= 0 and q_b >= q_s nothing is gained by running both
// parts at once, so the split matches the original cost at the optimum.

namespace peertrade {

// lambda_ij seen by prosumer i, one series per peer slot.
using DualPriceView = std::vector<Vector>;

inline DualPriceView zero_prices(const ProsumerModel& p)
{
    return DualPriceView(p.num_peers(), Vector::Zero(static_cast<Eigen::Index>(p.horizon())));
}

// Column offsets of the local QP variables.
struct LocalLayout
{
    Eigen::Index T = 0;
    Eigen::Index peers = 0;

    Eigen::Index load(Eigen::Index t) const { return t; }
    Eigen::Index charge(Eigen::Index t) const { return T + t; }
    Eigen::Index discharge(Eigen::Index t) const { return 2 * T + t; }
    Eigen::Index soc(Eigen::Index t) const { return 3 * T + t; }
    Eigen::Index buy(Eigen::Index t) const { return 4 * T + t; }
    Eigen::Index sell(Eigen::Index t) const { return 5 * T + t; }
    Eigen::Index trade_pos(Eigen::Index k, Eigen::Index t) const { return 6 * T + 2 * k * T + t; }
    Eigen::Index trade_neg(Eigen::Index k, Eigen::Index t) const { return 6 * T + 2 * k * T + T + t; }
    Eigen::Index size() const { return 6 * T + 2 * peers * T; }
};

inline LocalLayout layout_of(const ProsumerModel& p)
{
    return {static_cast<Eigen::Index>(p.horizon()), static_cast<Eigen::Index>(p.num_peers())};
}

namespace detail {

inline void check_prices(const ProsumerModel& p, const DualPriceView& lambda)
{
    if (lambda.size() != p.num_peers()) throw StructuralError("price view has the wrong number of peers");
    for (const auto& l : lambda)
        if (l.size() != static_cast<Eigen::Index>(p.horizon()))
            throw StructuralError("price view series length differs from the horizon");
}

inline Vector local_linear_cost(const ProsumerModel& p, const WholesalePrices& w, const DualPriceView& lambda)
{
    const auto L = layout_of(p);
    Vector q = Vector::Zero(L.size());
    for (Eigen::Index t = 0; t < L.T; ++t) {
        q[L.load(t)] = -p.utility_linear[t];
        q[L.charge(t)] = p.storage.aging_cost;
        q[L.discharge(t)] = p.storage.aging_cost;
        q[L.buy(t)] = w.buy[t];
        q[L.sell(t)] = -w.sell[t];
    }
    for (Eigen::Index k = 0; k < L.peers; ++k) {
        const double beta = p.peers[static_cast<std::size_t>(k)].beta;
        for (Eigen::Index t = 0; t < L.T; ++t) {
            const double lam = lambda[static_cast<std::size_t>(k)][t];
            q[L.trade_pos(k, t)] = beta + lam;
            q[L.trade_neg(k, t)] = beta - lam;
        }
    }
    return q;
}

} // namespace detail

inline QpProblem assemble_local(const ProsumerModel& p, const WholesalePrices& w, const DualPriceView& lambda)
{
    detail::check_prices(p, lambda);
    const auto L = layout_of(p);
    const auto T = L.T;
    const auto& s = p.storage;
    const auto n = L.size();

    QpProblem qp;
    std::vector<Triplet> P;
    for (Eigen::Index t = 0; t < T; ++t) P.emplace_back(L.load(t), L.load(t), -2.0 * p.utility_quadratic[t]);
    for (Eigen::Index k = 0; k < L.peers; ++k) {
        const double a2 = 2.0 * p.peers[static_cast<std::size_t>(k)].alpha;
        for (Eigen::Index t = 0; t < T; ++t) {
            const auto ip = L.trade_pos(k, t), in = L.trade_neg(k, t);
            P.emplace_back(ip, ip, a2);
            P.emplace_back(in, in, a2);
            P.emplace_back(ip, in, -a2);
            P.emplace_back(in, ip, -a2);
        }
    }
    qp.P.resize(n, n);
    qp.P.setFromTriplets(P.begin(), P.end());
    qp.q = detail::local_linear_cost(p, w, lambda);

    // Equalities: power balance (T), SOC recursion (T), terminal SOC (1).
    std::vector<Triplet> A;
    qp.b = Vector::Zero(2 * T + 1);
    for (Eigen::Index t = 0; t < T; ++t) {
        // buy - sell - load - ch + dis - sum_j t_ij = -pv
        A.emplace_back(t, L.buy(t), 1.0);
        A.emplace_back(t, L.sell(t), -1.0);
        A.emplace_back(t, L.load(t), -1.0);
        A.emplace_back(t, L.charge(t), -1.0);
        A.emplace_back(t, L.discharge(t), 1.0);
        for (Eigen::Index k = 0; k < L.peers; ++k) {
            A.emplace_back(t, L.trade_pos(k, t), -1.0);
            A.emplace_back(t, L.trade_neg(k, t), 1.0);
        }
        qp.b[t] = -p.pv[t];

        const auto r = T + t;
        A.emplace_back(r, L.soc(t), 1.0);
        if (t > 0) A.emplace_back(r, L.soc(t - 1), -1.0);
        A.emplace_back(r, L.charge(t), -s.eff_charge);
        A.emplace_back(r, L.discharge(t), s.eff_discharge);
        qp.b[r] = t == 0 ? s.soc_boundary : 0.0;
    }
    A.emplace_back(2 * T, L.soc(T - 1), 1.0);
    qp.b[2 * T] = s.soc_boundary;
    qp.A.resize(2 * T + 1, n);
    qp.A.setFromTriplets(A.begin(), A.end());

    // Inequalities: daily load (1), exchange box (T), then one row per variable.
    const auto m = 1 + T + n;
    std::vector<Triplet> C;
    qp.l.resize(m);
    qp.u.resize(m);
    for (Eigen::Index t = 0; t < T; ++t) C.emplace_back(0, L.load(t), 1.0);
    qp.l[0] = p.daily_load_min;
    qp.u[0] = inf;
    for (Eigen::Index t = 0; t < T; ++t) {
        C.emplace_back(1 + t, L.buy(t), 1.0);
        C.emplace_back(1 + t, L.sell(t), -1.0);
        qp.l[1 + t] = p.exchange_min[t];
        qp.u[1 + t] = p.exchange_max[t];
    }
    for (Eigen::Index j = 0; j < n; ++j) {
        C.emplace_back(1 + T + j, j, 1.0);
        qp.l[1 + T + j] = 0.0;
        qp.u[1 + T + j] = inf;
    }
    auto bound = [&](Eigen::Index col, double lo, double hi) {
        qp.l[1 + T + col] = lo;
        qp.u[1 + T + col] = hi;
    };
    for (Eigen::Index t = 0; t < T; ++t) {
        bound(L.load(t), p.load_min[t], p.load_max[t]);
        bound(L.charge(t), 0.0, s.charge_max);
        bound(L.discharge(t), 0.0, s.discharge_max);
        bound(L.soc(t), s.soc_min, s.soc_max);
    }
    qp.C.resize(m, n);
    qp.C.setFromTriplets(C.begin(), C.end());
    return qp;
}

inline LocalDecision decode_local(const ProsumerModel& p, const Vector& x)
{
    const auto L = layout_of(p);
    if (x.size() != L.size()) throw StructuralError("local solution has the wrong length");
    auto d = LocalDecision::zeros(p.horizon(), p.num_peers());
    for (Eigen::Index t = 0; t < L.T; ++t) {
        d.load[t] = x[L.load(t)];
        d.charge[t] = x[L.charge(t)];
        d.discharge[t] = x[L.discharge(t)];
        d.soc[t] = x[L.soc(t)];
        d.exchange[t] = x[L.buy(t)] - x[L.sell(t)];
        for (Eigen::Index k = 0; k < L.peers; ++k)
            d.trades[static_cast<std::size_t>(k)][t] = x[L.trade_pos(k, t)] - x[L.trade_neg(k, t)];
    }
    return d;
}

inline double price_inner(const DualPriceView& lambda, const std::vector<Vector>& trades)
{
    double s = 0.0;
    for (std::size_t k = 0; k < lambda.size(); ++k) s += lambda[k].dot(trades[k]);
    return s;
}

struct BestResponse
{
    LocalDecision decision;
    double objective = 0.0; // J_i + <lambda_i, t_i>
    QpStatus status = QpStatus::max_iter;
    QpWarmStart warm;
};

// Reusable best-response oracle for one prosumer. The constraint data never
// change between rounds, only the linear cost, so one factorization serves
// every solve. Not re-entrant.
class LocalSolver
{
public:
    LocalSolver(const ProsumerModel& prosumer, const WholesalePrices& prices, QpSettings settings = {})
        : prosumer_(&prosumer), prices_(&prices),
          solver_(assemble_local(prosumer, prices, zero_prices(prosumer)), settings)
    {}

    const ProsumerModel& prosumer() const { return *prosumer_; }

    BestResponse solve(const DualPriceView& lambda, const QpWarmStart* warm = nullptr)
    {
        const auto& p = *prosumer_;
        detail::check_prices(p, lambda);
        solver_.update_linear_cost(detail::local_linear_cost(p, *prices_, lambda));
        auto sol = solver_.solve(warm);
        if (sol.status != QpStatus::solved)
            throw SolverError("best response of prosumer " + std::to_string(p.id) + " ended with status " +
                              to_string(sol.status));
        BestResponse br;
        br.decision = decode_local(p, sol.x);
        br.objective = evaluate_cost(p, *prices_, br.decision) + price_inner(lambda, br.decision.trades);
        br.status = sol.status;
        br.warm = sol.warm_start();
        return br;
    }

private:
    const ProsumerModel* prosumer_;
    const WholesalePrices* prices_;
    QpSolver solver_;
};

inline BestResponse solve_local(const ProsumerModel& p, const WholesalePrices& w, const DualPriceView& lambda,
                                const QpSettings& settings = {}, const QpWarmStart* warm = nullptr)
{
    LocalSolver solver(p, w, settings);
    return solver.solve(lambda, warm);
}

// D_i(lambda_i).
inline double dual_value(const ProsumerModel& p, const WholesalePrices& w, const DualPriceView& lambda,
                         const QpSettings& settings = {})
{
    return solve_local(p, w, lambda, settings).objective;
}

// grad D_i(lambda_i) = t_i at the best response.
inline std::vector<Vector> dual_gradient(const ProsumerModel& p, const WholesalePrices& w,
                                         const DualPriceView& lambda, const QpSettings& settings = {})
{
    return solve_local(p, w, lambda, settings).decision.trades;
}

} // namespace peertrade
