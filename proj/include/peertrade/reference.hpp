#pragma once
#include <cstddef>
#include <vector>

#include "local.hpp"
#include "model.hpp"
#include "qp.hpp"

// Centralized solution of the social cost problem: every prosumer's local
// program side by side, coupled by t_ij + t_ji = 0 for every edge. The
// coupling multipliers are the equilibrium prices, in the same sign
// convention as the negotiated lambda (a positive lambda_ij is paid by the
// exporting side).

namespace peertrade {

struct ReferenceSolution
{
    std::vector<LocalDecision> decisions; // x*, t* per prosumer
    std::vector<Vector> prices;           // lambda* per edge
    double objective = 0.0;               // sum_i J_i
    double primal_residual = 0.0;
    double dual_residual = 0.0;
    double complementarity_residual = 0.0;
    int iterations = 0;
};

inline constexpr Eigen::Index reference_variable_limit = 100000;

inline ReferenceSolution reference_solution(const Scenario& s, QpSettings settings = {})
{
    const std::size_t I = s.size();
    const auto T = static_cast<Eigen::Index>(s.horizon());

    std::vector<QpProblem> blocks;
    std::vector<Eigen::Index> col(I + 1, 0), eq(I + 1, 0), ineq(I + 1, 0);
    blocks.reserve(I);
    for (std::size_t i = 0; i < I; ++i) {
        const auto& p = s.prosumer(i);
        blocks.push_back(assemble_local(p, s.prices(), zero_prices(p)));
        col[i + 1] = col[i] + blocks[i].num_variables();
        eq[i + 1] = eq[i] + blocks[i].num_equalities();
        ineq[i + 1] = ineq[i] + blocks[i].num_inequalities();
    }
    const Eigen::Index n = col[I];
    if (n > reference_variable_limit)
        throw StructuralError("reference problem has " + std::to_string(n) + " variables, above the limit of " +
                              std::to_string(reference_variable_limit));
    const auto coupling = static_cast<Eigen::Index>(s.edges().size()) * T;

    std::vector<Triplet> P, A, C;
    QpProblem qp;
    qp.q.resize(n);
    qp.b.resize(eq[I] + coupling);
    qp.l.resize(ineq[I]);
    qp.u.resize(ineq[I]);
    auto append = [](std::vector<Triplet>& out, const SparseMatrix& m, Eigen::Index r0, Eigen::Index c0) {
        for (int k = 0; k < m.outerSize(); ++k)
            for (SparseMatrix::InnerIterator it(m, k); it; ++it)
                out.emplace_back(static_cast<int>(r0 + it.row()), static_cast<int>(c0 + it.col()), it.value());
    };
    for (std::size_t i = 0; i < I; ++i) {
        const auto& b = blocks[i];
        append(P, b.P, col[i], col[i]);
        append(A, b.A, eq[i], col[i]);
        append(C, b.C, ineq[i], col[i]);
        qp.q.segment(col[i], b.num_variables()) = b.q;
        qp.b.segment(eq[i], b.num_equalities()) = b.b;
        qp.l.segment(ineq[i], b.num_inequalities()) = b.l;
        qp.u.segment(ineq[i], b.num_inequalities()) = b.u;
    }
    for (std::size_t e = 0; e < s.edges().size(); ++e) {
        const auto [a, c] = s.edges()[e];
        const auto& la = s.links(a);
        std::size_t slot_a = 0;
        while (la[slot_a].peer != c) ++slot_a;
        const std::size_t slot_c = la[slot_a].reverse_slot;
        const auto La = layout_of(s.prosumer(a));
        const auto Lc = layout_of(s.prosumer(c));
        for (Eigen::Index t = 0; t < T; ++t) {
            const auto row = eq[I] + static_cast<Eigen::Index>(e) * T + t;
            const auto ka = static_cast<Eigen::Index>(slot_a), kc = static_cast<Eigen::Index>(slot_c);
            A.emplace_back(static_cast<int>(row), static_cast<int>(col[a] + La.trade_pos(ka, t)), 1.0);
            A.emplace_back(static_cast<int>(row), static_cast<int>(col[a] + La.trade_neg(ka, t)), -1.0);
            A.emplace_back(static_cast<int>(row), static_cast<int>(col[c] + Lc.trade_pos(kc, t)), 1.0);
            A.emplace_back(static_cast<int>(row), static_cast<int>(col[c] + Lc.trade_neg(kc, t)), -1.0);
            qp.b[row] = 0.0;
        }
    }
    qp.P.resize(n, n);
    qp.P.setFromTriplets(P.begin(), P.end());
    qp.A.resize(eq[I] + coupling, n);
    qp.A.setFromTriplets(A.begin(), A.end());
    qp.C.resize(ineq[I], n);
    qp.C.setFromTriplets(C.begin(), C.end());

    settings.max_iter = std::max(settings.max_iter, 200000);
    const auto sol = solve_qp(qp, settings);
    if (sol.status != QpStatus::solved)
        throw SolverError(std::string("reference problem ended with status ") + to_string(sol.status));

    ReferenceSolution ref;
    ref.primal_residual = sol.primal_residual;
    ref.dual_residual = sol.dual_residual;
    ref.complementarity_residual = sol.complementarity_residual;
    ref.iterations = sol.iterations;
    for (std::size_t i = 0; i < I; ++i) {
        const auto& p = s.prosumer(i);
        ref.decisions.push_back(decode_local(p, sol.x.segment(col[i], blocks[i].num_variables())));
        ref.objective += evaluate_cost(p, s.prices(), ref.decisions.back());
    }
    for (std::size_t e = 0; e < s.edges().size(); ++e)
        ref.prices.push_back(sol.y.segment(eq[I] + static_cast<Eigen::Index>(e) * T, T));
    return ref;
}

// I^-1 sum_i ||x_i - x_i*|| + ||t_i - t_i*||, where the trades passed in are
// the communicated records.
inline double optimality_gap(const std::vector<Vector>& schedules, const std::vector<Vector>& trades,
                             const ReferenceSolution& ref)
{
    const std::size_t I = ref.decisions.size();
    if (schedules.size() != I || trades.size() != I) throw StructuralError("gap: prosumer count differs");
    double g = 0.0;
    for (std::size_t i = 0; i < I; ++i) {
        const Vector xs = ref.decisions[i].schedule();
        const Vector ts = ref.decisions[i].stacked_trades();
        if (schedules[i].size() != xs.size() || trades[i].size() != ts.size())
            throw StructuralError("gap: dimensions differ from the reference");
        g += (schedules[i] - xs).norm() + (trades[i] - ts).norm();
    }
    return g / static_cast<double>(I);
}

} // namespace peertrade
