#pragma once
#include <Eigen/Sparse>
#include <Eigen/SparseCholesky>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <vector>

#include "errors.hpp"

// Convex quadratic programs of the form
//
//     minimize    1/2 x'Px + q'x
//     subject to  Ax = b,   l <= Cx <= u
//
// solved by operator splitting (ADMM on the stacked constraint matrix, with
// Ruiz equilibration and over-relaxation) followed by an active-set polish
// step that re-solves the equality-constrained KKT system exactly. When the
// splitting stalls (nearly linear programs are prone to it) a primal-dual
// interior point method takes over from a cold start.
//
// Sign convention for the multipliers: Px + q + A'y + C'z = 0, with z_i >= 0
// when row i sits at its upper bound and z_i <= 0 at its lower bound.

namespace peertrade {

using Vector = Eigen::VectorXd;
using SparseMatrix = Eigen::SparseMatrix<double>;
using Triplet = Eigen::Triplet<double>;

inline constexpr double inf = std::numeric_limits<double>::infinity();

struct QpProblem
{
    SparseMatrix P; // symmetric, full storage
    Vector q;
    SparseMatrix A; // equality rows
    Vector b;
    SparseMatrix C; // inequality rows
    Vector l;
    Vector u;

    Eigen::Index num_variables() const { return q.size(); }
    Eigen::Index num_equalities() const { return b.size(); }
    Eigen::Index num_inequalities() const { return l.size(); }

    double objective(const Vector& x) const { return 0.5 * x.dot(P * x) + q.dot(x); }

    void validate() const
    {
        const auto n = q.size();
        if (P.rows() != n || P.cols() != n)
            throw StructuralError("qp: P must be n x n with n = size of q");
        if (b.size() > 0 && (A.rows() != b.size() || A.cols() != n))
            throw StructuralError("qp: A must be size(b) x n");
        if (l.size() != u.size())
            throw StructuralError("qp: l and u differ in length");
        if (l.size() > 0 && (C.rows() != l.size() || C.cols() != n))
            throw StructuralError("qp: C must be size(l) x n");
        for (Eigen::Index i = 0; i < l.size(); ++i) {
            if (std::isnan(l[i]) || std::isnan(u[i]) || l[i] > u[i])
                throw StructuralError("qp: inequality bounds must satisfy l <= u");
        }
        if (!q.allFinite() || (b.size() > 0 && !b.allFinite()))
            throw StructuralError("qp: q and b must be finite");
        const SparseMatrix asym = SparseMatrix(P.transpose()) - P;
        if (asym.size() > 0 && asym.norm() > 1e-12 * (1.0 + P.norm()))
            throw StructuralError("qp: P must be symmetric");
    }
};

enum class QpStatus { solved, max_iter, infeasible };

inline const char* to_string(QpStatus s)
{
    switch (s) {
    case QpStatus::solved: return "solved";
    case QpStatus::max_iter: return "max_iter";
    case QpStatus::infeasible: return "infeasible";
    }
    return "unknown";
}

struct QpSettings
{
    double abs_tol = 1e-7;
    double rel_tol = 0.0;
    int max_iter = 20000;
    double rho = 0.1;
    double sigma = 1e-6;
    double alpha = 1.6;
    int scaling_iters = 10;
    bool adaptive_rho = true;
    bool polish = true;
    int check_every = 10;
    double infeasibility_tol = 1e-6;
};

struct QpWarmStart
{
    Vector x;
    Vector y; // equality multipliers
    Vector z; // inequality multipliers
};

struct QpSolution
{
    Vector x;
    Vector y;
    Vector z;
    QpStatus status = QpStatus::max_iter;
    double primal_residual = inf;
    double dual_residual = inf;
    double complementarity_residual = inf;
    double objective = inf;
    int iterations = 0;
    bool polished = false;

    QpWarmStart warm_start() const { return {x, y, z}; }
};

struct KktResiduals
{
    double primal = 0.0;
    double dual = 0.0;
    double complementarity = 0.0;
};

namespace detail {

inline double inf_norm(const Vector& v) { return v.size() == 0 ? 0.0 : v.lpNorm<Eigen::Infinity>(); }

// Distance of row value `cx` from the bound its multiplier sign points at.
inline double complementarity_term(double mult, double cx, double lo, double hi)
{
    if (mult > 0.0) return std::min(mult, std::isfinite(hi) ? std::abs(hi - cx) : inf);
    if (mult < 0.0) return std::min(-mult, std::isfinite(lo) ? std::abs(cx - lo) : inf);
    return 0.0;
}

inline double bound_violation(double v, double lo, double hi)
{
    return std::max({0.0, v - hi, lo - v});
}

} // namespace detail

inline KktResiduals kkt_residuals(const QpProblem& p, const Vector& x, const Vector& y, const Vector& z)
{
    if (x.size() != p.num_variables() || y.size() != p.num_equalities() || z.size() != p.num_inequalities())
        throw StructuralError("kkt_residuals: solution does not match problem dimensions");
    KktResiduals r;
    Vector stat = p.P * x + p.q;
    if (p.num_equalities() > 0) {
        const Vector ax = p.A * x;
        r.primal = detail::inf_norm(ax - p.b);
        stat.noalias() += p.A.transpose() * y;
    }
    if (p.num_inequalities() > 0) {
        const Vector cx = p.C * x;
        for (Eigen::Index i = 0; i < cx.size(); ++i) {
            r.primal = std::max(r.primal, detail::bound_violation(cx[i], p.l[i], p.u[i]));
            r.complementarity =
                std::max(r.complementarity, detail::complementarity_term(z[i], cx[i], p.l[i], p.u[i]));
        }
        stat.noalias() += p.C.transpose() * z;
    }
    r.dual = detail::inf_norm(stat);
    return r;
}

inline KktResiduals kkt_residuals(const QpProblem& p, const QpSolution& s)
{
    return kkt_residuals(p, s.x, s.y, s.z);
}

// Reusable solver for one problem structure. Construction equilibrates the
// data and factors the ADMM system once; `update_linear_cost` swaps q without
// refactoring. The result of `solve` depends only on the problem data, the
// settings, and the warm start passed in; internal factorization caches never
// change the arithmetic. Not re-entrant.
class QpSolver
{
public:
    explicit QpSolver(QpProblem problem, QpSettings settings = {})
        : problem_(std::move(problem)), settings_(settings)
    {
        problem_.validate();
        if (settings_.abs_tol <= 0.0 || settings_.rel_tol < 0.0 || settings_.max_iter < 1)
            throw ConfigError("qp: tolerances must be positive and max_iter >= 1");
        n_ = problem_.num_variables();
        me_ = problem_.num_equalities();
        m_ = me_ + problem_.num_inequalities();
        stack_constraints();
        equilibrate();
        qbar_ = cost_scale_ * D_.cwiseProduct(problem_.q);
        base_rho_ = rho_vector(settings_.rho);
        build_kkt_pattern();
        factor(base_factor_, base_rho_);
    }

    const QpProblem& problem() const { return problem_; }
    const QpSettings& settings() const { return settings_; }

    void update_linear_cost(const Vector& q)
    {
        if (q.size() != n_) throw StructuralError("qp: linear cost has wrong length");
        if (!q.allFinite()) throw StructuralError("qp: linear cost must be finite");
        problem_.q = q;
        qbar_ = cost_scale_ * D_.cwiseProduct(q);
    }

    // Splitting first; if it stalls, interior point from a cold start.
    QpSolution solve(const QpWarmStart* warm = nullptr)
    {
        QpSolution out = solve_impl(warm, settings_.adaptive_rho);
        if (out.status != QpStatus::max_iter) return out;
        QpSolution ip = interior_point();
        ip.iterations += out.iterations;
        if (ip.status == QpStatus::solved ||
            std::max(ip.primal_residual, ip.dual_residual) < std::max(out.primal_residual, out.dual_residual))
            return ip;
        return out;
    }

private:
    QpSolution solve_impl(const QpWarmStart* warm, bool adaptive)
    {
        const bool has_warm = warm != nullptr && warm->x.size() == n_ && warm->y.size() == me_ &&
                              warm->z.size() == m_ - me_;

        Vector xs = Vector::Zero(n_);
        Vector ys = Vector::Zero(m_);
        Vector zs = Vector::Zero(m_);
        if (has_warm) {
            xs = warm->x.cwiseQuotient(D_);
            Vector yfull(m_);
            yfull << warm->y, warm->z;
            ys = cost_scale_ * yfull.cwiseQuotient(E_);
        }
        zs = project(Mbar_ * xs);

        if (settings_.polish && has_warm) {
            auto polished = polish_with_corrections(classify(xs, zs, ys), xs, ys);
            if (polished && accepted(*polished)) return *std::move(polished);
        }

        Vector rho = base_rho_;
        double rho_now = settings_.rho;
        Factor* fac = &base_factor_;
        Vector rhs(n_ + m_), sol(n_ + m_), xt(n_), zt(m_), zrelax(m_), ynew(m_), dy = Vector::Zero(m_);
        const double alpha = settings_.alpha;
        const double sigma = settings_.sigma;
        QpStatus status = QpStatus::max_iter;
        std::vector<std::int8_t> last_attempt;
        int iter = 0;
        int next_adapt = 5 * settings_.check_every;
        int changes = 0;

        for (iter = 1; iter <= settings_.max_iter; ++iter) {
            rhs.head(n_) = sigma * xs - qbar_;
            rhs.tail(m_) = zs - ys.cwiseQuotient(rho);
            sol = fac->ldlt.solve(rhs);
            xt = sol.head(n_);
            zt = zs + (sol.tail(m_) - ys).cwiseQuotient(rho);
            xs = alpha * xt + (1.0 - alpha) * xs;
            zrelax = alpha * zt + (1.0 - alpha) * zs;
            zs = project(zrelax + ys.cwiseQuotient(rho));
            ynew = ys + rho.cwiseProduct(zrelax - zs);
            dy = ynew - ys;
            ys = ynew;

            if (iter % settings_.check_every != 0 && iter != settings_.max_iter) continue;

            const Residuals r = residuals(xs, zs, ys);
            if (r.primal <= r.primal_tol && r.dual <= r.dual_tol) {
                status = QpStatus::solved;
                break;
            }
            if (primal_infeasible(dy)) {
                status = QpStatus::infeasible;
                break;
            }
            // Near the tolerance, and now and then during a slow tail, the
            // active set is often already right.
            const bool near = r.primal <= 1e3 * r.primal_tol && r.dual <= 1e3 * r.dual_tol;
            if (settings_.polish && (near || iter % (50 * settings_.check_every) == 0)) {
                auto active = classify(xs, zs, ys);
                if (active != last_attempt) {
                    auto polished = polish_with_corrections(active, xs, ys);
                    if (polished && accepted(*polished)) {
                        polished->iterations = iter;
                        return *std::move(polished);
                    }
                    last_attempt = std::move(active);
                }
            }
            // Each change of rho doubles the wait before the next one.
            if (adaptive && iter >= next_adapt && changes < 6) {
                next_adapt = iter + (5 * settings_.check_every << changes);
                const double scale = adapted_rho_scale(xs, zs, ys, r);
                if (scale > 5.0 || scale < 0.2) {
                    ++changes;
                    const double current = rho_now;
                    const double next = std::clamp(current * scale, 1e-6, 1e6);
                    if (next != current) {
                        rho_now = next;
                        rho = rho_vector(next);
                        if (next == settings_.rho) {
                            fac = &base_factor_;
                        } else {
                            if (adapted_factor_rho_ != next) {
                                factor(adapted_factor_, rho);
                                adapted_factor_rho_ = next;
                            }
                            fac = &adapted_factor_;
                        }
                    }
                }
            }
        }

        if (status == QpStatus::solved && settings_.polish) {
            auto polished = polish_with_corrections(classify(xs, zs, ys), xs, ys);
            if (polished && accepted(*polished)) {
                polished->iterations = iter;
                return *std::move(polished);
            }
        }

        QpSolution out = unscale(xs, ys);
        out.iterations = std::min(iter, settings_.max_iter);
        if (status == QpStatus::infeasible) {
            out.status = QpStatus::infeasible;
        } else {
            out.status = within_tolerance(out) ? QpStatus::solved : QpStatus::max_iter;
        }
        return out;
    }

public:
    // Tolerance thresholds in the original units for a candidate x, y, z.
    std::pair<double, double> tolerances(const Vector& x, const Vector& y, const Vector& z) const
    {
        double pscale = 0.0, dscale = detail::inf_norm(problem_.q);
        dscale = std::max(dscale, detail::inf_norm(problem_.P * x));
        if (me_ > 0) {
            pscale = std::max({pscale, detail::inf_norm(problem_.A * x), detail::inf_norm(problem_.b)});
            dscale = std::max(dscale, detail::inf_norm(problem_.A.transpose() * y));
        }
        if (m_ > me_) {
            pscale = std::max(pscale, detail::inf_norm(problem_.C * x));
            dscale = std::max(dscale, detail::inf_norm(problem_.C.transpose() * z));
        }
        return {settings_.abs_tol + settings_.rel_tol * pscale, settings_.abs_tol + settings_.rel_tol * dscale};
    }

private:
    struct Factor
    {
        Eigen::SimplicialLDLT<SparseMatrix, Eigen::Lower, Eigen::AMDOrdering<int>> ldlt;
        bool analyzed = false;
    };

    struct Residuals
    {
        double primal, dual, primal_tol, dual_tol;
    };

    void stack_constraints()
    {
        std::vector<Triplet> trip;
        trip.reserve(static_cast<std::size_t>(problem_.A.nonZeros() + problem_.C.nonZeros()));
        lo_.resize(m_);
        hi_.resize(m_);
        if (me_ > 0) {
            for (int k = 0; k < problem_.A.outerSize(); ++k)
                for (SparseMatrix::InnerIterator it(problem_.A, k); it; ++it)
                    trip.emplace_back(static_cast<int>(it.row()), static_cast<int>(it.col()), it.value());
            lo_.head(me_) = problem_.b;
            hi_.head(me_) = problem_.b;
        }
        if (m_ > me_) {
            for (int k = 0; k < problem_.C.outerSize(); ++k)
                for (SparseMatrix::InnerIterator it(problem_.C, k); it; ++it)
                    trip.emplace_back(static_cast<int>(me_ + it.row()), static_cast<int>(it.col()), it.value());
            lo_.tail(m_ - me_) = problem_.l;
            hi_.tail(m_ - me_) = problem_.u;
        }
        M_.resize(m_, n_);
        M_.setFromTriplets(trip.begin(), trip.end());
        M_.makeCompressed();
    }

    static double limit_scaling(double v)
    {
        if (v < 1e-4) return 1.0;
        return std::min(v, 1e4);
    }

    // Ruiz equilibration of [P M'; M 0]; the cost scale uses P only so the
    // scaling is independent of q.
    void equilibrate()
    {
        Pbar_ = problem_.P;
        Mbar_ = M_;
        D_ = Vector::Ones(n_);
        E_ = Vector::Ones(m_);
        cost_scale_ = 1.0;
        Vector col(n_), row(m_);
        for (int it = 0; it < settings_.scaling_iters; ++it) {
            col.setZero();
            row.setZero();
            for (int k = 0; k < Pbar_.outerSize(); ++k)
                for (SparseMatrix::InnerIterator e(Pbar_, k); e; ++e)
                    col[e.col()] = std::max(col[e.col()], std::abs(e.value()));
            for (int k = 0; k < Mbar_.outerSize(); ++k)
                for (SparseMatrix::InnerIterator e(Mbar_, k); e; ++e) {
                    col[e.col()] = std::max(col[e.col()], std::abs(e.value()));
                    row[e.row()] = std::max(row[e.row()], std::abs(e.value()));
                }
            Vector dt(n_), et(m_);
            for (Eigen::Index j = 0; j < n_; ++j) dt[j] = 1.0 / std::sqrt(limit_scaling(col[j]));
            for (Eigen::Index i = 0; i < m_; ++i) et[i] = 1.0 / std::sqrt(limit_scaling(row[i]));
            Pbar_ = dt.asDiagonal() * Pbar_ * dt.asDiagonal();
            Mbar_ = et.asDiagonal() * Mbar_ * dt.asDiagonal();
            D_ = D_.cwiseProduct(dt);
            E_ = E_.cwiseProduct(et);

            col.setZero();
            for (int k = 0; k < Pbar_.outerSize(); ++k)
                for (SparseMatrix::InnerIterator e(Pbar_, k); e; ++e)
                    col[e.col()] = std::max(col[e.col()], std::abs(e.value()));
            const double mean = n_ > 0 ? col.mean() : 0.0;
            const double ct = 1.0 / limit_scaling(mean);
            Pbar_ *= ct;
            cost_scale_ *= ct;
        }
        Pbar_.makeCompressed();
        Mbar_.makeCompressed();
        lbar_ = lo_;
        ubar_ = hi_;
        for (Eigen::Index i = 0; i < m_; ++i) {
            if (std::isfinite(lbar_[i])) lbar_[i] *= E_[i];
            if (std::isfinite(ubar_[i])) ubar_[i] *= E_[i];
        }
    }

    Vector rho_vector(double rho) const
    {
        Vector r(m_);
        for (Eigen::Index i = 0; i < m_; ++i) {
            if (lo_[i] == hi_[i])
                r[i] = 1e3 * rho;
            else if (!std::isfinite(lo_[i]) && !std::isfinite(hi_[i]))
                r[i] = 1e-6;
            else
                r[i] = rho;
        }
        return r;
    }

    void build_kkt_pattern()
    {
        std::vector<Triplet> trip;
        for (int k = 0; k < Pbar_.outerSize(); ++k)
            for (SparseMatrix::InnerIterator e(Pbar_, k); e; ++e)
                if (e.row() > e.col()) trip.emplace_back(static_cast<int>(e.row()), static_cast<int>(e.col()), e.value());
        for (int k = 0; k < Mbar_.outerSize(); ++k)
            for (SparseMatrix::InnerIterator e(Mbar_, k); e; ++e)
                trip.emplace_back(static_cast<int>(n_ + e.row()), static_cast<int>(e.col()), e.value());
        kkt_offdiag_ = std::move(trip);
        pdiag_ = Pbar_.diagonal();
    }

    void factor(Factor& f, const Vector& rho)
    {
        std::vector<Triplet> trip = kkt_offdiag_;
        trip.reserve(trip.size() + static_cast<std::size_t>(n_ + m_));
        for (Eigen::Index j = 0; j < n_; ++j)
            trip.emplace_back(static_cast<int>(j), static_cast<int>(j), pdiag_[j] + settings_.sigma);
        for (Eigen::Index i = 0; i < m_; ++i)
            trip.emplace_back(static_cast<int>(n_ + i), static_cast<int>(n_ + i), -1.0 / rho[i]);
        SparseMatrix K(n_ + m_, n_ + m_);
        K.setFromTriplets(trip.begin(), trip.end());
        if (!f.analyzed) {
            f.ldlt.analyzePattern(K);
            f.analyzed = true;
        }
        f.ldlt.factorize(K);
        if (f.ldlt.info() != Eigen::Success) throw SolverError("qp: KKT factorization failed");
    }

    Vector project(const Vector& v) const { return v.cwiseMax(lbar_).cwiseMin(ubar_); }

    Residuals residuals(const Vector& xs, const Vector& zs, const Vector& ys) const
    {
        const Vector mx = Mbar_ * xs;
        const Vector px = Pbar_ * xs;
        const Vector my = Mbar_.transpose() * ys;
        Residuals r;
        r.primal = m_ > 0 ? detail::inf_norm((mx - zs).cwiseQuotient(E_)) : 0.0;
        r.dual = detail::inf_norm((px + qbar_ + my).cwiseQuotient(D_)) / cost_scale_;
        const double pscale = m_ > 0 ? std::max(detail::inf_norm(mx.cwiseQuotient(E_)),
                                                detail::inf_norm(zs.cwiseQuotient(E_)))
                                     : 0.0;
        const double dscale = std::max({detail::inf_norm(px.cwiseQuotient(D_)),
                                        detail::inf_norm(my.cwiseQuotient(D_)),
                                        detail::inf_norm(qbar_.cwiseQuotient(D_))}) /
                              cost_scale_;
        r.primal_tol = settings_.abs_tol + settings_.rel_tol * pscale;
        r.dual_tol = settings_.abs_tol + settings_.rel_tol * dscale;
        return r;
    }

    double adapted_rho_scale(const Vector& xs, const Vector& zs, const Vector& ys, const Residuals&) const
    {
        const Vector mx = Mbar_ * xs;
        const Vector px = Pbar_ * xs;
        const Vector my = Mbar_.transpose() * ys;
        const double rp = detail::inf_norm(mx - zs);
        const double rd = detail::inf_norm(px + qbar_ + my);
        const double pn = std::max(detail::inf_norm(mx), detail::inf_norm(zs));
        const double dn = std::max({detail::inf_norm(px), detail::inf_norm(my), detail::inf_norm(qbar_)});
        const double pr = rp / (pn + 1e-30);
        const double dr = rd / (dn + 1e-30);
        if (dr <= 0.0 || pr <= 0.0) return 1.0;
        return std::sqrt(pr / dr);
    }

    bool primal_infeasible(const Vector& dy) const
    {
        if (m_ == 0) return false;
        const Vector dyu = E_.cwiseProduct(dy) / cost_scale_;
        const double norm = detail::inf_norm(dyu);
        if (norm < 1e-12) return false;
        const double eps = settings_.infeasibility_tol;
        if (detail::inf_norm(M_.transpose() * dyu) > eps * norm) return false;
        double support = 0.0;
        for (Eigen::Index i = 0; i < m_; ++i) {
            if (dyu[i] > 0.0) {
                if (!std::isfinite(hi_[i])) return false;
                support += hi_[i] * dyu[i];
            } else if (dyu[i] < 0.0) {
                if (!std::isfinite(lo_[i])) return false;
                support += lo_[i] * dyu[i];
            }
        }
        return support < -eps * norm;
    }

    // 0 inactive, -1 lower, +1 upper, 2 equality.
    std::vector<std::int8_t> classify(const Vector&, const Vector& zs, const Vector& ys) const
    {
        std::vector<std::int8_t> act(static_cast<std::size_t>(m_), 0);
        for (Eigen::Index i = 0; i < m_; ++i) {
            if (lo_[i] == hi_[i])
                act[i] = 2;
            else if (zs[i] - lbar_[i] < -ys[i])
                act[i] = -1;
            else if (ubar_[i] - zs[i] < ys[i])
                act[i] = 1;
        }
        return act;
    }

    // Rows violated by the polished point are added to the active set and the
    // polish repeated, a few times at most.
    std::optional<QpSolution> polish_with_corrections(std::vector<std::int8_t> active, const Vector& xs0,
                                                      const Vector& ys0)
    {
        std::optional<QpSolution> best;
        for (int pass = 0; pass < 4; ++pass) {
            auto sol = polish(active, xs0, ys0);
            if (!sol) return best;
            if (accepted(*sol)) return sol;
            best = std::move(sol);
            const Vector mx = Mbar_ * best->x.cwiseQuotient(D_);
            bool changed = false;
            for (Eigen::Index i = me_; i < m_; ++i) {
                if (active[i] != 0) continue;
                const double slack = 1e-9 * (1.0 + std::abs(mx[i]));
                if (mx[i] < lbar_[i] - slack) {
                    active[i] = -1;
                    changed = true;
                } else if (mx[i] > ubar_[i] + slack) {
                    active[i] = 1;
                    changed = true;
                }
            }
            if (!changed) break;
        }
        return best;
    }

    // Solves the equality-constrained KKT system of the guessed active set.
    // Iterative refinement starts from the current iterate (xs0, ys0): with
    // redundant active rows the multipliers are not unique, refinement never
    // moves the null-space component, and the iterate's multipliers carry the
    // right signs.
    std::optional<QpSolution> polish(const std::vector<std::int8_t>& active, const Vector& xs0, const Vector& ys0)
    {
        std::vector<int> rows;
        for (Eigen::Index i = 0; i < m_; ++i)
            if (active[i] != 0) rows.push_back(static_cast<int>(i));
        const Eigen::Index k = static_cast<Eigen::Index>(rows.size());
        constexpr double delta = 1e-6;

        if (!polish_cache_ || polish_key_ != active) {
            std::vector<Triplet> trip;
            for (int c = 0; c < Pbar_.outerSize(); ++c)
                for (SparseMatrix::InnerIterator e(Pbar_, c); e; ++e)
                    if (e.row() > e.col()) trip.emplace_back(static_cast<int>(e.row()), static_cast<int>(e.col()), e.value());
            for (Eigen::Index j = 0; j < n_; ++j)
                trip.emplace_back(static_cast<int>(j), static_cast<int>(j), pdiag_[j] + delta);
            std::vector<int> pos(static_cast<std::size_t>(m_), -1);
            for (Eigen::Index r = 0; r < k; ++r) pos[rows[r]] = static_cast<int>(r);
            for (int c = 0; c < Mbar_.outerSize(); ++c)
                for (SparseMatrix::InnerIterator e(Mbar_, c); e; ++e)
                    if (pos[e.row()] >= 0)
                        trip.emplace_back(static_cast<int>(n_ + pos[e.row()]), static_cast<int>(e.col()), e.value());
            for (Eigen::Index r = 0; r < k; ++r)
                trip.emplace_back(static_cast<int>(n_ + r), static_cast<int>(n_ + r), -delta);
            SparseMatrix K(n_ + k, n_ + k);
            K.setFromTriplets(trip.begin(), trip.end());
            polish_cache_.emplace();
            polish_cache_->analyzePattern(K);
            polish_cache_->factorize(K);
            polish_key_ = active;
            polish_ok_ = polish_cache_->info() == Eigen::Success;
        }
        if (!polish_ok_) return std::nullopt;

        Vector rhs(n_ + k);
        rhs.head(n_) = -qbar_;
        for (Eigen::Index r = 0; r < k; ++r) {
            const auto i = rows[r];
            rhs[n_ + r] = active[i] == 1 ? ubar_[i] : lbar_[i];
        }
        // The regularized factor only approximates the KKT matrix; iterative
        // refinement against the exact matrix removes the bias.
        Vector s(n_ + k);
        s.head(n_) = xs0;
        for (Eigen::Index r = 0; r < k; ++r) s[n_ + r] = ys0[rows[r]];
        Vector yfull(m_), resid(n_ + k);
        const double target = 1e-3 * settings_.abs_tol;
        for (int refine = 0; refine < 40; ++refine) {
            yfull.setZero();
            for (Eigen::Index r = 0; r < k; ++r) yfull[rows[r]] = s[n_ + r];
            const Vector mx = Mbar_ * s.head(n_);
            resid.head(n_) = rhs.head(n_) - Pbar_ * s.head(n_) - Mbar_.transpose() * yfull;
            for (Eigen::Index r = 0; r < k; ++r) resid[n_ + r] = rhs[n_ + r] - mx[rows[r]];
            if (detail::inf_norm(resid) <= target) break;
            s += polish_cache_->solve(resid);
        }
        if (!s.allFinite()) return std::nullopt;
        yfull.setZero();
        for (Eigen::Index r = 0; r < k; ++r) yfull[rows[r]] = s[n_ + r];
        QpSolution out = unscale(s.head(n_), yfull);
        out.polished = true;
        out.status = QpStatus::solved;
        return out;
    }

    // Mehrotra predictor-corrector on the unscaled data. Rows with l = u act
    // as equalities; every finite bound of the other rows gets a slack. The
    // Newton system is reduced to
    //   [P + C'WC + dI   E'] [dx]
    //   [E             -dI] [dy]
    // and solved with a few refinement steps against the unregularized matrix.
    QpSolution interior_point()
    {
        std::vector<int> eq, in;
        for (Eigen::Index i = 0; i < m_; ++i) (lo_[i] == hi_[i] ? eq : in).push_back(static_cast<int>(i));
        const auto ne = static_cast<Eigen::Index>(eq.size()), ni = static_cast<Eigen::Index>(in.size());
        auto pick = [&](const std::vector<int>& rows) {
            std::vector<Triplet> t;
            std::vector<int> pos(static_cast<std::size_t>(m_), -1);
            for (std::size_t r = 0; r < rows.size(); ++r) pos[rows[r]] = static_cast<int>(r);
            for (int c = 0; c < M_.outerSize(); ++c)
                for (SparseMatrix::InnerIterator e(M_, c); e; ++e)
                    if (pos[e.row()] >= 0) t.emplace_back(pos[e.row()], static_cast<int>(e.col()), e.value());
            SparseMatrix out(static_cast<Eigen::Index>(rows.size()), n_);
            out.setFromTriplets(t.begin(), t.end());
            return out;
        };
        const SparseMatrix E = pick(eq), C = pick(in);
        const SparseMatrix Et = E.transpose(), Ct = C.transpose();
        Vector be(ne), lo(ni), hi(ni);
        for (Eigen::Index r = 0; r < ne; ++r) be[r] = lo_[eq[r]];
        for (Eigen::Index r = 0; r < ni; ++r) {
            lo[r] = lo_[in[r]];
            hi[r] = hi_[in[r]];
        }
        Vector hasl(ni), hasu(ni);
        for (Eigen::Index r = 0; r < ni; ++r) {
            hasl[r] = std::isfinite(lo[r]) ? 1.0 : 0.0;
            hasu[r] = std::isfinite(hi[r]) ? 1.0 : 0.0;
        }
        const Vector lof = lo.cwiseProduct(hasl).unaryExpr([](double v) { return std::isfinite(v) ? v : 0.0; });
        const Vector hif = hi.cwiseProduct(hasu).unaryExpr([](double v) { return std::isfinite(v) ? v : 0.0; });
        const double nbounds = hasl.sum() + hasu.sum();
        const SparseMatrix& P = problem_.P;
        const Vector& q = problem_.q;

        Vector x = Vector::Zero(n_), y = Vector::Zero(ne);
        Vector cx = C * x;
        Vector sl = ((cx - lof).cwiseMax(1.0)).cwiseProduct(hasl), su = ((hif - cx).cwiseMax(1.0)).cwiseProduct(hasu);
        Vector zl = hasl, zu = hasu;

        constexpr double reg = 1e-10;
        Eigen::SimplicialLDLT<SparseMatrix, Eigen::Lower, Eigen::AMDOrdering<int>> ldlt;
        bool analyzed = false;
        SparseMatrix K;
        auto kkt = [&](const Vector& w, double d) {
            SparseMatrix H = P + SparseMatrix(Ct * w.asDiagonal() * C);
            std::vector<Triplet> t;
            for (int c = 0; c < H.outerSize(); ++c)
                for (SparseMatrix::InnerIterator e(H, c); e; ++e)
                    if (e.row() >= e.col()) t.emplace_back(static_cast<int>(e.row()), static_cast<int>(e.col()), e.value());
            for (Eigen::Index j = 0; j < n_; ++j) t.emplace_back(static_cast<int>(j), static_cast<int>(j), d);
            for (int c = 0; c < E.outerSize(); ++c)
                for (SparseMatrix::InnerIterator e(E, c); e; ++e)
                    t.emplace_back(static_cast<int>(n_ + e.row()), static_cast<int>(e.col()), e.value());
            for (Eigen::Index r = 0; r < ne; ++r) t.emplace_back(static_cast<int>(n_ + r), static_cast<int>(n_ + r), -d);
            SparseMatrix out(n_ + ne, n_ + ne);
            out.setFromTriplets(t.begin(), t.end());
            return out;
        };
        auto inv = [](const Vector& s, const Vector& has) {
            Vector r(s.size());
            for (Eigen::Index k = 0; k < s.size(); ++k) r[k] = has[k] > 0.0 ? 1.0 / s[k] : 0.0;
            return r;
        };
        auto step_to_boundary = [](const Vector& v, const Vector& dv, const Vector& has) {
            double a = 1.0;
            for (Eigen::Index k = 0; k < v.size(); ++k)
                if (has[k] > 0.0 && dv[k] < 0.0) a = std::min(a, -v[k] / dv[k]);
            return a;
        };

        QpSolution best;
        int iter = 0;
        const int max_iter = 200;
        for (iter = 1; iter <= max_iter; ++iter) {
            cx = C * x;
            const Vector z = zu - zl;
            const Vector rd = P * x + q + Et * y + Ct * z;
            const Vector rp = E * x - be;
            const Vector rl = (cx - lof - sl).cwiseProduct(hasl);
            const Vector ru = (hif - cx - su).cwiseProduct(hasu);
            const double mu = nbounds > 0 ? (sl.dot(zl) + su.dot(zu)) / nbounds : 0.0;

            Vector zfull = Vector::Zero(m_), yfull = Vector::Zero(m_);
            for (Eigen::Index r = 0; r < ne; ++r) yfull[eq[r]] = y[r];
            for (Eigen::Index r = 0; r < ni; ++r) yfull[in[r]] = z[r];
            QpSolution cur;
            cur.x = x;
            cur.y = yfull.head(me_);
            cur.z = yfull.tail(m_ - me_);
            const KktResiduals kr = kkt_residuals(problem_, cur.x, cur.y, cur.z);
            cur.primal_residual = kr.primal;
            cur.dual_residual = kr.dual;
            cur.complementarity_residual = kr.complementarity;
            cur.objective = problem_.objective(x);
            cur.iterations = iter - 1;
            if (iter == 1 || std::max(cur.primal_residual, cur.dual_residual) <
                                 std::max(best.primal_residual, best.dual_residual))
                best = cur;
            if (accepted(cur)) {
                cur.status = QpStatus::solved;
                return cur;
            }
            if (!x.allFinite() || !std::isfinite(mu)) break;

            const Vector isl = inv(sl, hasl), isu = inv(su, hasu);
            const Vector w = zl.cwiseProduct(isl) + zu.cwiseProduct(isu);
            K = kkt(w, 0.0).selfadjointView<Eigen::Lower>(); // full storage for the refinement products
            bool factored = false;
            for (double d = reg; d <= 1e-3 && !factored; d *= 100.0) {
                const SparseMatrix Kreg = kkt(w, d);
                if (!analyzed) {
                    ldlt.analyzePattern(Kreg);
                    analyzed = true;
                }
                ldlt.factorize(Kreg);
                factored = ldlt.info() == Eigen::Success;
            }
            if (!factored) break;

            // Solves for (dx, dy, dsl, dsu, dzl, dzu) given the complementarity targets.
            auto newton = [&](const Vector& rcl, const Vector& rcu, Vector& dx, Vector& dy, Vector& dsl, Vector& dsu,
                              Vector& dzl, Vector& dzu) {
                const Vector g = isu.cwiseProduct(rcu - zu.cwiseProduct(ru)) - isl.cwiseProduct(rcl - zl.cwiseProduct(rl));
                Vector rhs(n_ + ne);
                rhs.head(n_) = -rd - Ct * g;
                rhs.tail(ne) = -rp;
                Vector sol = ldlt.solve(rhs);
                for (int k = 0; k < 3; ++k) sol += ldlt.solve(rhs - K * sol);
                dx = sol.head(n_);
                dy = sol.tail(ne);
                const Vector cdx = C * dx;
                dsl = (cdx + rl).cwiseProduct(hasl);
                dsu = (ru - cdx).cwiseProduct(hasu);
                dzl = isl.cwiseProduct(rcl - zl.cwiseProduct(dsl));
                dzu = isu.cwiseProduct(rcu - zu.cwiseProduct(dsu));
            };

            Vector dx, dy, dsl, dsu, dzl, dzu;
            newton(-sl.cwiseProduct(zl), -su.cwiseProduct(zu), dx, dy, dsl, dsu, dzl, dzu);
            const double ap = std::min(step_to_boundary(sl, dsl, hasl), step_to_boundary(su, dsu, hasu));
            const double ad = std::min(step_to_boundary(zl, dzl, hasl), step_to_boundary(zu, dzu, hasu));
            double sigma = 0.0;
            if (nbounds > 0) {
                const double mu_aff = ((sl + ap * dsl).dot(zl + ad * dzl) + (su + ap * dsu).dot(zu + ad * dzu)) / nbounds;
                sigma = std::pow(std::clamp(mu_aff / mu, 0.0, 1.0), 3);
            }
            const Vector rcl = (Vector::Constant(ni, sigma * mu) - sl.cwiseProduct(zl) - dsl.cwiseProduct(dzl)).cwiseProduct(hasl);
            const Vector rcu = (Vector::Constant(ni, sigma * mu) - su.cwiseProduct(zu) - dsu.cwiseProduct(dzu)).cwiseProduct(hasu);
            newton(rcl, rcu, dx, dy, dsl, dsu, dzl, dzu);
            // One step length for both sides; P couples x to the dual residual.
            const double a = 0.995 * std::min({step_to_boundary(sl, dsl, hasl), step_to_boundary(su, dsu, hasu),
                                               step_to_boundary(zl, dzl, hasl), step_to_boundary(zu, dzu, hasu)});
            x += a * dx;
            sl += a * dsl;
            su += a * dsu;
            y += a * dy;
            zl += a * dzl;
            zu += a * dzu;
        }
        best.status = within_tolerance(best) ? QpStatus::solved : QpStatus::max_iter;
        return best;
    }

    QpSolution unscale(const Vector& xs, const Vector& ys) const
    {
        QpSolution out;
        out.x = D_.cwiseProduct(xs);
        const Vector yfull = E_.cwiseProduct(ys) / cost_scale_;
        out.y = yfull.head(me_);
        out.z = yfull.tail(m_ - me_);
        const KktResiduals r = kkt_residuals(problem_, out.x, out.y, out.z);
        out.primal_residual = r.primal;
        out.dual_residual = r.dual;
        out.complementarity_residual = r.complementarity;
        out.objective = problem_.objective(out.x);
        return out;
    }

    bool within_tolerance(const QpSolution& s) const
    {
        const auto [tp, td] = tolerances(s.x, s.y, s.z);
        return s.primal_residual <= tp && s.dual_residual <= td;
    }

    bool accepted(const QpSolution& s) const
    {
        const auto [tp, td] = tolerances(s.x, s.y, s.z);
        return s.primal_residual <= tp && s.dual_residual <= td &&
               s.complementarity_residual <= std::max(tp, td);
    }

    QpProblem problem_;
    QpSettings settings_;
    Eigen::Index n_ = 0, me_ = 0, m_ = 0;
    SparseMatrix M_, Pbar_, Mbar_;
    Vector lo_, hi_, lbar_, ubar_, D_, E_, qbar_, pdiag_, base_rho_;
    double cost_scale_ = 1.0;
    std::vector<Triplet> kkt_offdiag_;
    Factor base_factor_;
    Factor adapted_factor_;
    double adapted_factor_rho_ = -1.0;
    std::optional<Eigen::SimplicialLDLT<SparseMatrix, Eigen::Lower, Eigen::AMDOrdering<int>>> polish_cache_;
    std::vector<std::int8_t> polish_key_;
    bool polish_ok_ = false;
};

inline QpSolution solve_qp(const QpProblem& problem, const QpSettings& settings = {},
                           const QpWarmStart* warm = nullptr)
{
    QpSolver solver(problem, settings);
    return solver.solve(warm);
}

} // namespace peertrade
