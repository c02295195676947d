#pragma once
#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "engine.hpp"
#include "local.hpp"
#include "model.hpp"
#include "reference.hpp"

// Convergence indexes, theory monitors and trace export.

namespace peertrade {

// I^-1 sum_i ||rec_i(k) - rec_i(k-1)||.
inline double transaction_change(const TradeState& now, const TradeState& before)
{
    const auto a = now.stacked_records();
    const auto b = before.stacked_records();
    if (a.size() != b.size() || a.empty()) throw StructuralError("transaction change: prosumer counts differ");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (a[i].size() != b[i].size()) throw StructuralError("transaction change: record lengths differ");
        s += (a[i] - b[i]).norm();
    }
    return s / static_cast<double>(a.size());
}

// I^-1 sum_i ||lambda_i(k) - lambda_i(k-1)||, each edge seen from both ends.
inline double price_change(const Scenario& s, const std::vector<Vector>& now, const std::vector<Vector>& before)
{
    if (now.size() != s.edges().size() || before.size() != s.edges().size())
        throw StructuralError("price change: one price series per edge is required");
    if (s.size() == 0) return 0.0;
    double total = 0.0;
    for (std::size_t i = 0; i < s.size(); ++i) {
        double sq = 0.0;
        for (const auto& link : s.links(i)) sq += (now[link.edge] - before[link.edge]).squaredNorm();
        total += std::sqrt(sq);
    }
    return total / static_cast<double>(s.size());
}

// ---------------------------------------------------------------- index report

struct IndexRow
{
    std::size_t round = 0;
    double gap = not_available;
    double primal_residue = 0.0;
    double dual_residue = 0.0;
    double dual_value = not_available;
    std::size_t links_activated = 0;
};

using IndexReport = std::vector<IndexRow>;

inline IndexReport index_report(const RunTrace& trace)
{
    IndexReport out;
    out.reserve(trace.rounds.size());
    for (const auto& r : trace.rounds)
        out.push_back({r.round, r.gap, r.primal_residue, r.dual_residue, r.dual_value, r.activated.size()});
    return out;
}

inline const char* const report_header = "round,gap,primal_residue,dual_residue,dual_value,links_activated";

namespace detail {

inline std::string csv_number(double v)
{
    if (std::isnan(v)) return {};
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.16e", v);
    return buf;
}

inline double csv_parse_number(const std::string& cell, std::size_t row, std::size_t col)
{
    if (cell.empty()) return not_available;
    double v = 0.0;
    const auto* end = cell.data() + cell.size();
    const auto [ptr, ec] = std::from_chars(cell.data(), end, v);
    if (ec != std::errc() || ptr != end) throw ParseError("not a number: '" + cell + "'", row, col);
    return v;
}

inline std::size_t csv_parse_count(const std::string& cell, std::size_t row, std::size_t col)
{
    std::size_t v = 0;
    const auto* end = cell.data() + cell.size();
    const auto [ptr, ec] = std::from_chars(cell.data(), end, v);
    if (cell.empty() || ec != std::errc() || ptr != end)
        throw ParseError("not a nonnegative integer: '" + cell + "'", row, col);
    return v;
}

} // namespace detail

inline std::string format_report(const IndexReport& report)
{
    std::string out = report_header;
    out += '\n';
    for (const auto& r : report) {
        out += std::to_string(r.round);
        for (double v : {r.gap, r.primal_residue, r.dual_residue, r.dual_value}) {
            out += ',';
            out += detail::csv_number(v);
        }
        out += ',';
        out += std::to_string(r.links_activated);
        out += '\n';
    }
    return out;
}

inline IndexReport parse_report(std::istream& in)
{
    std::string line;
    if (!std::getline(in, line)) throw ParseError("empty trace file", 1, 1);
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line != report_header) throw ParseError("unexpected header '" + line + "'", 1, 1);
    IndexReport out;
    std::size_t row = 1;
    while (std::getline(in, line)) {
        ++row;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::vector<std::string> cells;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) cells.push_back(cell);
        if (!line.empty() && line.back() == ',') cells.emplace_back();
        if (cells.size() != 6)
            throw ParseError("expected 6 columns, found " + std::to_string(cells.size()), row, cells.size() + 1);
        IndexRow r;
        r.round = detail::csv_parse_count(cells[0], row, 1);
        r.gap = detail::csv_parse_number(cells[1], row, 2);
        r.primal_residue = detail::csv_parse_number(cells[2], row, 3);
        r.dual_residue = detail::csv_parse_number(cells[3], row, 4);
        r.dual_value = detail::csv_parse_number(cells[4], row, 5);
        r.links_activated = detail::csv_parse_count(cells[5], row, 6);
        out.push_back(r);
    }
    return out;
}

inline void export_report(const IndexReport& report, const std::string& path)
{
    std::ofstream f(path, std::ios::binary);
    if (!f) throw Error("cannot open " + path + " for writing");
    f << format_report(report);
    if (!f) throw Error("failed writing " + path);
}

inline IndexReport import_report(const std::string& path)
{
    std::ifstream f(path, std::ios::binary);
    if (!f) throw Error("cannot open " + path);
    return parse_report(f);
}

// ---------------------------------------------------------------- monitors

struct DescentVerdict
{
    std::size_t round = 0;
    double lhs = 0.0;   // -D(lambda(k))
    double rhs = 0.0;   // bound on -D(lambda(k))
    double slack = 0.0; // rhs + tolerance - lhs, negative on failure
    bool pass = false;
};

// Edge and standard runs: the per-round sufficient decrease
//   -D(k) <= -D(k-1) - (1/rho - L/2) sum_E(k) ||dlambda||^2.
// Node runs: the cumulative form
//   -D(k) <= -D(0) - (1/rho - L/2 - 2 kbar Lbar) sum_k' ||dlambda(k')||^2.
// Rounds without a dual value are skipped. Tolerance 1e-8 (1 + |D(k)|).
inline std::vector<DescentVerdict> descent_monitor(const RunTrace& trace, const Scenario& s)
{
    std::vector<DescentVerdict> out;
    const auto& lc = s.lipschitz();
    double prev = trace.initial_dual_value;
    if (std::isnan(prev)) return out;
    const double d0 = prev;
    double cumulative = 0.0;
    const bool node = trace.algorithm == Algorithm::node;
    const double coeff = node ? 1.0 / trace.rho - lc.total / 2.0 - 2.0 * static_cast<double>(trace.staleness_cap) * lc.max
                              : 1.0 / trace.rho - lc.total / 2.0;
    for (const auto& r : trace.rounds) {
        cumulative += r.price_step_sq;
        if (std::isnan(r.dual_value)) {
            prev = not_available;
            continue;
        }
        DescentVerdict v;
        v.round = r.round;
        v.lhs = -r.dual_value;
        if (node) {
            v.rhs = -d0 - coeff * cumulative;
        } else {
            if (std::isnan(prev)) {
                prev = r.dual_value;
                continue;
            }
            v.rhs = -prev - coeff * r.price_step_sq;
        }
        v.slack = v.rhs + 1e-8 * (1.0 + std::abs(r.dual_value)) - v.lhs;
        v.pass = v.slack >= 0.0;
        out.push_back(v);
        prev = r.dual_value;
    }
    return out;
}

struct StalenessAudit
{
    std::size_t cap = 0;
    std::size_t longest_interval = 0; // rounds between consecutive activations of a link
    bool intervals_ok = true;
    double worst_lag_margin = inf;    // min over rounds, prosumers of bound - lag
    bool lag_ok = true;
};

// Every link (directed in node runs, an edge otherwise) communicates at
// least once in every kbar rounds, and
//   ||t_i(k) - rec_i(k)|| <= sum over the last kbar rounds of ||t_i(k') - t_i(k'-1)||.
inline StalenessAudit staleness_audit(const RunTrace& trace, const Scenario& s)
{
    StalenessAudit a;
    a.cap = trace.staleness_cap;
    const std::size_t I = s.size();
    std::vector<std::size_t> last(trace.algorithm == Algorithm::node ? s.num_directed_links() : s.edges().size(), 0);
    std::vector<std::vector<double>> steps(I);
    std::size_t final_round = 0;
    for (const auto& r : trace.rounds) {
        final_round = r.round;
        for (std::size_t l : r.activated) {
            if (l >= last.size()) throw StructuralError("staleness audit: link index out of range");
            a.longest_interval = std::max(a.longest_interval, r.round - last[l]);
            last[l] = r.round;
        }
        if (r.record_lag.size() != I || r.proposal_step.size() != I)
            throw StructuralError("staleness audit: trace lacks per-prosumer lag data");
        for (std::size_t i = 0; i < I; ++i) {
            steps[i].push_back(r.proposal_step[i]);
            double bound = 0.0;
            const std::size_t n = steps[i].size();
            for (std::size_t k = n > a.cap ? n - a.cap : 0; k < n; ++k) bound += steps[i][k];
            const double margin = bound * (1.0 + 1e-12) + 1e-12 - r.record_lag[i];
            a.worst_lag_margin = std::min(a.worst_lag_margin, margin);
        }
    }
    // Links still idle at the end count only once they are overdue.
    for (std::size_t l : last)
        if (final_round - l > a.cap) a.longest_interval = std::max(a.longest_interval, final_round - l);
    a.intervals_ok = a.longest_interval <= a.cap;
    a.lag_ok = a.worst_lag_margin >= 0.0;
    return a;
}

// ---------------------------------------------------------------- settlement

// Cost of a prosumer that does not trade at all.
inline double standalone_optimum(const ProsumerModel& p, const WholesalePrices& w, const QpSettings& settings = {})
{
    ProsumerModel alone = p;
    alone.peers.clear();
    return solve_local(alone, w, {}, settings).objective;
}

struct RationalityEntry
{
    std::size_t prosumer = 0;
    double settled = 0.0;    // J_i + sum_j <lambda_ij, t_ij>
    double standalone = 0.0; // optimum without trading
    bool pass = false;       // settled <= standalone + 1e-6
};

inline std::vector<RationalityEntry> individual_rationality(const Scenario& s, const TradeState& state,
                                                            const QpSettings& settings = {})
{
    std::vector<RationalityEntry> out;
    for (std::size_t i = 0; i < s.size(); ++i) {
        const auto& p = s.prosumer(i);
        RationalityEntry e;
        e.prosumer = i;
        e.settled = evaluate_cost(p, s.prices(), state.decisions[i]) +
                    price_inner(state.view(s, i), state.decisions[i].trades);
        e.standalone = standalone_optimum(p, s.prices(), settings);
        e.pass = e.settled <= e.standalone + 1e-6;
        out.push_back(e);
    }
    return out;
}

struct PriceBand
{
    std::size_t active = 0;  // (edge, period) pairs with |t| above the threshold
    std::size_t inside = 0;  // of those, energy price within [sell, buy]
    double fraction() const { return active == 0 ? not_available : static_cast<double>(inside) / active; }
};

// The exporting side pays lambda per kW, so the energy price is -lambda.
inline PriceBand price_band(const Scenario& s, const TradeState& state, double active_threshold = 1e-3)
{
    PriceBand b;
    for (std::size_t e = 0; e < s.edges().size(); ++e) {
        const auto [a, c] = s.edges()[e];
        const auto& la = s.links(a);
        std::size_t slot = 0;
        while (la[slot].peer != c) ++slot;
        const Vector& t = state.decisions[a].trades[slot];
        for (Eigen::Index k = 0; k < t.size(); ++k) {
            if (std::abs(t[k]) <= active_threshold) continue;
            ++b.active;
            const double price = -state.prices[e][k];
            if (price >= s.prices().sell[k] && price <= s.prices().buy[k]) ++b.inside;
        }
    }
    return b;
}

// ---------------------------------------------------------------- plots

// Three stacked panels (gap, primal residue, dual residue) against the
// round, log scale. Output depends only on the report.
inline std::string render_svg(const IndexReport& report)
{
    if (report.empty()) throw ParseError("empty trace, nothing to plot", 2, 1);
    const double W = 720, H = 240, left = 70, right = 20, top = 24, bottom = 36;
    const double pw = W - left - right, ph = H - top - bottom;
    std::string svg;
    char buf[256];
    auto put = [&](const char* fmt, auto... args) {
        std::snprintf(buf, sizeof buf, fmt, args...);
        svg += buf;
    };
    put("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"%.0f\" height=\"%.0f\" font-family=\"sans-serif\" "
        "font-size=\"11\">\n",
        W, 3 * H);
    put("<rect width=\"%.0f\" height=\"%.0f\" fill=\"white\"/>\n", W, 3 * H);

    const std::size_t first = report.front().round, last = std::max(report.back().round, first + 1);
    struct Panel
    {
        const char* title;
        double IndexRow::*field;
    };
    const Panel panels[] = {{"optimality gap", &IndexRow::gap},
                            {"primal residue", &IndexRow::primal_residue},
                            {"dual residue", &IndexRow::dual_residue}};
    for (int k = 0; k < 3; ++k) {
        const double y0 = k * H;
        double lo = inf, hi = -inf;
        for (const auto& r : report) {
            const double v = r.*panels[k].field;
            if (v > 0.0 && std::isfinite(v)) {
                lo = std::min(lo, std::log10(v));
                hi = std::max(hi, std::log10(v));
            }
        }
        put("<text x=\"%.1f\" y=\"%.1f\">%s</text>\n", left, y0 + 16, panels[k].title);
        put("<rect x=\"%.1f\" y=\"%.1f\" width=\"%.1f\" height=\"%.1f\" fill=\"none\" stroke=\"black\"/>\n", left,
            y0 + top, pw, ph);
        put("<text x=\"%.1f\" y=\"%.1f\">%zu</text>\n", left, y0 + top + ph + 14, first);
        put("<text x=\"%.1f\" y=\"%.1f\" text-anchor=\"end\">%zu</text>\n", left + pw, y0 + top + ph + 14, last);
        put("<text x=\"%.1f\" y=\"%.1f\" text-anchor=\"middle\">round</text>\n", left + pw / 2, y0 + top + ph + 28);
        if (lo > hi) {
            put("<text x=\"%.1f\" y=\"%.1f\">no positive values</text>\n", left + 10, y0 + top + 20);
            continue;
        }
        lo = std::floor(lo);
        hi = std::max(std::ceil(hi), lo + 1);
        for (double d = lo; d <= hi; d += 1.0) {
            const double y = y0 + top + ph * (hi - d) / (hi - lo);
            put("<line x1=\"%.1f\" y1=\"%.1f\" x2=\"%.1f\" y2=\"%.1f\" stroke=\"#ddd\"/>\n", left, y, left + pw, y);
            put("<text x=\"%.1f\" y=\"%.1f\" text-anchor=\"end\">1e%.0f</text>\n", left - 4, y + 4, d);
        }
        svg += "<polyline fill=\"none\" stroke=\"#1f4e9a\" stroke-width=\"1.2\" points=\"";
        bool any = false;
        for (const auto& r : report) {
            const double v = r.*panels[k].field;
            if (!(v > 0.0) || !std::isfinite(v)) continue;
            const double x = left + pw * static_cast<double>(r.round - first) / static_cast<double>(last - first);
            const double y = y0 + top + ph * (hi - std::log10(v)) / (hi - lo);
            put(any ? " %.2f,%.2f" : "%.2f,%.2f", x, y);
            any = true;
        }
        svg += "\"/>\n";
    }
    svg += "</svg>\n";
    return svg;
}

inline void write_svg(const IndexReport& report, const std::string& path)
{
    const std::string svg = render_svg(report);
    std::ofstream f(path, std::ios::binary);
    if (!f) throw Error("cannot open " + path + " for writing");
    f << svg;
    if (!f) throw Error("failed writing " + path);
}

} // namespace peertrade
