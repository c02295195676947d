#pragma once
#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <numbers>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "model.hpp"
#include "reference.hpp"

// Synthetic community generator, profile tables and the scenario document.

namespace peertrade {

struct ProfileTable
{
    std::string id;
    Vector load;  // kW
    Vector pv;    // kW
    Vector price; // nodal price, cents / kW

    std::size_t horizon() const { return static_cast<std::size_t>(load.size()); }

    friend bool operator==(const ProfileTable& a, const ProfileTable& b)
    {
        return a.load.size() == b.load.size() && a.pv.size() == b.pv.size() && a.price.size() == b.price.size() &&
               a.load == b.load && a.pv == b.pv && a.price == b.price;
    }
};

struct GeneratorConfig
{
    std::size_t prosumers = 30;
    double mean_degree = 8.0;
    std::size_t horizon = 24;
    std::uint64_t seed = 1;

    double utility_linear_min = 10.0; // varrho, cents / kW
    double utility_linear_max = 20.0;
    double aging_min = 2.0; // cents / kW
    double aging_max = 4.0;
    double fee_alpha = 1.0;
    double fee_beta = 1.0;
    double efficiency = 0.95;
    double soc_min_fraction = 0.1;
    double soc_max_fraction = 1.0;
    double soc_boundary_fraction = 0.55;
    double load_min_factor = 0.5;
    double load_max_factor = 3.0;
    double daily_min_factor = 1.0;      // of the profile's total energy
    double capacity_days = 4.0;         // capacity in multiples of the mean daily load
    double storage_power_fraction = 0.1; // charge/discharge cap per kWh of capacity
    double buy_multiplier = 2.0;
    double sell_multiplier = 1.5;
    double exchange_limit = 20.0; // kW
    double pv_share = 0.5;        // fraction of prosumers owning PV

    // When set, replaces the synthetic diurnal shapes; each prosumer scales it.
    std::optional<ProfileTable> profile;

    void validate() const
    {
        if (prosumers < 2) throw ConfigError("generator needs at least 2 prosumers");
        if (horizon < 1) throw ConfigError("generator needs a horizon of at least 1");
        if (!(mean_degree > 0.0) || !(mean_degree < static_cast<double>(prosumers)))
            throw ConfigError("mean degree must lie in (0, prosumers)");
        if (!(buy_multiplier >= sell_multiplier) || sell_multiplier < 0.0)
            throw ConfigError("buy multiplier must be at least the sell multiplier");
        if (!(utility_linear_min <= utility_linear_max) || utility_linear_min <= 0.0)
            throw ConfigError("utility range must be positive and ordered");
        if (!(aging_min <= aging_max) || aging_min < 0.0) throw ConfigError("aging range must be nonnegative and ordered");
        if (!(fee_alpha > 0.0) || fee_beta < 0.0) throw ConfigError("fees need alpha > 0 and beta >= 0");
        if (!(efficiency > 0.0 && efficiency <= 1.0)) throw ConfigError("efficiency must lie in (0, 1]");
        if (!(0.0 <= soc_min_fraction && soc_min_fraction <= soc_boundary_fraction &&
              soc_boundary_fraction <= soc_max_fraction))
            throw ConfigError("SOC fractions must satisfy 0 <= min <= boundary <= max");
        if (!(0.0 <= load_min_factor && load_min_factor < load_max_factor))
            throw ConfigError("load factors must satisfy 0 <= min < max");
        if (!(exchange_limit > 0.0)) throw ConfigError("exchange limit must be positive");
        if (pv_share < 0.0 || pv_share > 1.0) throw ConfigError("PV share must lie in [0, 1]");
        if (profile && profile->horizon() != horizon) throw ConfigError("profile length differs from the horizon");
    }
};

namespace detail {

// Uniform draw in [0, 1) from the top 53 bits; stable across standard libraries.
inline double canonical(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

inline double uniform(std::mt19937_64& rng, double lo, double hi) { return lo + (hi - lo) * canonical(rng); }

inline double bump(double h, double centre, double width)
{
    const double d = (h - centre) / width;
    return std::exp(-d * d);
}

// Hour of day for period t on a grid of T periods spanning one day.
inline double hour_of(std::size_t t, std::size_t T) { return (static_cast<double>(t) + 0.5) * 24.0 / T; }

inline std::vector<Edge> random_graph(std::size_t I, double mean_degree, std::mt19937_64& rng)
{
    const std::size_t pairs = I * (I - 1) / 2;
    const auto target = static_cast<std::size_t>(std::llround(mean_degree * static_cast<double>(I) / 2.0));
    const std::size_t M = std::clamp<std::size_t>(target, 1, pairs);

    for (int attempt = 0; attempt < 1000; ++attempt) {
        std::vector<std::size_t> pick;
        pick.reserve(M);
        // Selection sampling (Knuth, algorithm S): ordered, uniform without replacement.
        std::size_t need = M;
        for (std::size_t k = 0; k < pairs && need > 0; ++k) {
            if (canonical(rng) * static_cast<double>(pairs - k) < static_cast<double>(need)) {
                pick.push_back(k);
                --need;
            }
        }
        std::vector<Edge> edges;
        edges.reserve(M);
        std::vector<std::size_t> degree(I, 0);
        std::size_t a = 0, row_start = 0;
        for (std::size_t k : pick) {
            while (k >= row_start + (I - 1 - a)) {
                row_start += I - 1 - a;
                ++a;
            }
            const std::size_t b = a + 1 + (k - row_start);
            edges.push_back({a, b});
            ++degree[a];
            ++degree[b];
        }
        if (std::find(degree.begin(), degree.end(), 0) == degree.end()) return edges;
    }
    throw ConfigError("could not draw a graph without isolated prosumers; raise the mean degree");
}

} // namespace detail

inline Scenario generate(const GeneratorConfig& cfg)
{
    cfg.validate();
    std::mt19937_64 rng(cfg.seed);
    const std::size_t I = cfg.prosumers;
    const std::size_t T = cfg.horizon;
    const auto Ti = static_cast<Eigen::Index>(T);

    auto edges = detail::random_graph(I, cfg.mean_degree, rng);

    Vector nodal(Ti);
    for (std::size_t t = 0; t < T; ++t) {
        if (cfg.profile) {
            nodal[t] = cfg.profile->price[t];
        } else {
            const double h = detail::hour_of(t, T);
            nodal[t] = 3.0 + 2.5 * detail::bump(h, 9.0, 2.5) + 3.0 * detail::bump(h, 19.0, 2.5) +
                       detail::uniform(rng, -0.2, 0.2);
        }
    }
    WholesalePrices prices{cfg.buy_multiplier * nodal, cfg.sell_multiplier * nodal};

    std::vector<std::vector<std::size_t>> adj(I);
    for (const auto& e : edges) {
        adj[e.first].push_back(e.second);
        adj[e.second].push_back(e.first);
    }

    std::vector<ProsumerModel> prosumers;
    prosumers.reserve(I);
    for (std::size_t i = 0; i < I; ++i) {
        ProsumerModel p;
        p.id = i;
        Vector base(Ti), pv = Vector::Zero(Ti);
        const bool has_pv = detail::canonical(rng) < cfg.pv_share;
        if (cfg.profile) {
            const double ls = detail::uniform(rng, 0.7, 1.3);
            const double ps = detail::uniform(rng, 0.7, 1.3);
            base = ls * cfg.profile->load;
            if (has_pv) pv = ps * cfg.profile->pv;
        } else {
            const double mean = detail::uniform(rng, 0.4, 1.2);
            const double morning = detail::uniform(rng, 7.0, 9.0);
            const double evening = detail::uniform(rng, 18.0, 21.0);
            const double peak = has_pv ? detail::uniform(rng, 1.5, 4.0) : 0.0;
            for (std::size_t t = 0; t < T; ++t) {
                const double h = detail::hour_of(t, T);
                const double shape = 0.6 + 0.6 * detail::bump(h, morning, 1.5) + 1.0 * detail::bump(h, evening, 2.0);
                base[t] = mean * shape * (1.0 + detail::uniform(rng, -0.1, 0.1));
                if (has_pv && h > 6.0 && h < 18.0)
                    pv[t] = peak * std::sin(std::numbers::pi * (h - 6.0) / 12.0) * (1.0 + detail::uniform(rng, -0.05, 0.05));
            }
        }
        p.utility_linear.resize(Ti);
        for (std::size_t t = 0; t < T; ++t)
            p.utility_linear[t] = detail::uniform(rng, cfg.utility_linear_min, cfg.utility_linear_max);
        p.load_max = cfg.load_max_factor * base;
        p.load_min = cfg.load_min_factor * base;
        p.utility_quadratic = -p.utility_linear.cwiseQuotient(2.0 * p.load_max);
        p.daily_load_min = cfg.daily_min_factor * base.sum();
        p.pv = pv;

        const double daily = base.mean() * 24.0;
        auto& s = p.storage;
        s.capacity = cfg.capacity_days * daily;
        s.soc_min = cfg.soc_min_fraction * s.capacity;
        s.soc_max = cfg.soc_max_fraction * s.capacity;
        s.soc_boundary = cfg.soc_boundary_fraction * s.capacity;
        s.eff_charge = cfg.efficiency;
        s.eff_discharge = cfg.efficiency;
        s.charge_max = cfg.storage_power_fraction * s.capacity;
        s.discharge_max = cfg.storage_power_fraction * s.capacity;
        s.aging_cost = detail::uniform(rng, cfg.aging_min, cfg.aging_max);

        p.exchange_min = Vector::Constant(Ti, -cfg.exchange_limit);
        p.exchange_max = Vector::Constant(Ti, cfg.exchange_limit);

        std::sort(adj[i].begin(), adj[i].end());
        for (std::size_t j : adj[i]) p.peers.push_back({j, cfg.fee_alpha, cfg.fee_beta});
        prosumers.push_back(std::move(p));
    }

    Scenario scenario(TimeGrid{T}, std::move(prosumers), std::move(edges), std::move(prices));

    // Interior point: no trades, mid-box load, idle storage.
    for (const auto& p : scenario.prosumers()) {
        auto d = LocalDecision::zeros(T, p.num_peers());
        d.load = 0.5 * (p.load_min + p.load_max);
        d.soc.setConstant(p.storage.soc_boundary);
        d.exchange = d.load - p.pv;
        if (!check_feasible(p, d, 0.0).empty() || !(d.load.sum() > p.daily_load_min) ||
            !((d.exchange - p.exchange_min).minCoeff() > 0.0) || !((p.exchange_max - d.exchange).minCoeff() > 0.0))
            throw ConfigError("generated prosumer " + std::to_string(p.id) + " lacks an interior point");
    }
    return scenario;
}

// ---------------------------------------------------------------- profiles

inline ProfileTable parse_profiles(std::istream& in, std::size_t horizon, std::string id = "profile")
{
    static const char* columns[] = {"period", "load_kw", "pv_kw", "price"};
    std::string line;
    if (!std::getline(in, line)) throw ParseError("profile table is empty", 1);
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line != "period,load_kw,pv_kw,price")
        throw ParseError("header must be period,load_kw,pv_kw,price", 1);

    std::vector<double> series[3];
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
        if (cells.size() != 4) throw ParseError("expected 4 cells, found " + std::to_string(cells.size()), row);
        double v[4];
        for (std::size_t c = 0; c < 4; ++c) {
            const auto& s = cells[c];
            const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v[c]);
            if (ec != std::errc() || ptr != s.data() + s.size() || s.empty() || !std::isfinite(v[c]))
                throw ParseError(std::string("non-numeric value in ") + columns[c], row, c + 1);
        }
        const std::size_t expected_period = row - 1;
        if (v[0] != static_cast<double>(expected_period))
            throw ParseError("period must count 1, 2, ... in order", row, 1);
        if (v[1] < 0.0) throw ParseError("load_kw must be nonnegative", row, 2);
        if (v[2] < 0.0) throw ParseError("pv_kw must be nonnegative", row, 3);
        if (v[3] < 0.0) throw ParseError("price must be nonnegative", row, 4);
        for (std::size_t c = 0; c < 3; ++c) series[c].push_back(v[c + 1]);
    }
    for (std::size_t c = 0; c < 3; ++c)
        if (series[c].size() != horizon)
            throw ParseError(std::string("series ") + columns[c + 1] + " has " + std::to_string(series[c].size()) +
                             " periods, expected " + std::to_string(horizon));
    auto to_vec = [](const std::vector<double>& v) { return Vector(Eigen::Map<const Vector>(v.data(), v.size())); };
    return {std::move(id), to_vec(series[0]), to_vec(series[1]), to_vec(series[2])};
}

inline ProfileTable load_profiles(const std::string& path, std::size_t horizon)
{
    std::ifstream in(path);
    if (!in) throw Error("cannot open profile table " + path);
    return parse_profiles(in, horizon, path);
}

inline std::string format_profiles(const ProfileTable& table)
{
    std::string out = "period,load_kw,pv_kw,price\n";
    char buf[128];
    for (Eigen::Index t = 0; t < table.load.size(); ++t) {
        std::snprintf(buf, sizeof buf, "%lld,%.17g,%.17g,%.17g\n", static_cast<long long>(t + 1), table.load[t],
                      table.pv[t], table.price[t]);
        out += buf;
    }
    return out;
}

inline void save_profiles(const ProfileTable& table, const std::string& path)
{
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write profile table " + path);
    out << format_profiles(table);
    if (!out) throw Error("failed writing profile table " + path);
}

// ---------------------------------------------------------------- scenario document

inline constexpr int scenario_version = 1;

namespace detail {

using nlohmann::json;

inline json to_json_array(const Vector& v) { return json(std::vector<double>(v.data(), v.data() + v.size())); }

inline const json& member(const json& obj, const char* key, const std::string& where)
{
    if (!obj.is_object()) throw ParseError(where + " must be an object");
    auto it = obj.find(key);
    if (it == obj.end()) throw ParseError(where + " is missing key '" + key + "'");
    return *it;
}

inline double number(const json& j, const std::string& where)
{
    if (!j.is_number()) throw ParseError(where + " must be a number");
    return j.get<double>();
}

inline std::size_t index(const json& j, const std::string& where)
{
    if (!j.is_number_integer() || j.get<long long>() < 0) throw ParseError(where + " must be a nonnegative integer");
    return j.get<std::size_t>();
}

inline Vector series(const json& j, const std::string& where)
{
    if (!j.is_array()) throw ParseError(where + " must be an array");
    Vector v(static_cast<Eigen::Index>(j.size()));
    for (std::size_t k = 0; k < j.size(); ++k) v[static_cast<Eigen::Index>(k)] = number(j[k], where);
    return v;
}

} // namespace detail

inline std::string scenario_to_json(const Scenario& s)
{
    using detail::json;
    using detail::to_json_array;
    json doc = json::object();
    doc["version"] = scenario_version;
    doc["time"] = {{"horizon", s.horizon()}};
    doc["prices"] = {{"buy", to_json_array(s.prices().buy)}, {"sell", to_json_array(s.prices().sell)}};
    json ps = json::array();
    for (const auto& p : s.prosumers()) {
        const auto& st = p.storage;
        json peers = json::array();
        for (const auto& l : p.peers) peers.push_back({{"id", l.id}, {"alpha", l.alpha}, {"beta", l.beta}});
        ps.push_back({
            {"id", p.id},
            {"utility", {{"xi", to_json_array(p.utility_quadratic)}, {"rho", to_json_array(p.utility_linear)}}},
            {"load",
             {{"min", to_json_array(p.load_min)}, {"max", to_json_array(p.load_max)}, {"daily_min", p.daily_load_min}}},
            {"storage",
             {{"cap", st.capacity},
              {"s_min", st.soc_min},
              {"s_max", st.soc_max},
              {"s_bound", st.soc_boundary},
              {"eff_ch", st.eff_charge},
              {"eff_dis", st.eff_discharge},
              {"p_ch_max", st.charge_max},
              {"p_dis_max", st.discharge_max},
              {"aging", st.aging_cost}}},
            {"exchange", {{"min", to_json_array(p.exchange_min)}, {"max", to_json_array(p.exchange_max)}}},
            {"pv", to_json_array(p.pv)},
            {"peers", peers},
        });
    }
    doc["prosumers"] = std::move(ps);
    json edges = json::array();
    for (const auto& e : s.edges()) edges.push_back(json::array({e.first, e.second}));
    doc["edges"] = std::move(edges);
    return doc.dump(1) + "\n";
}

inline Scenario scenario_from_json(const std::string& text)
{
    using detail::json;
    using detail::member;
    using detail::number;
    using detail::series;
    json doc;
    try {
        doc = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ParseError(std::string("scenario document is not valid JSON: ") + e.what());
    }
    const auto& ver = member(doc, "version", "document");
    if (!ver.is_number_integer() || ver.get<long long>() != scenario_version)
        throw ParseError("unsupported scenario version (expected " + std::to_string(scenario_version) + ")");

    const std::size_t T = detail::index(member(member(doc, "time", "document"), "horizon", "time"), "time.horizon");
    const auto& pr = member(doc, "prices", "document");
    WholesalePrices prices{series(member(pr, "buy", "prices"), "prices.buy"),
                           series(member(pr, "sell", "prices"), "prices.sell")};

    const auto& list = member(doc, "prosumers", "document");
    if (!list.is_array()) throw ParseError("prosumers must be an array");
    std::vector<ProsumerModel> prosumers;
    for (std::size_t k = 0; k < list.size(); ++k) {
        const auto& jp = list[k];
        const std::string w = "prosumers[" + std::to_string(k) + "]";
        ProsumerModel p;
        p.id = detail::index(member(jp, "id", w), w + ".id");
        const auto& ut = member(jp, "utility", w);
        p.utility_quadratic = series(member(ut, "xi", w + ".utility"), w + ".utility.xi");
        p.utility_linear = series(member(ut, "rho", w + ".utility"), w + ".utility.rho");
        const auto& ld = member(jp, "load", w);
        p.load_min = series(member(ld, "min", w + ".load"), w + ".load.min");
        p.load_max = series(member(ld, "max", w + ".load"), w + ".load.max");
        p.daily_load_min = number(member(ld, "daily_min", w + ".load"), w + ".load.daily_min");
        const auto& st = member(jp, "storage", w);
        const std::string ws = w + ".storage";
        auto& s = p.storage;
        s.capacity = number(member(st, "cap", ws), ws + ".cap");
        s.soc_min = number(member(st, "s_min", ws), ws + ".s_min");
        s.soc_max = number(member(st, "s_max", ws), ws + ".s_max");
        s.soc_boundary = number(member(st, "s_bound", ws), ws + ".s_bound");
        s.eff_charge = number(member(st, "eff_ch", ws), ws + ".eff_ch");
        s.eff_discharge = number(member(st, "eff_dis", ws), ws + ".eff_dis");
        s.charge_max = number(member(st, "p_ch_max", ws), ws + ".p_ch_max");
        s.discharge_max = number(member(st, "p_dis_max", ws), ws + ".p_dis_max");
        s.aging_cost = number(member(st, "aging", ws), ws + ".aging");
        const auto& ex = member(jp, "exchange", w);
        p.exchange_min = series(member(ex, "min", w + ".exchange"), w + ".exchange.min");
        p.exchange_max = series(member(ex, "max", w + ".exchange"), w + ".exchange.max");
        p.pv = series(member(jp, "pv", w), w + ".pv");
        const auto& peers = member(jp, "peers", w);
        if (!peers.is_array()) throw ParseError(w + ".peers must be an array");
        for (std::size_t m = 0; m < peers.size(); ++m) {
            const std::string wp = w + ".peers[" + std::to_string(m) + "]";
            p.peers.push_back({detail::index(member(peers[m], "id", wp), wp + ".id"),
                               number(member(peers[m], "alpha", wp), wp + ".alpha"),
                               number(member(peers[m], "beta", wp), wp + ".beta")});
        }
        prosumers.push_back(std::move(p));
    }

    const auto& je = member(doc, "edges", "document");
    if (!je.is_array()) throw ParseError("edges must be an array");
    std::vector<Edge> edges;
    for (std::size_t k = 0; k < je.size(); ++k) {
        const std::string w = "edges[" + std::to_string(k) + "]";
        if (!je[k].is_array() || je[k].size() != 2) throw ParseError(w + " must be a pair");
        edges.push_back({detail::index(je[k][0], w), detail::index(je[k][1], w)});
    }
    return Scenario(TimeGrid{T}, std::move(prosumers), std::move(edges), std::move(prices));
}

inline void save_scenario(const Scenario& s, const std::string& path)
{
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write scenario " + path);
    out << scenario_to_json(s);
    if (!out) throw Error("failed writing scenario " + path);
}

inline Scenario load_scenario(const std::string& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open scenario " + path);
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return scenario_from_json(text);
}

// ---------------------------------------------------------------- reference document

inline std::string reference_to_json(const ReferenceSolution& ref)
{
    using detail::json;
    using detail::to_json_array;
    json doc = json::object();
    doc["version"] = scenario_version;
    doc["objective"] = ref.objective;
    doc["residuals"] = {{"primal", ref.primal_residual},
                        {"dual", ref.dual_residual},
                        {"complementarity", ref.complementarity_residual}};
    doc["iterations"] = ref.iterations;
    json prices = json::array();
    for (const auto& l : ref.prices) prices.push_back(to_json_array(l));
    doc["prices"] = std::move(prices);
    json ds = json::array();
    for (const auto& d : ref.decisions) {
        json trades = json::array();
        for (const auto& t : d.trades) trades.push_back(to_json_array(t));
        ds.push_back({{"load", to_json_array(d.load)},
                      {"charge", to_json_array(d.charge)},
                      {"discharge", to_json_array(d.discharge)},
                      {"soc", to_json_array(d.soc)},
                      {"exchange", to_json_array(d.exchange)},
                      {"trades", std::move(trades)}});
    }
    doc["decisions"] = std::move(ds);
    return doc.dump(1) + "\n";
}

// Parses a reference document and checks its shape against the scenario.
inline ReferenceSolution reference_from_json(const std::string& text, const Scenario& s)
{
    using detail::json;
    using detail::member;
    using detail::number;
    using detail::series;
    json doc;
    try {
        doc = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ParseError(std::string("reference document is not valid JSON: ") + e.what());
    }
    const auto& ver = member(doc, "version", "reference");
    if (!ver.is_number_integer() || ver.get<long long>() != scenario_version)
        throw ParseError("unsupported reference version");
    ReferenceSolution ref;
    ref.objective = number(member(doc, "objective", "reference"), "objective");
    const auto& res = member(doc, "residuals", "reference");
    ref.primal_residual = number(member(res, "primal", "residuals"), "residuals.primal");
    ref.dual_residual = number(member(res, "dual", "residuals"), "residuals.dual");
    ref.complementarity_residual = number(member(res, "complementarity", "residuals"), "residuals.complementarity");
    ref.iterations = static_cast<int>(detail::index(member(doc, "iterations", "reference"), "iterations"));
    const auto T = static_cast<Eigen::Index>(s.horizon());
    const auto& prices = member(doc, "prices", "reference");
    if (!prices.is_array() || prices.size() != s.edges().size())
        throw ParseError("reference prices must hold one series per edge");
    for (std::size_t e = 0; e < prices.size(); ++e) {
        ref.prices.push_back(series(prices[e], "prices[" + std::to_string(e) + "]"));
        if (ref.prices.back().size() != T) throw ParseError("reference price series length differs from the horizon");
    }
    const auto& ds = member(doc, "decisions", "reference");
    if (!ds.is_array() || ds.size() != s.size()) throw ParseError("reference must hold one decision per prosumer");
    for (std::size_t i = 0; i < ds.size(); ++i) {
        const std::string w = "decisions[" + std::to_string(i) + "]";
        LocalDecision d;
        d.load = series(member(ds[i], "load", w), w + ".load");
        d.charge = series(member(ds[i], "charge", w), w + ".charge");
        d.discharge = series(member(ds[i], "discharge", w), w + ".discharge");
        d.soc = series(member(ds[i], "soc", w), w + ".soc");
        d.exchange = series(member(ds[i], "exchange", w), w + ".exchange");
        const auto& tr = member(ds[i], "trades", w);
        if (!tr.is_array()) throw ParseError(w + ".trades must be an array");
        for (std::size_t k = 0; k < tr.size(); ++k) d.trades.push_back(series(tr[k], w + ".trades"));
        try {
            detail::check_dimensions(s.prosumer(i), d);
        } catch (const StructuralError& e) {
            throw ParseError(w + ": " + e.what());
        }
        ref.decisions.push_back(std::move(d));
    }
    return ref;
}

inline void save_reference(const ReferenceSolution& ref, const std::string& path)
{
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write reference " + path);
    out << reference_to_json(ref);
    if (!out) throw Error("failed writing reference " + path);
}

inline ReferenceSolution load_reference(const std::string& path, const Scenario& s)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open reference " + path);
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return reference_from_json(text, s);
}

} // namespace peertrade
