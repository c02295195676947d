#pragma once
#include <vector>

#include "peertrade/peertrade.hpp"

namespace fixtures {

using namespace peertrade;

// Flat-parameter prosumer: load in [0.5, 2], battery of 4 kWh, exchange +-5 kW.
inline ProsumerModel flat_prosumer(std::size_t id, std::size_t T, std::vector<std::size_t> peers = {})
{
    const auto n = static_cast<Eigen::Index>(T);
    ProsumerModel p;
    p.id = id;
    p.utility_linear = Vector::Constant(n, 15.0);
    p.utility_quadratic = Vector::Constant(n, -15.0 / 4.0);
    p.load_min = Vector::Constant(n, 0.5);
    p.load_max = Vector::Constant(n, 2.0);
    p.daily_load_min = 0.5 * static_cast<double>(T);
    p.storage = {4.0, 0.4, 4.0, 2.2, 0.95, 0.95, 0.4, 0.4, 3.0};
    p.exchange_min = Vector::Constant(n, -5.0);
    p.exchange_max = Vector::Constant(n, 5.0);
    p.pv = Vector::Zero(n);
    for (std::size_t j : peers) p.peers.push_back({j, 1.0, 1.0});
    return p;
}

inline WholesalePrices flat_prices(std::size_t T, double buy = 10.0, double sell = 7.5)
{
    const auto n = static_cast<Eigen::Index>(T);
    return {Vector::Constant(n, buy), Vector::Constant(n, sell)};
}

// Two prosumers joined by one edge.
inline Scenario pair(std::size_t T, ProsumerModel a, ProsumerModel b, WholesalePrices w)
{
    a.peers = {{1, 1.0, 1.0}};
    b.peers = {{0, 1.0, 1.0}};
    return Scenario(TimeGrid{T}, {std::move(a), std::move(b)}, {{0, 1}}, std::move(w));
}

// Small generated community; three prosumers on a triangle by default.
inline Scenario desk(std::uint64_t seed = 7, std::size_t prosumers = 3, double degree = 2.0, std::size_t T = 24)
{
    GeneratorConfig cfg;
    cfg.prosumers = prosumers;
    cfg.mean_degree = degree;
    cfg.horizon = T;
    cfg.seed = seed;
    return generate(cfg);
}

// The pair stored in golden/pair_scenario.json.
inline Scenario golden_pair()
{
    auto a = flat_prosumer(0, 2);
    auto b = flat_prosumer(1, 2);
    b.pv << 1.0, 0.5;
    b.utility_linear << 12.0, 18.0;
    return pair(2, a, b, flat_prices(2, 8.0, 6.0));
}

} // namespace fixtures
