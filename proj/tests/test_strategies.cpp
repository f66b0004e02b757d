#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "fedsense/error.hpp"
#include "fedsense/strategies.hpp"

using namespace fedsense;

namespace {

// Flat vector with a single bias-only layer.
ParameterVector vec(std::vector<double> v) {
  const std::size_t n = v.size();
  return ParameterVector(std::move(v), {LayerSlice{0, 0, n, 0, n}});
}

ClientUpdate upd(ClientId k, std::vector<double> d, std::uint64_t samples = 1) {
  ClientUpdate u;
  u.client_id = k;
  u.delta = vec(std::move(d));
  u.sample_count = samples;
  return u;
}

std::vector<double> values(const ParameterVector& p) { return {p.values().begin(), p.values().end()}; }

}  // namespace

TEST_CASE("fedavg examples") {
  const auto a = vec({0, 0}), b = vec({2, 4}), c = vec({4, 8});
  WeightedParams one[] = {{&b, 5}};
  CHECK(fedavg_aggregate(one) == b);
  WeightedParams eq[] = {{&a, 2}, {&b, 2}};
  CHECK(values(fedavg_aggregate(eq)) == std::vector<double>{1, 2});
  WeightedParams w13[] = {{&a, 1}, {&c, 3}};
  CHECK(values(fedavg_aggregate(w13)) == std::vector<double>{3, 6});
  CHECK_THROWS_AS(fedavg_aggregate({}), AggregationError);
  const auto wrong = vec({1, 2, 3});
  WeightedParams mixed[] = {{&a, 1}, {&wrong, 1}};
  CHECK_THROWS_AS(fedavg_aggregate(mixed), ShapeError);
}

TEST_CASE("fedavg is affine-equivariant and stays inside the client range") {
  Rng rng(21);
  for (int rep = 0; rep < 100; ++rep) {
    const std::size_t n = 1 + rng.below(9), clients = 1 + rng.below(6);
    std::vector<ParameterVector> ps, shifted;
    std::vector<WeightedParams> w, ws;
    const double a = rng.uniform(-3, 3), b = rng.uniform(-3, 3);
    for (std::size_t k = 0; k < clients; ++k) {
      std::vector<double> v(n), s(n);
      for (std::size_t i = 0; i < n; ++i) {
        v[i] = rng.uniform(-5, 5);
        s[i] = a * v[i] + b;
      }
      ps.push_back(vec(v));
      shifted.push_back(vec(s));
    }
    for (std::size_t k = 0; k < clients; ++k) {
      const std::uint64_t c = 1 + rng.below(50);
      w.push_back({&ps[k], c});
      ws.push_back({&shifted[k], c});
    }
    const auto agg = fedavg_aggregate(w);
    const auto agg_s = fedavg_aggregate(ws);
    for (std::size_t i = 0; i < n; ++i) {
      CHECK(std::abs(agg_s.values()[i] - (a * agg.values()[i] + b)) < 1e-10);
      double lo = INFINITY, hi = -INFINITY;
      for (const auto& p : ps) {
        lo = std::min(lo, p.values()[i]);
        hi = std::max(hi, p.values()[i]);
      }
      CHECK(agg.values()[i] >= lo - 1e-12);
      CHECK(agg.values()[i] <= hi + 1e-12);
    }
  }
}

TEST_CASE("fedopt first step by hand") {
  FedOptConfig cfg{0.9, 0.99, 0.1, 0.0};
  auto st = ServerState::fresh(vec({0.5}), Strategy::fedopt);
  const ParameterVector g[] = {vec({1.0})};
  st = fedopt_server_step(std::move(st), g, cfg);
  CHECK(std::abs(st.fedopt_m[0] - 0.1) < 1e-15);
  CHECK(std::abs(st.fedopt_v[0] - 0.01) < 1e-15);
  CHECK(std::abs(st.global_params.values()[0] - 0.4) < 1e-15);
  CHECK(st.round == 1);
}

TEST_CASE("fedopt two-step trace") {
  FedOptConfig cfg{0.9, 0.99, 0.1, 1e-8};
  auto st = ServerState::fresh(vec({0.0}), Strategy::fedopt);
  const ParameterVector g[] = {vec({2.0}), vec({0.0})};  // mean 1
  double m = 0, v = 0, theta = 0;
  for (int t = 0; t < 2; ++t) {
    st = fedopt_server_step(std::move(st), g, cfg);
    m = 0.9 * m + 0.1 * 1.0;
    v = 0.99 * v + 0.01 * 1.0;
    theta -= 0.1 * m / (std::sqrt(v) + 1e-8);
    CHECK(std::abs(st.global_params.values()[0] - theta) < 1e-12);
  }
}

TEST_CASE("fedopt with zero input on a fresh state leaves theta alone") {
  FedOptConfig cfg;
  auto st = ServerState::fresh(vec({1.0, -2.0}), Strategy::fedopt);
  const ParameterVector g[] = {vec({0.0, 0.0})};
  st = fedopt_server_step(std::move(st), g, cfg);
  CHECK(values(st.global_params) == std::vector<double>{1.0, -2.0});
}

TEST_CASE("fedopt second moment stays nonnegative and steps stay finite") {
  Rng rng(5);
  FedOptConfig cfg;
  auto st = ServerState::fresh(vec(std::vector<double>(6, 0.0)), Strategy::fedopt);
  for (int t = 0; t < 200; ++t) {
    std::vector<ParameterVector> g;
    for (int k = 0; k < 3; ++k) {
      std::vector<double> x(6);
      for (auto& e : x) e = rng.normal() * std::pow(10.0, rng.uniform(-6, 3));
      g.push_back(vec(x));
    }
    st = fedopt_server_step(std::move(st), g, cfg);
    for (double x : st.fedopt_v) CHECK(x >= 0.0);
    CHECK(st.global_params.all_finite());
  }
}

TEST_CASE("pseudo-gradient negates the client delta") {
  CHECK(values(fedopt_pseudo_gradient(vec({1.5, -2}))) == std::vector<double>{-1.5, 2});
}

TEST_CASE("pool insertion and supersession") {
  UpdatePool pool(0.6);
  pool.add(upd(1, {1.0}));
  CHECK(pool.size() == 1);
  CHECK(pool.submission_count(1) == 1);
  pool.add(upd(1, {2.0}));
  CHECK(pool.size() == 1);
  CHECK(pool.submission_count(1) == 2);
  CHECK(pool.entries().at(1).delta.values()[0] == 2.0);
  CHECK(pool.superseded() == 1);
  pool.add(upd(2, {0.0}));
  pool.add(upd(3, {0.0}));
  CHECK(pool.size() == 3);
  const auto shape = vec({0.0, 0.0});
  CHECK_THROWS_AS(pool.add(upd(4, {1.0}), &shape), ShapeError);
}

TEST_CASE("quorum gate uses the ceiling") {
  CHECK(pool_threshold(0.6, 10) == 6);
  CHECK(pool_threshold(0.6, 3) == 2);
  CHECK(pool_threshold(1.0, 4) == 4);
  UpdatePool pool(0.6);
  for (ClientId k = 0; k < 5; ++k) pool.add(upd(k, {0.0}));
  CHECK_FALSE(pool_ready(pool, 10));
  pool.add(upd(5, {0.0}));
  CHECK(pool_ready(pool, 10));
}

TEST_CASE("submission weights") {
  UpdatePool pool(0.5);
  CHECK_THROWS_AS(submission_weights(pool), AggregationError);
  pool.add(upd(7, {0.0}));
  CHECK(submission_weights(pool).at(7) == 1.0);

  UpdatePool four(0.5);
  for (ClientId k = 0; k < 4; ++k) four.add(upd(k, {0.0}));
  for (const auto& [k, a] : submission_weights(four)) CHECK(a == 0.25);

  UpdatePool ab(0.5);
  for (int i = 0; i < 3; ++i) ab.add(upd(0, {0.0}));
  ab.add(upd(1, {0.0}));
  const auto w = submission_weights(ab);
  CHECK(w.at(0) == 0.75);
  CHECK(w.at(1) == 0.25);
}

TEST_CASE("submission weights always sum to one") {
  Rng rng(9);
  for (int rep = 0; rep < 200; ++rep) {
    UpdatePool pool(0.5);
    const int adds = 1 + static_cast<int>(rng.below(40));
    for (int i = 0; i < adds; ++i) pool.add(upd(rng.below(8), {0.0}));
    double s = 0;
    for (const auto& [_, a] : submission_weights(pool)) s += a;
    CHECK(std::abs(s - 1.0) < 1e-12);
  }
}

TEST_CASE("gsfs aggregation examples") {
  auto base = ServerState::fresh(vec({1.0, 1.0, 1.0, 1.0}), Strategy::gsfs);

  UpdatePool single(0.1);
  single.add(upd(0, {1, 2, 3, 4}));
  auto r1 = gsfs_aggregate(base, single, 4);
  CHECK(values(r1.state.global_params) == std::vector<double>{2, 3, 4, 5});
  CHECK(r1.pool.empty());
  CHECK(r1.state.round == 1);

  UpdatePool two(0.5);
  two.add(upd(0, {2, 0, 0, 0}));
  two.add(upd(1, {0, 2, 0, 0}));
  CHECK(values(gsfs_aggregate(base, two, 4).state.global_params) == std::vector<double>{2, 2, 1, 1});

  UpdatePool weighted(0.5);
  for (int i = 0; i < 3; ++i) weighted.add(upd(0, {4, 4, 4, 4}));
  weighted.add(upd(1, {0, 0, 0, 0}));
  CHECK(values(gsfs_aggregate(base, weighted, 4).state.global_params) == std::vector<double>{4, 4, 4, 4});

  UpdatePool short_pool(1.0);
  short_pool.add(upd(0, {0, 0, 0, 0}));
  CHECK_THROWS_AS(gsfs_aggregate(base, short_pool, 4), StateError);
}

TEST_CASE("clearing the pool keeps submission counts") {
  auto st = ServerState::fresh(vec({0.0}), Strategy::gsfs);
  UpdatePool pool(0.5);
  pool.add(upd(0, {1.0}));
  pool.add(upd(1, {1.0}));
  auto r = gsfs_aggregate(st, pool, 2);
  CHECK(r.pool.empty());
  CHECK(r.pool.submission_count(0) == 1);
  r.pool.add(upd(0, {1.0}));
  CHECK(r.pool.submission_count(0) == 2);
}

TEST_CASE("strategy names") {
  for (auto s : {Strategy::fedavg, Strategy::fedopt, Strategy::gsfs}) CHECK(strategy_from_string(to_string(s)) == s);
  CHECK_THROWS_AS(strategy_from_string("fedprox"), ConfigError);
}
