#include "fedsense/strategies.hpp"

#include <cmath>

#include "fedsense/error.hpp"
#include "fedsense/kernels.hpp"

namespace fedsense {

std::string to_string(Strategy s) {
  switch (s) {
    case Strategy::fedavg: return "fedavg";
    case Strategy::fedopt: return "fedopt";
    case Strategy::gsfs: return "gsfs";
  }
  return "unknown";
}

Strategy strategy_from_string(const std::string& s) {
  if (s == "fedavg") return Strategy::fedavg;
  if (s == "fedopt") return Strategy::fedopt;
  if (s == "gsfs") return Strategy::gsfs;
  throw ConfigError("unknown strategy '" + s + "' (expected fedavg, fedopt or gsfs)", "/strategy");
}

void FedOptConfig::validate() const {
  if (!(beta1 >= 0.0 && beta1 < 1.0)) throw ConfigError("fedopt beta1 must lie in [0, 1)", "/fedopt/beta1");
  if (!(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("fedopt beta2 must lie in [0, 1)", "/fedopt/beta2");
  if (!(server_lr > 0.0)) throw ConfigError("fedopt server_lr must be positive", "/fedopt/server_lr");
  if (!(epsilon > 0.0)) throw ConfigError("fedopt epsilon must be positive", "/fedopt/epsilon");
}

ServerState ServerState::fresh(ParameterVector global, Strategy strategy) {
  ServerState s;
  s.fedopt_m.assign(global.size(), 0.0);
  s.fedopt_v.assign(global.size(), 0.0);
  s.global_params = std::move(global);
  s.strategy = strategy;
  return s;
}

ParameterVector fedavg_aggregate(std::span<const WeightedParams> updates) {
  if (updates.empty()) throw AggregationError("fedavg needs at least one client update");
  const ParameterVector& first = *updates.front().params;
  double total = 0.0;
  for (const auto& u : updates) {
    if (!u.params->same_shape(first)) throw ShapeError("client parameter shapes differ");
    if (u.sample_count < 1) throw AggregationError("client sample_count must be at least 1");
    total += static_cast<double>(u.sample_count);
  }
  ParameterVector out(std::vector<double>(first.size(), 0.0), first.layers());
  for (const auto& u : updates) {
    kernels::axpy(static_cast<double>(u.sample_count) / total, u.params->values(), out.values());
  }
  return out;
}

ServerState fedopt_server_step(ServerState state, std::span<const ParameterVector> pseudo_grads,
                               const FedOptConfig& cfg) {
  if (pseudo_grads.empty()) throw AggregationError("fedopt needs at least one client delta");
  const std::size_t n = state.global_params.size();
  if (state.fedopt_m.size() != n || state.fedopt_v.size() != n) {
    throw ShapeError("fedopt moment vectors do not match the global model");
  }
  std::vector<double> g(n, 0.0);
  const double inv = 1.0 / static_cast<double>(pseudo_grads.size());
  for (const auto& d : pseudo_grads) {
    if (!d.same_shape(state.global_params)) throw ShapeError("delta shape does not match the global model");
    kernels::axpy(inv, d.values(), g);
  }
  kernels::adam_like(state.global_params.values(), state.fedopt_m, state.fedopt_v, g, cfg.beta1,
                     cfg.beta2, cfg.server_lr, cfg.epsilon);
  ++state.round;
  return state;
}

ParameterVector fedopt_pseudo_gradient(const ParameterVector& client_delta) {
  ParameterVector out = client_delta;
  for (double& v : out.values()) v = -v;
  return out;
}

UpdatePool::UpdatePool(double m_fraction) : m_fraction_(m_fraction) {
  if (!(m_fraction > 0.0 && m_fraction <= 1.0)) {
    throw ConfigError("pool m_fraction must lie in (0, 1]", "/gsfs/m_fraction");
  }
}

std::uint64_t UpdatePool::submission_count(ClientId k) const {
  const auto it = counts_.find(k);
  return it == counts_.end() ? 0 : it->second;
}

void UpdatePool::add(ClientUpdate upd, const ParameterVector* expected_shape) {
  if (expected_shape && !upd.delta.same_shape(*expected_shape)) {
    throw ShapeError("client " + std::to_string(upd.client_id) + " sent a delta of the wrong shape");
  }
  if (upd.sample_count < 1) throw AggregationError("client update sample_count must be at least 1");
  if (!upd.delta.all_finite()) throw DataError("client update contains non-finite values");
  ++counts_[upd.client_id];
  const ClientId k = upd.client_id;
  auto [it, inserted] = entries_.try_emplace(k, std::move(upd));
  if (!inserted) {
    it->second = std::move(upd);
    ++superseded_;
  }
}

UpdatePool pool_add(UpdatePool pool, ClientUpdate upd, const ParameterVector& global_shape) {
  pool.add(std::move(upd), &global_shape);
  return pool;
}

std::size_t pool_threshold(double m_fraction, std::size_t total_clients) {
  // A small slack keeps 0.6 * 10 at 6 rather than 7 after rounding error.
  const double q = m_fraction * static_cast<double>(total_clients);
  const auto t = static_cast<std::size_t>(std::ceil(q - 1e-9));
  return std::max<std::size_t>(t, 1);
}

bool pool_ready(const UpdatePool& pool, std::size_t total_clients) {
  if (total_clients < 1) throw ConfigError("total_clients must be at least 1");
  return pool.size() >= pool_threshold(pool.m_fraction(), total_clients);
}

std::map<ClientId, double> submission_weights(const UpdatePool& pool) {
  if (pool.empty()) throw AggregationError("submission weights need a non-empty pool");
  double total = 0.0;
  for (const auto& [k, _] : pool.entries()) total += static_cast<double>(pool.submission_count(k));
  std::map<ClientId, double> w;
  for (const auto& [k, _] : pool.entries()) w[k] = static_cast<double>(pool.submission_count(k)) / total;
  return w;
}

GsfsAggregateResult gsfs_aggregate(ServerState state, UpdatePool pool, std::size_t total_clients) {
  if (!pool_ready(pool, total_clients)) {
    throw StateError("gsfs aggregation requested with " + std::to_string(pool.size()) +
                     " pooled clients; quorum is " +
                     std::to_string(pool_threshold(pool.m_fraction(), total_clients)));
  }
  const auto weights = submission_weights(pool);
  for (const auto& [k, upd] : pool.entries()) {
    if (!upd.delta.same_shape(state.global_params)) throw ShapeError("pooled delta shape mismatch");
    kernels::axpy(weights.at(k), upd.delta.values(), state.global_params.values());
  }
  pool.clear_entries();
  ++state.round;
  return {std::move(state), std::move(pool)};
}

}  // namespace fedsense
