#pragma once

// Server-side aggregation rules: FedAvg, FedOpt (Adam-like server step
// without bias correction) and the GSFS update pool with its quorum gate and
// submission-frequency weights.

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "fedsense/model.hpp"

namespace fedsense {

enum class Strategy { fedavg, fedopt, gsfs };

std::string to_string(Strategy s);
Strategy strategy_from_string(const std::string& s);

using ClientId = std::uint64_t;

struct ClientUpdate {
  ClientId client_id = 0;
  ParameterVector delta;  // theta_local - theta_reference
  std::uint64_t sample_count = 1;
  double local_timestamp = 0.0;
  std::uint64_t round_hint = 0;
};

struct FedOptConfig {
  double beta1 = 0.9;
  double beta2 = 0.99;
  double server_lr = 0.1;
  double epsilon = 1e-8;

  void validate() const;
};

struct ServerState {
  ParameterVector global_params;
  std::vector<double> fedopt_m;
  std::vector<double> fedopt_v;
  std::uint64_t round = 0;
  Strategy strategy = Strategy::fedavg;

  static ServerState fresh(ParameterVector global, Strategy strategy);
};

struct WeightedParams {
  const ParameterVector* params;
  std::uint64_t sample_count;
};

// sum_k |D_k| theta_k / sum_k |D_k|
ParameterVector fedavg_aggregate(std::span<const WeightedParams> updates);

// One Adam-like server step on the unweighted mean g of `pseudo_grads`:
//   m <- b1 m + (1 - b1) g;  v <- b2 v + (1 - b2) g^2;  theta <- theta - lr m / (sqrt(v) + eps)
// The subtraction means the inputs must point uphill; callers holding client
// deltas pass theta_global - theta_k (see fedopt_pseudo_gradient).
ServerState fedopt_server_step(ServerState state, std::span<const ParameterVector> pseudo_grads,
                               const FedOptConfig& cfg);

// theta_global - theta_k for a client delta theta_k - theta_global.
ParameterVector fedopt_pseudo_gradient(const ParameterVector& client_delta);

class UpdatePool {
 public:
  explicit UpdatePool(double m_fraction = 0.6);

  double m_fraction() const { return m_fraction_; }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  const std::map<ClientId, ClientUpdate>& entries() const { return entries_; }
  const std::map<ClientId, std::uint64_t>& submission_counts() const { return counts_; }
  std::uint64_t submission_count(ClientId k) const;
  // Uploads replaced by a later upload from the same client before aggregation.
  std::uint64_t superseded() const { return superseded_; }

  // Keeps the latest update per client; the count grows on every call.
  // `expected_shape` may be null to skip the check.
  void add(ClientUpdate upd, const ParameterVector* expected_shape = nullptr);
  // Drops the entries, keeps submission counts.
  void clear_entries() { entries_.clear(); }

 private:
  double m_fraction_;
  std::map<ClientId, ClientUpdate> entries_;
  std::map<ClientId, std::uint64_t> counts_;
  std::uint64_t superseded_ = 0;
};

// Functional form of UpdatePool::add.
UpdatePool pool_add(UpdatePool pool, ClientUpdate upd, const ParameterVector& global_shape);

std::size_t pool_threshold(double m_fraction, std::size_t total_clients);
bool pool_ready(const UpdatePool& pool, std::size_t total_clients);

// alpha_k = c_k / sum_{j in pool} c_j
std::map<ClientId, double> submission_weights(const UpdatePool& pool);

struct GsfsAggregateResult {
  ServerState state;
  UpdatePool pool;
};

// theta <- theta + sum_k alpha_k delta_k over pooled clients; clears pool
// entries and increments the round. Throws StateError when the pool is not
// ready for total_clients.
GsfsAggregateResult gsfs_aggregate(ServerState state, UpdatePool pool, std::size_t total_clients);

}  // namespace fedsense
