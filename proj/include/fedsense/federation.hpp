#pragma once

#include <memory>
#include <vector>

#include "fedsense/config.hpp"
#include "fedsense/data.hpp"

namespace fedsense {

// Everything a run needs before the first event: standardized splits,
// per-client shards and the initial global model. Built identically by the
// simulator and by every process of a socket run.
struct Federation {
  ModelSpec spec;
  Dataset train, val, test;
  std::vector<std::shared_ptr<const Dataset>> client_train;
  std::vector<std::shared_ptr<const Dataset>> client_val;
  PartitionManifest manifest;
  ParameterVector initial;
  std::size_t dropped_rows = 0;

  std::size_t num_clients() const { return client_train.size(); }
};

Federation build_federation(const ExperimentConfig& cfg);

// Seed of client k's mini-batch stream.
std::uint64_t client_batch_seed(const ExperimentConfig& cfg, std::size_t client);

}  // namespace fedsense
