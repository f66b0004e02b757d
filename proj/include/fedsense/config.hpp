#pragma once

// Experiment configuration shared by the simulator, the socket runtime and
// the CLI, with JSON (de)serialization.

#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include <json.hpp>

#include "fedsense/data.hpp"
#include "fedsense/gsfs_client.hpp"
#include "fedsense/model.hpp"
#include "fedsense/strategies.hpp"

namespace fedsense {

struct SyntheticSource {
  std::size_t num_samples = 3000;
  std::size_t num_features = 8;
  std::size_t num_classes = 2;
  double class_sep = 3.0;
};

struct DataSourceConfig {
  std::string kind = "synthetic";  // synthetic | csv
  SyntheticSource synthetic;
  std::string csv_path;
  std::string schema_path;
};

struct NetworkModel {
  double base_latency_ms = 20.0;
  double jitter_ms = 0.0;  // uniform in [-jitter, +jitter]
  double bandwidth_bytes_per_s = 1.25e6;

  void validate() const;
};

// Simulated training cost per mini-batch step for every client.
struct ComputeModel {
  double ms_per_minibatch = 10.0;
  // Client k runs at ms_per_minibatch * (1 + heterogeneity * k / (N - 1)).
  double heterogeneity = 0.0;
  // Explicit per-client costs; overrides the two fields above when set.
  std::vector<double> per_client_ms;

  double ms_for(std::size_t client, std::size_t num_clients) const;
  void validate(std::size_t num_clients) const;
};

struct Limits {
  std::uint64_t max_aggregations = 10;
  double max_simulated_time_ms = std::numeric_limits<double>::infinity();
};

struct ExperimentConfig {
  Strategy strategy = Strategy::gsfs;
  std::vector<Strategy> strategies;  // used by compare
  ModelSpec model{0, {}, 0};         // input_dim / num_classes 0 = take from data
  DataSourceConfig data;
  SplitSpec split;
  PartitionSpec partition;
  TrainConfig train;
  GsfsClientConfig gsfs;
  double m_fraction = 0.6;
  FedOptConfig fedopt;
  NetworkModel network;
  ComputeModel compute;
  Limits limits;
  std::uint64_t seed = 1;
  bool record_trajectory = false;

  void validate() const;
};

// Stream ids for seeds derived from ExperimentConfig::seed.
enum class SeedStream : std::uint64_t {
  data = 1,
  split = 2,
  partition = 3,
  init = 4,
  network = 5,
  client_batches = 100,
};
std::uint64_t derive_seed(std::uint64_t master, SeedStream stream, std::uint64_t index = 0);

// Missing keys take defaults; unknown top-level keys other than
// "provenance" are rejected. Throws ConfigError with a JSON pointer.
ExperimentConfig config_from_json(const nlohmann::json& j);
// Fully resolved form; config_from_json(config_to_json(c)) reproduces c.
nlohmann::json config_to_json(const ExperimentConfig& c);

// Applies a dotted-key override such as "gsfs.sensitivity=2". The value is
// parsed as JSON when possible, otherwise taken as a string.
void apply_override(nlohmann::json& j, const std::string& assignment);

}  // namespace fedsense
