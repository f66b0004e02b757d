#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "fedsense/model.hpp"

namespace fedsense {

struct Dataset {
  std::vector<double> features;  // row-major, size() x num_features
  std::size_t num_features = 0;
  std::vector<int> labels;
  std::vector<std::string> feature_names;
  std::vector<std::string> class_names;
  std::vector<std::size_t> ids;        // source row id of every sample
  std::vector<std::uint8_t> numeric;   // per feature: 1 = standardized, 0 = one-hot

  std::size_t size() const { return labels.size(); }
  bool empty() const { return labels.empty(); }
  std::size_t num_classes() const { return class_names.size(); }
  LabeledSamples samples() const { return {features, labels, num_features, {}}; }
  std::span<const double> row(std::size_t i) const {
    return std::span<const double>(features).subspan(i * num_features, num_features);
  }
  // Copy of the listed rows, metadata preserved.
  Dataset select(std::span<const std::size_t> rows) const;
  // Throws DataError on row-count mismatch, non-finite values or bad labels.
  void validate() const;
};

struct Schema {
  std::vector<std::string> feature_columns;
  std::vector<std::string> categorical_columns;  // subset of feature_columns
  std::string label_column;
  std::map<std::string, int> label_map;
  std::vector<std::string> class_names;  // defaults to label_map keys ordered by id
  char delimiter = ',';
  std::vector<std::string> missing_tokens{"", "-", "?"};

  static Schema from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
};

Schema load_schema(const std::filesystem::path& path);

struct LoadResult {
  Dataset data;
  std::size_t input_rows = 0;
  std::size_t dropped_count = 0;
};

// Rows with missing fields, unparseable numbers or invalid UTF-8 are dropped
// and counted. An unmapped label is a SchemaError. Categorical columns are
// one-hot encoded over their sorted distinct values; numeric columns are left
// raw (see Standardizer).
LoadResult load_csv(const std::filesystem::path& path, const Schema& schema);

void write_csv(const Dataset& ds, const std::filesystem::path& path, char delimiter = ',');
// Schema describing a dataset written by write_csv.
Schema schema_for(const Dataset& ds);

// Zero mean / unit variance for numeric features, fitted on one dataset and
// applied to others. Constant columns map to zero.
struct Standardizer {
  std::vector<double> mean;
  std::vector<double> stddev;  // 0 marks a constant column
  std::vector<std::uint8_t> numeric;

  static Standardizer fit(const Dataset& train);
  void apply(Dataset& ds) const;
};

struct SplitSpec {
  double train_frac = 0.7;
  double val_frac = 0.2;
  double test_frac = 0.1;
  std::uint64_t seed = 0;

  void validate() const;
};

// Largest-remainder apportionment of n items over weights (assumed to sum to
// 1): floors first, then one extra item per largest fractional part, ties to
// the lower index.
std::vector<std::size_t> apportion(std::size_t n, std::span<const double> weights);

std::array<std::size_t, 3> split_sizes(std::size_t n, const SplitSpec& spec);

struct SplitResult {
  Dataset train, val, test;
};

SplitResult split_dataset(const Dataset& ds, const SplitSpec& spec);

enum class PartitionScheme { iid, dirichlet };

struct PartitionSpec {
  std::size_t num_clients = 1;
  PartitionScheme scheme = PartitionScheme::iid;
  double dirichlet_alpha = 0.5;
  std::uint64_t seed = 0;

  void validate() const;
};

// Per-client sample ids; enough to rebuild a partition exactly.
struct PartitionManifest {
  PartitionScheme scheme = PartitionScheme::iid;
  std::uint64_t seed = 0;
  double dirichlet_alpha = 0.0;
  std::vector<std::vector<std::size_t>> shards;

  nlohmann::json to_json() const;
  static PartitionManifest from_json(const nlohmann::json& j);
};

inline constexpr int kMaxDirichletAttempts = 1000;

PartitionManifest partition_manifest(const Dataset& train, const PartitionSpec& spec);
std::vector<Dataset> apply_manifest(const Dataset& train, const PartitionManifest& manifest);
std::vector<Dataset> partition_clients(const Dataset& train, const PartitionSpec& spec);

// Gaussian clusters, unit variance, one mean per class; label of sample i is
// i mod num_classes.
Dataset gen_synthetic(std::size_t num_samples, std::size_t num_features, std::size_t num_classes,
                      double class_sep, std::uint64_t seed);

std::string to_string(PartitionScheme s);
PartitionScheme partition_scheme_from_string(const std::string& s);

}  // namespace fedsense
