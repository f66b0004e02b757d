#include "fedsense/federation.hpp"

#include "fedsense/error.hpp"

namespace fedsense {

std::uint64_t client_batch_seed(const ExperimentConfig& cfg, std::size_t client) {
  return derive_seed(cfg.seed, SeedStream::client_batches, client);
}

Federation build_federation(const ExperimentConfig& cfg) {
  cfg.validate();
  Federation fed;
  Dataset all;
  if (cfg.data.kind == "synthetic") {
    const auto& s = cfg.data.synthetic;
    all = gen_synthetic(s.num_samples, s.num_features, s.num_classes, s.class_sep,
                        derive_seed(cfg.seed, SeedStream::data));
  } else {
    auto loaded = load_csv(cfg.data.csv_path, load_schema(cfg.data.schema_path));
    fed.dropped_rows = loaded.dropped_count;
    all = std::move(loaded.data);
  }

  SplitSpec split = cfg.split;
  split.seed = derive_seed(cfg.seed, SeedStream::split);
  auto parts = split_dataset(all, split);
  const auto scaler = Standardizer::fit(parts.train);
  scaler.apply(parts.train);
  scaler.apply(parts.val);
  scaler.apply(parts.test);
  fed.train = std::move(parts.train);
  fed.val = std::move(parts.val);
  fed.test = std::move(parts.test);

  PartitionSpec pspec = cfg.partition;
  pspec.seed = derive_seed(cfg.seed, SeedStream::partition);
  fed.manifest = partition_manifest(fed.train, pspec);
  // Same seed for the validation shards, so a Dirichlet run gives each client
  // the same class mix in both (identical first draw).
  const auto val_manifest = partition_manifest(fed.val, pspec);
  for (auto& d : apply_manifest(fed.train, fed.manifest)) {
    fed.client_train.push_back(std::make_shared<const Dataset>(std::move(d)));
  }
  for (auto& d : apply_manifest(fed.val, val_manifest)) {
    fed.client_val.push_back(std::make_shared<const Dataset>(std::move(d)));
  }

  fed.spec = cfg.model;
  if (fed.spec.input_dim == 0) fed.spec.input_dim = all.num_features;
  if (fed.spec.num_classes == 0) fed.spec.num_classes = all.num_classes();
  if (fed.spec.input_dim != all.num_features) {
    throw ConfigError("model input_dim " + std::to_string(fed.spec.input_dim) + " does not match the data width " +
                          std::to_string(all.num_features),
                      "/model/input_dim");
  }
  if (fed.spec.num_classes < all.num_classes()) {
    throw ConfigError("model num_classes is smaller than the number of data classes", "/model/num_classes");
  }
  fed.spec.validate();
  fed.initial = init_params(fed.spec, derive_seed(cfg.seed, SeedStream::init));
  return fed;
}

}  // namespace fedsense
