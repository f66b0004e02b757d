#include "fedsense/config.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "fedsense/error.hpp"
#include "fedsense/rng.hpp"

namespace fedsense {

using nlohmann::json;

void NetworkModel::validate() const {
  if (!(base_latency_ms >= 0.0)) throw ConfigError("network base_latency_ms must be >= 0", "/network/base_latency_ms");
  if (!(jitter_ms >= 0.0)) throw ConfigError("network jitter_ms must be >= 0", "/network/jitter_ms");
  if (!(bandwidth_bytes_per_s > 0.0)) {
    throw ConfigError("network bandwidth_bytes_per_s must be positive", "/network/bandwidth_bytes_per_s");
  }
}

double ComputeModel::ms_for(std::size_t client, std::size_t num_clients) const {
  if (!per_client_ms.empty()) return per_client_ms.at(client);
  if (num_clients <= 1) return ms_per_minibatch;
  return ms_per_minibatch *
         (1.0 + heterogeneity * static_cast<double>(client) / static_cast<double>(num_clients - 1));
}

void ComputeModel::validate(std::size_t num_clients) const {
  if (!(ms_per_minibatch > 0.0)) throw ConfigError("compute ms_per_minibatch must be positive", "/compute/ms_per_minibatch");
  if (!(heterogeneity >= 0.0)) throw ConfigError("compute heterogeneity must be >= 0", "/compute/heterogeneity");
  if (!per_client_ms.empty()) {
    if (per_client_ms.size() != num_clients) {
      throw ConfigError("compute per_client_ms needs one entry per client", "/compute/per_client_ms");
    }
    for (double v : per_client_ms) {
      if (!(v > 0.0)) throw ConfigError("compute per_client_ms entries must be positive", "/compute/per_client_ms");
    }
  }
}

namespace {

// Sections validate themselves without knowing where they sit in the file.
template <typename F>
void with_path(const char* path, F&& f) {
  try {
    f();
  } catch (const ConfigError& e) {
    if (!e.path().empty()) throw;
    throw ConfigError(e.what(), path);
  } catch (const Error& e) {
    throw ConfigError(e.what(), path);
  }
}

}  // namespace

void ExperimentConfig::validate() const {
  if (data.kind != "synthetic" && data.kind != "csv") {
    throw ConfigError("data source must be 'synthetic' or 'csv'", "/data/source");
  }
  if (data.kind == "synthetic") {
    const auto& s = data.synthetic;
    if (s.num_samples == 0 || s.num_features == 0 || s.num_classes < 2) {
      throw ConfigError("synthetic data needs positive samples/features and at least 2 classes", "/data/synthetic");
    }
    if (!(s.class_sep >= 0.0)) throw ConfigError("synthetic class_sep must be >= 0", "/data/synthetic/class_sep");
  } else if (data.csv_path.empty() || data.schema_path.empty()) {
    throw ConfigError("csv data source needs path and schema", "/data/csv");
  }
  for (std::size_t h : model.hidden_dims) {
    if (h == 0) throw ConfigError("model hidden_dims entries must be positive", "/model/hidden_dims");
  }
  if (model.num_classes == 1) throw ConfigError("model num_classes must be at least 2", "/model/num_classes");
  with_path("/split", [&] { split.validate(); });
  with_path("/partition", [&] { partition.validate(); });
  with_path("/train", [&] { train.validate(); });
  with_path("/gsfs", [&] { gsfs.validate(); });
  if (!(m_fraction > 0.0 && m_fraction <= 1.0)) throw ConfigError("gsfs m_fraction must lie in (0, 1]", "/gsfs/m_fraction");
  with_path("/fedopt", [&] { fedopt.validate(); });
  network.validate();
  compute.validate(partition.num_clients);
  if (!(limits.max_simulated_time_ms >= 0.0)) {
    throw ConfigError("limits max_simulated_time_ms must be >= 0", "/limits/max_simulated_time_ms");
  }
}

std::uint64_t derive_seed(std::uint64_t master, SeedStream stream, std::uint64_t index) {
  return mix_seed(master, static_cast<std::uint64_t>(stream) + index);
}

namespace {

void check_keys(const json& obj, const std::string& path, std::initializer_list<const char*> allowed) {
  if (!obj.is_object()) throw ConfigError("expected an object", path.empty() ? "/" : path);
  const std::set<std::string> ok(allowed.begin(), allowed.end());
  for (const auto& [key, _] : obj.items()) {
    if (!ok.count(key)) throw ConfigError("unknown key '" + key + "'", path + "/" + key);
  }
}

template <typename T>
void read(const json& obj, const char* key, T& out, const std::string& path) {
  if (!obj.contains(key)) return;
  try {
    out = obj.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError("wrong type for '" + std::string(key) + "'", path + "/" + key);
  }
}

void read_real(const json& obj, const char* key, double& out, const std::string& path) {
  if (!obj.contains(key)) return;
  const auto& v = obj.at(key);
  if (!v.is_number()) throw ConfigError("expected a number for '" + std::string(key) + "'", path + "/" + key);
  out = v.get<double>();
}

const json& section(const json& j, const char* key) {
  static const json empty = json::object();
  return j.contains(key) ? j.at(key) : empty;
}

template <typename F>
auto parse_enum(const json& obj, const char* key, const std::string& path, F from_string) {
  try {
    return from_string(obj.at(key).get<std::string>());
  } catch (const ConfigError& e) {
    throw ConfigError(e.what(), path + "/" + key);
  } catch (const json::exception&) {
    throw ConfigError("expected a string for '" + std::string(key) + "'", path + "/" + key);
  }
}

}  // namespace

ExperimentConfig config_from_json(const json& j) {
  ExperimentConfig c;
  check_keys(j, "", {"strategy", "strategies", "model", "data", "split", "partition", "train", "gsfs",
                     "fedopt", "network", "compute", "limits", "seed", "record_trajectory", "provenance"});
  if (j.contains("strategy")) c.strategy = parse_enum(j, "strategy", "", strategy_from_string);
  if (j.contains("strategies")) {
    const auto& arr = j.at("strategies");
    if (!arr.is_array()) throw ConfigError("strategies must be an array", "/strategies");
    for (std::size_t i = 0; i < arr.size(); ++i) {
      try {
        c.strategies.push_back(strategy_from_string(arr[i].get<std::string>()));
      } catch (const std::exception& e) {
        throw ConfigError(e.what(), "/strategies/" + std::to_string(i));
      }
    }
  }
  read(j, "seed", c.seed, "");
  read(j, "record_trajectory", c.record_trajectory, "");

  const auto& m = section(j, "model");
  check_keys(m, "/model", {"input_dim", "hidden_dims", "num_classes", "activation"});
  read(m, "input_dim", c.model.input_dim, "/model");
  read(m, "hidden_dims", c.model.hidden_dims, "/model");
  read(m, "num_classes", c.model.num_classes, "/model");
  if (!m.contains("num_classes")) c.model.num_classes = 0;
  if (m.contains("activation")) {
    c.model.activation = parse_enum(m, "activation", "/model", [](const std::string& s) {
      if (s == "relu") return Activation::relu;
      if (s == "tanh") return Activation::tanh;
      throw ConfigError("activation must be relu or tanh");
    });
  }

  const auto& d = section(j, "data");
  check_keys(d, "/data", {"source", "synthetic", "csv"});
  read(d, "source", c.data.kind, "/data");
  const auto& syn = section(d, "synthetic");
  check_keys(syn, "/data/synthetic", {"num_samples", "num_features", "num_classes", "class_sep"});
  read(syn, "num_samples", c.data.synthetic.num_samples, "/data/synthetic");
  read(syn, "num_features", c.data.synthetic.num_features, "/data/synthetic");
  read(syn, "num_classes", c.data.synthetic.num_classes, "/data/synthetic");
  read_real(syn, "class_sep", c.data.synthetic.class_sep, "/data/synthetic");
  const auto& csv = section(d, "csv");
  check_keys(csv, "/data/csv", {"path", "schema"});
  read(csv, "path", c.data.csv_path, "/data/csv");
  read(csv, "schema", c.data.schema_path, "/data/csv");

  const auto& s = section(j, "split");
  check_keys(s, "/split", {"train", "val", "test"});
  read_real(s, "train", c.split.train_frac, "/split");
  read_real(s, "val", c.split.val_frac, "/split");
  read_real(s, "test", c.split.test_frac, "/split");

  const auto& p = section(j, "partition");
  check_keys(p, "/partition", {"num_clients", "scheme", "dirichlet_alpha"});
  read(p, "num_clients", c.partition.num_clients, "/partition");
  if (p.contains("scheme")) c.partition.scheme = parse_enum(p, "scheme", "/partition", partition_scheme_from_string);
  read_real(p, "dirichlet_alpha", c.partition.dirichlet_alpha, "/partition");

  const auto& t = section(j, "train");
  check_keys(t, "/train", {"local_epochs", "learning_rate", "batch_size"});
  read(t, "local_epochs", c.train.local_epochs, "/train");
  read_real(t, "learning_rate", c.train.learning_rate, "/train");
  read(t, "batch_size", c.train.batch_size, "/train");

  const auto& g = section(j, "gsfs");
  check_keys(g, "/gsfs", {"perf_threshold", "smoothing", "sensitivity", "eval_every", "metric_kind", "m_fraction"});
  read_real(g, "perf_threshold", c.gsfs.perf_threshold, "/gsfs");
  read_real(g, "smoothing", c.gsfs.smoothing, "/gsfs");
  read_real(g, "sensitivity", c.gsfs.sensitivity, "/gsfs");
  if (g.contains("eval_every") && !g.at("eval_every").is_null()) {
    std::size_t e = 0;
    read(g, "eval_every", e, "/gsfs");
    c.gsfs.eval_every = e;
  }
  if (g.contains("metric_kind")) c.gsfs.metric_kind = parse_enum(g, "metric_kind", "/gsfs", metric_kind_from_string);
  read_real(g, "m_fraction", c.m_fraction, "/gsfs");

  const auto& f = section(j, "fedopt");
  check_keys(f, "/fedopt", {"beta1", "beta2", "server_lr", "epsilon"});
  read_real(f, "beta1", c.fedopt.beta1, "/fedopt");
  read_real(f, "beta2", c.fedopt.beta2, "/fedopt");
  read_real(f, "server_lr", c.fedopt.server_lr, "/fedopt");
  read_real(f, "epsilon", c.fedopt.epsilon, "/fedopt");

  const auto& n = section(j, "network");
  check_keys(n, "/network", {"base_latency_ms", "jitter_ms", "bandwidth_bytes_per_s"});
  read_real(n, "base_latency_ms", c.network.base_latency_ms, "/network");
  read_real(n, "jitter_ms", c.network.jitter_ms, "/network");
  read_real(n, "bandwidth_bytes_per_s", c.network.bandwidth_bytes_per_s, "/network");

  const auto& cm = section(j, "compute");
  check_keys(cm, "/compute", {"ms_per_minibatch", "heterogeneity", "per_client_ms"});
  read_real(cm, "ms_per_minibatch", c.compute.ms_per_minibatch, "/compute");
  read_real(cm, "heterogeneity", c.compute.heterogeneity, "/compute");
  read(cm, "per_client_ms", c.compute.per_client_ms, "/compute");

  const auto& l = section(j, "limits");
  check_keys(l, "/limits", {"max_aggregations", "max_simulated_time_ms"});
  read(l, "max_aggregations", c.limits.max_aggregations, "/limits");
  if (l.contains("max_simulated_time_ms") && !l.at("max_simulated_time_ms").is_null()) {
    read_real(l, "max_simulated_time_ms", c.limits.max_simulated_time_ms, "/limits");
  }

  c.validate();
  return c;
}

json config_to_json(const ExperimentConfig& c) {
  json strategies = json::array();
  for (auto s : c.strategies) strategies.push_back(to_string(s));
  json j;
  j["strategy"] = to_string(c.strategy);
  j["strategies"] = strategies;
  j["seed"] = c.seed;
  j["record_trajectory"] = c.record_trajectory;
  j["model"] = {{"input_dim", c.model.input_dim},
                {"hidden_dims", c.model.hidden_dims},
                {"num_classes", c.model.num_classes},
                {"activation", c.model.activation == Activation::relu ? "relu" : "tanh"}};
  j["data"] = {{"source", c.data.kind},
               {"synthetic",
                {{"num_samples", c.data.synthetic.num_samples},
                 {"num_features", c.data.synthetic.num_features},
                 {"num_classes", c.data.synthetic.num_classes},
                 {"class_sep", c.data.synthetic.class_sep}}},
               {"csv", {{"path", c.data.csv_path}, {"schema", c.data.schema_path}}}};
  j["split"] = {{"train", c.split.train_frac}, {"val", c.split.val_frac}, {"test", c.split.test_frac}};
  j["partition"] = {{"num_clients", c.partition.num_clients},
                    {"scheme", to_string(c.partition.scheme)},
                    {"dirichlet_alpha", c.partition.dirichlet_alpha}};
  j["train"] = {{"local_epochs", c.train.local_epochs},
                {"learning_rate", c.train.learning_rate},
                {"batch_size", c.train.batch_size}};
  j["gsfs"] = {{"perf_threshold", c.gsfs.perf_threshold},
               {"smoothing", c.gsfs.smoothing},
               {"sensitivity", c.gsfs.sensitivity},
               {"eval_every", c.gsfs.eval_every ? json(*c.gsfs.eval_every) : json(nullptr)},
               {"metric_kind", to_string(c.gsfs.metric_kind)},
               {"m_fraction", c.m_fraction}};
  j["fedopt"] = {{"beta1", c.fedopt.beta1},
                 {"beta2", c.fedopt.beta2},
                 {"server_lr", c.fedopt.server_lr},
                 {"epsilon", c.fedopt.epsilon}};
  j["network"] = {{"base_latency_ms", c.network.base_latency_ms},
                  {"jitter_ms", c.network.jitter_ms},
                  {"bandwidth_bytes_per_s", c.network.bandwidth_bytes_per_s}};
  j["compute"] = {{"ms_per_minibatch", c.compute.ms_per_minibatch},
                  {"heterogeneity", c.compute.heterogeneity},
                  {"per_client_ms", c.compute.per_client_ms}};
  j["limits"] = {{"max_aggregations", c.limits.max_aggregations},
                 {"max_simulated_time_ms", std::isfinite(c.limits.max_simulated_time_ms)
                                               ? json(c.limits.max_simulated_time_ms)
                                               : json(nullptr)}};
  return j;
}

void apply_override(json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError("override '" + assignment + "' is not of the form key=value");
  }
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  json value = json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;

  json* node = &j;
  std::size_t start = 0;
  std::string pointer;
  for (;;) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw ConfigError("override key '" + key + "' has an empty component");
    pointer += "/" + part;
    if (!node->is_object()) throw ConfigError("override path " + pointer + " crosses a non-object", pointer);
    if (dot == std::string::npos) {
      (*node)[part] = value;
      return;
    }
    node = &(*node)[part];
    if (node->is_null()) *node = json::object();
    start = dot + 1;
  }
}

}  // namespace fedsense
