#include "fedsense/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "fedsense/error.hpp"
#include "fedsense/rng.hpp"

namespace fedsense {

using nlohmann::json;

Dataset Dataset::select(std::span<const std::size_t> rows) const {
  Dataset out;
  out.num_features = num_features;
  out.feature_names = feature_names;
  out.class_names = class_names;
  out.numeric = numeric;
  out.features.reserve(rows.size() * num_features);
  out.labels.reserve(rows.size());
  out.ids.reserve(rows.size());
  for (std::size_t r : rows) {
    const auto x = row(r);
    out.features.insert(out.features.end(), x.begin(), x.end());
    out.labels.push_back(labels[r]);
    out.ids.push_back(ids[r]);
  }
  return out;
}

void Dataset::validate() const {
  if (features.size() != labels.size() * num_features) {
    throw DataError("feature rows do not match label count");
  }
  if (ids.size() != labels.size()) throw DataError("id count does not match label count");
  for (double v : features) {
    if (!std::isfinite(v)) throw DataError("non-finite feature value");
  }
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= num_classes()) {
      throw DataError("label " + std::to_string(y) + " outside class range");
    }
  }
}

// ---------------------------------------------------------------------------
// Schema

Schema Schema::from_json(const json& j) {
  Schema s;
  try {
    s.feature_columns = j.at("feature_columns").get<std::vector<std::string>>();
    if (j.contains("categorical_columns")) {
      s.categorical_columns = j.at("categorical_columns").get<std::vector<std::string>>();
    }
    s.label_column = j.at("label_column").get<std::string>();
    s.label_map = j.at("label_map").get<std::map<std::string, int>>();
    if (j.contains("class_names")) s.class_names = j.at("class_names").get<std::vector<std::string>>();
    if (j.contains("delimiter")) {
      const auto d = j.at("delimiter").get<std::string>();
      if (d.size() != 1) throw SchemaError("schema delimiter must be a single character");
      s.delimiter = d[0];
    }
    if (j.contains("missing_tokens")) {
      s.missing_tokens = j.at("missing_tokens").get<std::vector<std::string>>();
    }
  } catch (const json::exception& e) {
    throw SchemaError(std::string("invalid schema: ") + e.what());
  }
  if (s.feature_columns.empty()) throw SchemaError("schema lists no feature columns");
  if (s.label_map.empty()) throw SchemaError("schema label_map is empty");
  int max_id = -1;
  for (const auto& [name, id] : s.label_map) {
    if (id < 0) throw SchemaError("label id for '" + name + "' is negative");
    max_id = std::max(max_id, id);
  }
  if (s.class_names.empty()) {
    s.class_names.resize(static_cast<std::size_t>(max_id) + 1);
    for (const auto& [name, id] : s.label_map) {
      auto& slot = s.class_names[static_cast<std::size_t>(id)];
      if (slot.empty()) slot = name;
    }
    for (std::size_t c = 0; c < s.class_names.size(); ++c) {
      if (s.class_names[c].empty()) s.class_names[c] = "class" + std::to_string(c);
    }
  } else if (s.class_names.size() <= static_cast<std::size_t>(max_id)) {
    throw SchemaError("class_names has fewer entries than the largest label id");
  }
  if (s.class_names.size() < 2) throw SchemaError("schema must define at least two classes");
  for (const auto& c : s.categorical_columns) {
    if (std::find(s.feature_columns.begin(), s.feature_columns.end(), c) == s.feature_columns.end()) {
      throw SchemaError("categorical column '" + c + "' is not a feature column");
    }
  }
  return s;
}

json Schema::to_json() const {
  return json{{"feature_columns", feature_columns},
              {"categorical_columns", categorical_columns},
              {"label_column", label_column},
              {"label_map", label_map},
              {"class_names", class_names},
              {"delimiter", std::string(1, delimiter)},
              {"missing_tokens", missing_tokens}};
}

Schema load_schema(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open schema file " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::parse_error& e) {
    throw SchemaError("schema file " + path.string() + " is not valid JSON: " + e.what());
  }
  return Schema::from_json(j);
}

// ---------------------------------------------------------------------------
// CSV ingestion

namespace {

std::vector<std::string> split_line(const std::string& line, char delim) {
  std::vector<std::string> out;
  std::string field;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char ch = line[i];
    if (quoted) {
      if (ch == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        field.push_back('"');
        ++i;
      } else if (ch == '"') {
        quoted = false;
      } else {
        field.push_back(ch);
      }
    } else if (ch == '"' && field.empty()) {
      quoted = true;
    } else if (ch == delim) {
      out.push_back(std::move(field));
      field.clear();
    } else {
      field.push_back(ch);
    }
  }
  out.push_back(std::move(field));
  return out;
}

bool valid_utf8(const std::string& s) {
  std::size_t i = 0;
  while (i < s.size()) {
    const auto c = static_cast<unsigned char>(s[i]);
    std::size_t len = c < 0x80 ? 1 : (c >> 5) == 0x6 ? 2 : (c >> 4) == 0xE ? 3 : (c >> 3) == 0x1E ? 4 : 0;
    if (len == 0 || i + len > s.size()) return false;
    for (std::size_t k = 1; k < len; ++k) {
      if ((static_cast<unsigned char>(s[i + k]) >> 6) != 0x2) return false;
    }
    i += len;
  }
  return true;
}

bool parse_double(const std::string& s, double& out) {
  const char* first = s.data();
  const char* last = s.data() + s.size();
  while (first < last && (*first == ' ' || *first == '\t')) ++first;
  while (last > first && (last[-1] == ' ' || last[-1] == '\t')) --last;
  if (first == last) return false;
  if (*first == '+') ++first;
  const auto res = std::from_chars(first, last, out);
  return res.ec == std::errc() && res.ptr == last && std::isfinite(out);
}

}  // namespace

LoadResult load_csv(const std::filesystem::path& path, const Schema& schema) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());

  std::string line;
  if (!std::getline(in, line)) throw SchemaError(path.string() + " has no header row");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line.rfind("\xEF\xBB\xBF", 0) == 0) line.erase(0, 3);
  const auto header = split_line(line, schema.delimiter);

  auto column_of = [&](const std::string& name) {
    const auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw SchemaError("column '" + name + "' missing from header of " + path.string());
    return static_cast<std::size_t>(it - header.begin());
  };
  std::vector<std::size_t> feature_cols;
  std::vector<bool> categorical;
  for (const auto& name : schema.feature_columns) {
    feature_cols.push_back(column_of(name));
    categorical.push_back(std::find(schema.categorical_columns.begin(), schema.categorical_columns.end(),
                                    name) != schema.categorical_columns.end());
  }
  const std::size_t label_col = column_of(schema.label_column);
  const std::set<std::string> missing(schema.missing_tokens.begin(), schema.missing_tokens.end());

  struct RawRow {
    std::size_t id;
    std::vector<std::string> cats;
    std::vector<double> nums;
    int label;
  };
  std::vector<RawRow> rows;
  std::vector<std::set<std::string>> levels(feature_cols.size());

  LoadResult result;
  std::size_t row_id = 0;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const std::size_t id = row_id++;
    ++result.input_rows;
    if (!valid_utf8(line)) {
      ++result.dropped_count;
      continue;
    }
    const auto fields = split_line(line, schema.delimiter);
    if (fields.size() != header.size()) {
      ++result.dropped_count;
      continue;
    }
    const std::string& label_text = fields[label_col];
    if (missing.count(label_text)) {
      ++result.dropped_count;
      continue;
    }
    const auto lit = schema.label_map.find(label_text);
    if (lit == schema.label_map.end()) {
      throw SchemaError("label value '" + label_text + "' in row " + std::to_string(id + 1) +
                        " is not in the schema label_map");
    }
    RawRow r{id, {}, {}, lit->second};
    bool ok = true;
    for (std::size_t f = 0; f < feature_cols.size() && ok; ++f) {
      const std::string& v = fields[feature_cols[f]];
      if (missing.count(v)) {
        ok = false;
      } else if (categorical[f]) {
        r.cats.push_back(v);
      } else {
        double d;
        ok = parse_double(v, d);
        r.nums.push_back(d);
      }
    }
    if (!ok) {
      ++result.dropped_count;
      continue;
    }
    for (std::size_t f = 0, c = 0; f < feature_cols.size(); ++f) {
      if (categorical[f]) levels[f].insert(r.cats[c++]);
    }
    rows.push_back(std::move(r));
  }
  if (rows.empty()) throw DataError(path.string() + " has no usable rows after cleaning");

  Dataset& ds = result.data;
  ds.class_names = schema.class_names;
  for (std::size_t f = 0; f < feature_cols.size(); ++f) {
    if (categorical[f]) {
      for (const auto& level : levels[f]) {
        ds.feature_names.push_back(schema.feature_columns[f] + "=" + level);
        ds.numeric.push_back(0);
      }
    } else {
      ds.feature_names.push_back(schema.feature_columns[f]);
      ds.numeric.push_back(1);
    }
  }
  ds.num_features = ds.feature_names.size();
  ds.features.reserve(rows.size() * ds.num_features);
  for (const auto& r : rows) {
    std::size_t ci = 0, ni = 0;
    for (std::size_t f = 0; f < feature_cols.size(); ++f) {
      if (categorical[f]) {
        const auto& v = r.cats[ci++];
        for (const auto& level : levels[f]) ds.features.push_back(level == v ? 1.0 : 0.0);
      } else {
        ds.features.push_back(r.nums[ni++]);
      }
    }
    ds.labels.push_back(r.label);
    ds.ids.push_back(r.id);
  }
  return result;
}

void write_csv(const Dataset& ds, const std::filesystem::path& path, char delimiter) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  for (const auto& name : ds.feature_names) out << name << delimiter;
  out << "label\n";
  char buf[32];
  for (std::size_t i = 0; i < ds.size(); ++i) {
    for (double v : ds.row(i)) {
      const auto res = std::to_chars(buf, buf + sizeof buf, v);
      out.write(buf, res.ptr - buf);
      out << delimiter;
    }
    out << ds.class_names[static_cast<std::size_t>(ds.labels[i])] << '\n';
  }
  if (!out) throw IoError("failed writing " + path.string());
}

Schema schema_for(const Dataset& ds) {
  Schema s;
  s.feature_columns = ds.feature_names;
  s.label_column = "label";
  s.class_names = ds.class_names;
  for (std::size_t c = 0; c < ds.class_names.size(); ++c) s.label_map[ds.class_names[c]] = static_cast<int>(c);
  return s;
}

// ---------------------------------------------------------------------------
// Standardization

Standardizer Standardizer::fit(const Dataset& train) {
  Standardizer s;
  const std::size_t d = train.num_features;
  s.mean.assign(d, 0.0);
  s.stddev.assign(d, 0.0);
  s.numeric = train.numeric;
  if (s.numeric.size() != d) s.numeric.assign(d, 1);
  const double n = static_cast<double>(train.size());
  if (train.empty()) return s;
  for (std::size_t i = 0; i < train.size(); ++i) {
    const auto x = train.row(i);
    for (std::size_t f = 0; f < d; ++f) s.mean[f] += x[f];
  }
  for (double& m : s.mean) m /= n;
  for (std::size_t i = 0; i < train.size(); ++i) {
    const auto x = train.row(i);
    for (std::size_t f = 0; f < d; ++f) {
      const double c = x[f] - s.mean[f];
      s.stddev[f] += c * c;
    }
  }
  for (std::size_t f = 0; f < d; ++f) {
    const double var = s.stddev[f] / n;
    // Relative guard: a column whose spread is rounding noise is constant.
    const double scale = std::max(1.0, std::abs(s.mean[f]));
    s.stddev[f] = var > 1e-24 * scale * scale ? std::sqrt(var) : 0.0;
  }
  return s;
}

void Standardizer::apply(Dataset& ds) const {
  if (ds.num_features != mean.size()) throw ShapeError("standardizer width does not match dataset");
  for (std::size_t i = 0; i < ds.size(); ++i) {
    double* x = ds.features.data() + i * ds.num_features;
    for (std::size_t f = 0; f < ds.num_features; ++f) {
      if (!numeric[f]) continue;
      x[f] = stddev[f] == 0.0 ? 0.0 : (x[f] - mean[f]) / stddev[f];
    }
  }
}

// ---------------------------------------------------------------------------
// Splitting and partitioning

void SplitSpec::validate() const {
  for (double f : {train_frac, val_frac, test_frac}) {
    if (!(f > 0.0 && f < 1.0)) throw ConfigError("split fractions must lie in (0, 1)", "/split");
  }
  if (std::abs(train_frac + val_frac + test_frac - 1.0) > 1e-9) {
    throw ConfigError("split fractions must sum to 1", "/split");
  }
}

std::vector<std::size_t> apportion(std::size_t n, std::span<const double> weights) {
  const double total = static_cast<double>(n);
  std::vector<std::size_t> counts(weights.size());
  std::vector<double> frac(weights.size());
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    double q = total * weights[i];
    // 10 * 0.7 must count as exactly 7, not 6.999...
    const double r = std::round(q);
    if (std::abs(q - r) <= 1e-9 * std::max(1.0, total)) q = r;
    const double fl = std::floor(q);
    counts[i] = static_cast<std::size_t>(fl);
    frac[i] = q - fl;
    assigned += counts[i];
  }
  std::vector<std::size_t> order(weights.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return frac[a] > frac[b]; });
  for (std::size_t k = 0; assigned < n; k = (k + 1) % order.size()) {
    ++counts[order[k]];
    ++assigned;
  }
  return counts;
}

std::array<std::size_t, 3> split_sizes(std::size_t n, const SplitSpec& spec) {
  spec.validate();
  const std::array<double, 3> w{spec.train_frac, spec.val_frac, spec.test_frac};
  const auto c = apportion(n, w);
  return {c[0], c[1], c[2]};
}

SplitResult split_dataset(const Dataset& ds, const SplitSpec& spec) {
  spec.validate();
  if (ds.empty()) throw ConfigError("cannot split an empty dataset");
  const auto sizes = split_sizes(ds.size(), spec);
  std::vector<std::size_t> order(ds.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(spec.seed);
  rng.shuffle(std::span<std::size_t>(order));
  const std::span<const std::size_t> all(order);
  SplitResult out;
  out.train = ds.select(all.subspan(0, sizes[0]));
  out.val = ds.select(all.subspan(sizes[0], sizes[1]));
  out.test = ds.select(all.subspan(sizes[0] + sizes[1], sizes[2]));
  return out;
}

void PartitionSpec::validate() const {
  if (num_clients < 1) throw ConfigError("num_clients must be at least 1", "/partition/num_clients");
  if (scheme == PartitionScheme::dirichlet && !(dirichlet_alpha > 0.0)) {
    throw ConfigError("dirichlet_alpha must be positive", "/partition/dirichlet_alpha");
  }
}

std::string to_string(PartitionScheme s) { return s == PartitionScheme::iid ? "iid" : "dirichlet"; }

PartitionScheme partition_scheme_from_string(const std::string& s) {
  if (s == "iid") return PartitionScheme::iid;
  if (s == "dirichlet") return PartitionScheme::dirichlet;
  throw ConfigError("unknown partition scheme '" + s + "'", "/partition/scheme");
}

json PartitionManifest::to_json() const {
  return json{{"scheme", to_string(scheme)},
              {"seed", seed},
              {"dirichlet_alpha", dirichlet_alpha},
              {"num_clients", shards.size()},
              {"shards", shards}};
}

PartitionManifest PartitionManifest::from_json(const json& j) {
  PartitionManifest m;
  m.scheme = partition_scheme_from_string(j.at("scheme").get<std::string>());
  m.seed = j.at("seed").get<std::uint64_t>();
  m.dirichlet_alpha = j.value("dirichlet_alpha", 0.0);
  m.shards = j.at("shards").get<std::vector<std::vector<std::size_t>>>();
  return m;
}

namespace {

std::vector<double> dirichlet(Rng& rng, std::size_t k, double alpha) {
  std::vector<double> p(k);
  double sum = 0.0;
  for (double& x : p) {
    x = rng.gamma(alpha);
    sum += x;
  }
  if (!(sum > 0.0)) {
    // Every draw underflowed (tiny alpha): all mass on one client.
    std::fill(p.begin(), p.end(), 0.0);
    p[rng.below(k)] = 1.0;
    return p;
  }
  for (double& x : p) x /= sum;
  return p;
}

}  // namespace

PartitionManifest partition_manifest(const Dataset& train, const PartitionSpec& spec) {
  spec.validate();
  const std::size_t n = train.size();
  const std::size_t clients = spec.num_clients;
  if (n < clients) {
    throw PartitionError("cannot give " + std::to_string(clients) + " clients at least one sample from " +
                         std::to_string(n) + " samples");
  }
  Rng rng(spec.seed);
  std::vector<std::vector<std::size_t>> pos(clients);

  if (spec.scheme == PartitionScheme::iid) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    rng.shuffle(std::span<std::size_t>(order));
    for (std::size_t i = 0; i < n; ++i) pos[i % clients].push_back(order[i]);
  } else {
    const std::size_t classes = std::max<std::size_t>(train.num_classes(), 1);
    std::vector<std::vector<std::size_t>> by_class(classes);
    for (std::size_t i = 0; i < n; ++i) by_class[static_cast<std::size_t>(train.labels[i])].push_back(i);

    std::vector<std::vector<std::size_t>> counts(classes);
    bool satisfied = false;
    for (int attempt = 0; attempt < kMaxDirichletAttempts && !satisfied; ++attempt) {
      std::vector<std::size_t> totals(clients, 0);
      for (std::size_t c = 0; c < classes; ++c) {
        const auto p = dirichlet(rng, clients, spec.dirichlet_alpha);
        counts[c] = apportion(by_class[c].size(), p);
        for (std::size_t k = 0; k < clients; ++k) totals[k] += counts[c][k];
      }
      satisfied = std::all_of(totals.begin(), totals.end(), [](std::size_t t) { return t > 0; });
    }
    if (!satisfied) {
      throw PartitionError("dirichlet partition left a client empty after " +
                           std::to_string(kMaxDirichletAttempts) + " attempts");
    }
    for (std::size_t c = 0; c < classes; ++c) {
      rng.shuffle(std::span<std::size_t>(by_class[c]));
      std::size_t cursor = 0;
      for (std::size_t k = 0; k < clients; ++k) {
        for (std::size_t j = 0; j < counts[c][k]; ++j) pos[k].push_back(by_class[c][cursor++]);
      }
    }
  }

  PartitionManifest m;
  m.scheme = spec.scheme;
  m.seed = spec.seed;
  m.dirichlet_alpha = spec.scheme == PartitionScheme::dirichlet ? spec.dirichlet_alpha : 0.0;
  m.shards.resize(clients);
  for (std::size_t k = 0; k < clients; ++k) {
    std::sort(pos[k].begin(), pos[k].end());
    for (std::size_t p : pos[k]) m.shards[k].push_back(train.ids[p]);
  }
  return m;
}

std::vector<Dataset> apply_manifest(const Dataset& train, const PartitionManifest& manifest) {
  std::map<std::size_t, std::size_t> position;
  for (std::size_t i = 0; i < train.size(); ++i) position.emplace(train.ids[i], i);
  std::vector<Dataset> out;
  std::set<std::size_t> seen;
  for (const auto& shard : manifest.shards) {
    std::vector<std::size_t> rows;
    rows.reserve(shard.size());
    for (std::size_t id : shard) {
      const auto it = position.find(id);
      if (it == position.end()) throw PartitionError("manifest id " + std::to_string(id) + " not in dataset");
      if (!seen.insert(id).second) throw PartitionError("manifest id " + std::to_string(id) + " appears twice");
      rows.push_back(it->second);
    }
    out.push_back(train.select(rows));
  }
  return out;
}

std::vector<Dataset> partition_clients(const Dataset& train, const PartitionSpec& spec) {
  return apply_manifest(train, partition_manifest(train, spec));
}

Dataset gen_synthetic(std::size_t num_samples, std::size_t num_features, std::size_t num_classes,
                      double class_sep, std::uint64_t seed) {
  if (num_samples == 0 || num_features == 0 || num_classes == 0) {
    throw ConfigError("synthetic data needs positive sample, feature and class counts");
  }
  // Class c sits on axis c mod d; successive wraps alternate sign and grow,
  // so any two of the first 2d classes are class_sep apart.
  const double unit = class_sep / std::sqrt(2.0);
  std::vector<double> means(num_classes * num_features, 0.0);
  for (std::size_t c = 0; c < num_classes; ++c) {
    const std::size_t wrap = c / num_features;
    const double sign = wrap % 2 == 0 ? 1.0 : -1.0;
    means[c * num_features + c % num_features] = sign * unit * static_cast<double>(1 + wrap / 2);
  }
  Dataset ds;
  ds.num_features = num_features;
  for (std::size_t f = 0; f < num_features; ++f) ds.feature_names.push_back("f" + std::to_string(f));
  for (std::size_t c = 0; c < num_classes; ++c) ds.class_names.push_back("class" + std::to_string(c));
  ds.numeric.assign(num_features, 1);
  ds.features.resize(num_samples * num_features);
  Rng rng(seed);
  for (std::size_t i = 0; i < num_samples; ++i) {
    const std::size_t c = i % num_classes;
    for (std::size_t f = 0; f < num_features; ++f) {
      ds.features[i * num_features + f] = means[c * num_features + f] + rng.normal();
    }
    ds.labels.push_back(static_cast<int>(c));
    ds.ids.push_back(i);
  }
  return ds;
}

}  // namespace fedsense
