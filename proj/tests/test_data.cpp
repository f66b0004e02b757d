#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>

#include "fedsense/data.hpp"
#include "fedsense/error.hpp"

using namespace fedsense;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir() {
  auto p = fs::temp_directory_path() / ("fedsense_data_" + std::to_string(::getpid()));
  fs::create_directories(p);
  return p;
}

fs::path write_text(const std::string& name, const std::string& text) {
  const auto p = temp_dir() / name;
  std::ofstream(p, std::ios::binary) << text;
  return p;
}

Schema two_feature_schema() {
  Schema s;
  s.feature_columns = {"a", "b"};
  s.label_column = "label";
  s.label_map = {{"benign", 0}, {"malicious", 1}};
  return s;
}

Dataset labelled(std::size_t n, std::size_t classes) {
  Dataset ds;
  ds.num_features = 1;
  for (std::size_t i = 0; i < n; ++i) {
    ds.features.push_back(static_cast<double>(i));
    ds.labels.push_back(static_cast<int>(i % classes));
    ds.ids.push_back(i);
  }
  ds.feature_names = {"x"};
  for (std::size_t c = 0; c < classes; ++c) ds.class_names.push_back("c" + std::to_string(c));
  ds.numeric = {1};
  return ds;
}

}  // namespace

TEST_CASE("load_csv drops a row with a missing field") {
  const auto p = write_text("five.csv",
                            "a,b,label\n1,2,benign\n3,4,malicious\n5,,benign\n7,8,benign\n9,10,malicious\n");
  const auto r = load_csv(p, two_feature_schema());
  CHECK(r.data.size() == 4);
  CHECK(r.dropped_count == 1);
  CHECK(r.input_rows == 5);
}

TEST_CASE("load_csv drops short rows, bad numbers and invalid UTF-8") {
  const auto p = write_text("dirty.csv",
                            "a,b,label\n1,2,benign\n3,benign\nx,4,benign\n1,inf,benign\n1,\xff,benign\n2,3,malicious\n");
  const auto r = load_csv(p, two_feature_schema());
  CHECK(r.data.size() == 2);
  CHECK(r.dropped_count == 4);
}

TEST_CASE("load_csv error paths") {
  const auto s = two_feature_schema();
  try {
    load_csv(write_text("unmapped.csv", "a,b,label\n1,2,benign\n1,2,scanner\n"), s);
    FAIL("expected a schema error");
  } catch (const SchemaError& e) {
    CHECK(std::string(e.what()).find("scanner") != std::string::npos);
  }
  CHECK_THROWS_AS(load_csv(temp_dir() / "missing.csv", s), IoError);
  CHECK_THROWS_AS(load_csv(write_text("hdr.csv", "a,c,label\n1,2,benign\n"), s), SchemaError);
  CHECK_THROWS_AS(load_csv(write_text("none.csv", "a,b,label\n1,,benign\n"), s), DataError);
}

TEST_CASE("categorical columns are one-hot encoded over sorted levels") {
  Schema s = two_feature_schema();
  s.feature_columns = {"a", "proto"};
  s.categorical_columns = {"proto"};
  const auto p = write_text("cat.csv", "a,proto,label\n1,udp,benign\n2,tcp,malicious\n3,icmp,benign\n");
  const auto r = load_csv(p, s);
  REQUIRE(r.data.num_features == 4);
  CHECK(r.data.feature_names == std::vector<std::string>{"a", "proto=icmp", "proto=tcp", "proto=udp"});
  CHECK(r.data.row(0)[3] == 1.0);
  CHECK(r.data.row(1)[2] == 1.0);
  CHECK(r.data.row(2)[1] == 1.0);
}

TEST_CASE("schema json round-trips") {
  auto s = two_feature_schema();
  s.class_names = {"benign", "malicious"};
  const auto back = Schema::from_json(s.to_json());
  CHECK(back.to_json() == s.to_json());
}

TEST_CASE("split sizes") {
  CHECK(split_sizes(48003, SplitSpec{0.7, 0.2, 0.1, 0}) == std::array<std::size_t, 3>{33602, 9601, 4800});
  CHECK(split_sizes(10, SplitSpec{0.7, 0.2, 0.1, 0}) == std::array<std::size_t, 3>{7, 2, 1});
  CHECK_THROWS_AS(SplitSpec({0.7, 0.2, 0.2, 0}).validate(), ConfigError);
}

TEST_CASE("split is a seeded permutation") {
  const auto ds = labelled(103, 3);
  const auto a = split_dataset(ds, {0.7, 0.2, 0.1, 5});
  const auto b = split_dataset(ds, {0.7, 0.2, 0.1, 5});
  CHECK(a.train.ids == b.train.ids);
  CHECK(a.test.ids == b.test.ids);
  std::vector<std::size_t> all;
  for (const auto* part : {&a.train, &a.val, &a.test}) all.insert(all.end(), part->ids.begin(), part->ids.end());
  std::sort(all.begin(), all.end());
  std::vector<std::size_t> expect(103);
  std::iota(expect.begin(), expect.end(), 0);
  CHECK(all == expect);
}

TEST_CASE("largest remainder apportionment sums to n") {
  Rng rng(1);
  for (int rep = 0; rep < 200; ++rep) {
    const std::size_t n = rng.below(100000);
    std::vector<double> w(1 + rng.below(6));
    double s = 0;
    for (auto& x : w) s += (x = rng.uniform() + 1e-3);
    for (auto& x : w) x /= s;
    const auto parts = apportion(n, w);
    CHECK(std::accumulate(parts.begin(), parts.end(), std::size_t{0}) == n);
    for (std::size_t i = 0; i < w.size(); ++i) CHECK(std::abs(static_cast<double>(parts[i]) - w[i] * n) < 1.0 + 1e-9);
  }
}

TEST_CASE("iid partition of 100 samples over 4 clients") {
  const auto shards = partition_clients(labelled(100, 2), {4, PartitionScheme::iid, 0.5, 3});
  REQUIRE(shards.size() == 4);
  for (const auto& s : shards) CHECK(s.size() == 25);
}

TEST_CASE("partitions are disjoint and cover the training set") {
  const auto ds = labelled(500, 4);
  for (auto scheme : {PartitionScheme::iid, PartitionScheme::dirichlet}) {
    const auto m = partition_manifest(ds, {7, scheme, 0.3, 11});
    std::vector<std::size_t> all;
    for (const auto& s : m.shards) {
      CHECK(!s.empty());
      all.insert(all.end(), s.begin(), s.end());
    }
    std::sort(all.begin(), all.end());
    CHECK(std::adjacent_find(all.begin(), all.end()) == all.end());
    CHECK(all.size() == 500);
  }
}

TEST_CASE("near-infinite dirichlet alpha tracks the global class mix") {
  const auto ds = labelled(4000, 4);
  const auto shards = partition_clients(ds, {5, PartitionScheme::dirichlet, 1e6, 2});
  for (const auto& s : shards) {
    std::vector<double> freq(4, 0.0);
    for (int l : s.labels) freq[l] += 1.0 / static_cast<double>(s.size());
    for (double f : freq) CHECK(std::abs(f - 0.25) < 0.05);
  }
}

TEST_CASE("pigeonhole: more clients than samples") {
  CHECK_THROWS_AS(partition_clients(labelled(3, 2), {4, PartitionScheme::iid, 0.5, 0}), PartitionError);
  CHECK_THROWS_AS(partition_clients(labelled(3, 2), {4, PartitionScheme::dirichlet, 0.5, 0}), PartitionError);
}

TEST_CASE("manifest round-trips and rejects unknown ids") {
  const auto ds = labelled(60, 3);
  const auto m = partition_manifest(ds, {3, PartitionScheme::dirichlet, 0.7, 4});
  const auto back = PartitionManifest::from_json(m.to_json());
  CHECK(back.shards == m.shards);
  auto a = apply_manifest(ds, back);
  auto b = partition_clients(ds, {3, PartitionScheme::dirichlet, 0.7, 4});
  for (std::size_t k = 0; k < 3; ++k) CHECK(a[k].ids == b[k].ids);
  auto bad = m;
  bad.shards[0].push_back(999);
  CHECK_THROWS_AS(apply_manifest(ds, bad), PartitionError);
}

TEST_CASE("standardizer") {
  auto ds = labelled(5, 2);
  ds.num_features = 2;
  ds.features = {1, 7, 2, 7, 3, 7, 4, 7, 5, 7};
  ds.feature_names = {"x", "const"};
  ds.numeric = {1, 1};
  const auto st = Standardizer::fit(ds);
  st.apply(ds);
  double mean = 0, var = 0;
  for (std::size_t i = 0; i < 5; ++i) mean += ds.row(i)[0] / 5;
  for (std::size_t i = 0; i < 5; ++i) var += (ds.row(i)[0] - mean) * (ds.row(i)[0] - mean) / 5;
  CHECK(std::abs(mean) < 1e-12);
  CHECK(std::abs(var - 1.0) < 1e-12);
  for (std::size_t i = 0; i < 5; ++i) CHECK(ds.row(i)[1] == 0.0);
}

TEST_CASE("synthetic data is separable at sep 4 and random at sep 0") {
  auto accuracy = [](double sep) {
    const auto ds = gen_synthetic(1000, 8, 2, sep, 1);
    const auto sp = split_dataset(ds, {0.7, 0.2, 0.1, 1});
    ModelSpec spec{8, {}, 2};
    TrainConfig cfg{20, 0.1, 32, 3};
    const auto p = local_train(init_params(spec, 1), sp.train.samples(), cfg, spec).params;
    // Held-out remainder: val + test.
    Dataset rest = sp.val;
    rest.features.insert(rest.features.end(), sp.test.features.begin(), sp.test.features.end());
    rest.labels.insert(rest.labels.end(), sp.test.labels.begin(), sp.test.labels.end());
    return evaluate(p, rest.samples(), spec).accuracy;
  };
  CHECK(accuracy(4.0) > 0.95);
  CHECK(std::abs(accuracy(0.0) - 0.5) < 0.05);
  CHECK(gen_synthetic(50, 3, 3, 2.0, 9).features == gen_synthetic(50, 3, 3, 2.0, 9).features);
}

TEST_CASE("write_csv output reloads without drops") {
  const auto ds = gen_synthetic(200, 4, 3, 2.0, 5);
  const auto dir = temp_dir();
  write_csv(ds, dir / "syn.csv");
  const auto r = load_csv(dir / "syn.csv", schema_for(ds));
  CHECK(r.dropped_count == 0);
  CHECK(r.data.features == ds.features);
  CHECK(r.data.labels == ds.labels);
}
