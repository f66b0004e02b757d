#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <sys/wait.h>
#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "fedsense/cli.hpp"
#include "fedsense/data.hpp"

using namespace fedsense;
using namespace fedsense::cli;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Workdir {
  fs::path path;
  Workdir() {
    static int n = 0;
    path = fs::temp_directory_path() / ("fedsense_cli_" + std::to_string(::getpid()) + "_" + std::to_string(n++));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~Workdir() { fs::remove_all(path); }
  fs::path operator/(const std::string& s) const { return path / s; }
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

void put(const fs::path& p, const std::string& text) { std::ofstream(p, std::ios::binary) << text; }

const char* kConfig = R"({
  "strategy": "gsfs",
  "strategies": ["gsfs", "fedopt", "fedavg"],
  "seed": 3,
  "data": {"source": "synthetic",
           "synthetic": {"num_samples": 600, "num_features": 5, "num_classes": 3, "class_sep": 3.0}},
  "partition": {"num_clients": 4, "scheme": "dirichlet", "dirichlet_alpha": 0.5},
  "gsfs": {"eval_every": 4},
  "compute": {"heterogeneity": 1.0},
  "limits": {"max_aggregations": 5}
}
)";

struct Result {
  int code;
  std::string out, err;
};

Result invoke(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

std::size_t count_lines(const std::string& s) { return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')); }

}  // namespace

TEST_CASE("run writes metrics, summary and the resolved config") {
  Workdir w;
  put(w / "cfg.json", kConfig);
  const auto r = invoke({"run", "--config", (w / "cfg.json").string(), "--out", (w / "a").string(), "--set",
                      "gsfs.sensitivity=2", "--event-log"});
  REQUIRE_MESSAGE(r.code == kExitOk, r.err);
  CHECK(fs::exists(w / "a/metrics.csv"));
  CHECK(fs::exists(w / "a/summary.json"));
  CHECK(fs::exists(w / "a/events.jsonl"));
  const auto resolved = json::parse(slurp(w / "a/resolved-config.json"));
  CHECK(resolved["gsfs"]["sensitivity"] == 2.0);
  CHECK(resolved["provenance"]["overrides"][0] == "gsfs.sensitivity=2");
  CHECK(resolved["provenance"]["seed"] == 3);
  const auto summary = json::parse(slurp(w / "a/summary.json"));
  CHECK(summary["aggregations"] == 5);
  CHECK(count_lines(slurp(w / "a/metrics.csv")) == 6);

  // The resolved config reproduces the run on its own.
  const auto again = invoke({"run", "--config", (w / "a/resolved-config.json").string(), "--out", (w / "b").string()});
  REQUIRE(again.code == kExitOk);
  CHECK(slurp(w / "a/metrics.csv") == slurp(w / "b/metrics.csv"));

  std::set<std::string> top;
  for (const auto& e : fs::directory_iterator(w.path)) top.insert(e.path().filename().string());
  CHECK(top == std::set<std::string>{"a", "b", "cfg.json"});
  std::set<std::string> inside;
  for (const auto& e : fs::directory_iterator(w / "a")) inside.insert(e.path().filename().string());
  CHECK(inside == std::set<std::string>{"events.jsonl", "metrics.csv", "resolved-config.json", "summary.json"});
}

TEST_CASE("same seed, same bytes; different seed, different bytes") {
  Workdir w;
  put(w / "cfg.json", kConfig);
  for (const char* d : {"x", "y"}) REQUIRE(invoke({"run", "--config", (w / "cfg.json").string(), "--out", (w / d).string()}).code == 0);
  CHECK(slurp(w / "x/metrics.csv") == slurp(w / "y/metrics.csv"));
  CHECK(slurp(w / "x/summary.json") == slurp(w / "y/summary.json"));
  REQUIRE(invoke({"run", "--config", (w / "cfg.json").string(), "--out", (w / "z").string(), "--seed", "4"}).code == 0);
  CHECK(slurp(w / "x/metrics.csv") != slurp(w / "z/metrics.csv"));
}

TEST_CASE("compare prints one row per strategy") {
  Workdir w;
  put(w / "cfg.json", kConfig);
  const auto r = invoke({"compare", "--config", (w / "cfg.json").string(), "--out", (w / "c").string()});
  REQUIRE_MESSAGE(r.code == kExitOk, r.err);
  std::istringstream in(slurp(w / "c/comparison.csv"));
  std::string line;
  std::vector<std::string> lines;
  while (std::getline(in, line)) lines.push_back(line);
  REQUIRE(lines.size() == 4);
  CHECK(std::count(lines[0].begin(), lines[0].end(), ',') == 10);
  CHECK(lines[1].rfind("gsfs,", 0) == 0);
  CHECK(r.out == slurp(w / "c/comparison.csv"));
  CHECK(json::parse(slurp(w / "c/comparison.json"))["rows"].size() == 3);
}

TEST_CASE("order assertions") {
  Workdir w;
  put(w / "cfg.json", kConfig);
  const auto cfg = (w / "cfg.json").string();
  const auto ok = invoke({"compare", "--config", cfg, "--out", (w / "o").string(), "--assert-order",
                       "uploads:gsfs<fedavg"});
  CHECK(ok.code == kExitOk);
  const auto bad = invoke({"compare", "--config", cfg, "--out", (w / "p").string(), "--assert-order",
                        "uploads:fedavg<gsfs"});
  CHECK(bad.code == kExitRuntime);
  CHECK(bad.err.find("uploads") != std::string::npos);
  CHECK(invoke({"compare", "--config", cfg, "--out", (w / "q").string(), "--assert-order", "speed:gsfs<fedavg"}).code ==
        kExitValidation);

  const auto a = parse_order_assertion("latency:gsfs<fedopt<fedavg");
  CHECK(a.metric == "latency");
  CHECK(a.chain == std::vector<Strategy>{Strategy::gsfs, Strategy::fedopt, Strategy::fedavg});
  CHECK(a.ops == std::vector<char>{'<', '<'});
  CHECK_THROWS(parse_order_assertion("latency:gsfs<"));
  CHECK_THROWS(parse_order_assertion("latency gsfs<fedavg"));
  CHECK_THROWS(parse_order_assertion("latency:gsfs<fedavg>"));
}

TEST_CASE("compare needs at least two strategies") {
  Workdir w;
  auto j = json::parse(kConfig);
  j["strategies"] = json::array();
  put(w / "cfg.json", j.dump(2));
  CHECK(invoke({"compare", "--config", (w / "cfg.json").string(), "--out", (w / "o").string()}).code == kExitValidation);
  j["strategies"] = {"gsfs"};
  put(w / "cfg.json", j.dump(2));
  CHECK(invoke({"compare", "--config", (w / "cfg.json").string(), "--out", (w / "o").string()}).code == kExitValidation);
}

TEST_CASE("gen-data output loads back cleanly and deterministically") {
  Workdir w;
  const auto gen = [&](const std::string& d) {
    return invoke({"gen-data", "--samples", "1000", "--features", "8", "--classes", "2", "--seed", "9", "--out",
                (w / d).string()});
  };
  REQUIRE(gen("g").code == kExitOk);
  const auto schema = load_schema(w / "g/schema.json");
  const auto loaded = load_csv(w / "g/data.csv", schema);
  CHECK(loaded.data.size() == 1000);
  CHECK(loaded.dropped_count == 0);
  CHECK(loaded.data.num_features == 8);
  REQUIRE(gen("h").code == kExitOk);
  CHECK(slurp(w / "g/data.csv") == slurp(w / "h/data.csv"));
  CHECK(slurp(w / "g/schema.json") == slurp(w / "h/schema.json"));

  // A config can point at the generated files relative to itself.
  auto j = json::parse(kConfig);
  j["data"] = {{"source", "csv"}, {"csv", {{"path", "g/data.csv"}, {"schema", "g/schema.json"}}}};
  put(w / "csv.json", j.dump(2));
  const auto r = invoke({"run", "--config", (w / "csv.json").string(), "--out", (w / "r").string()});
  CHECK_MESSAGE(r.code == kExitOk, r.err);
}

TEST_CASE("validation errors point at the offending line") {
  Workdir w;
  auto text = std::string(kConfig);
  text.replace(text.find("\"eval_every\""), 12, "\"eval_evry\"");
  put(w / "bad.json", text);
  const auto r = invoke({"validate-config", "--config", (w / "bad.json").string()});
  CHECK(r.code == kExitValidation);
  CHECK(r.err.find("bad.json:8:") != std::string::npos);
  CHECK(r.err.find("eval_evry") != std::string::npos);

  put(w / "good.json", kConfig);
  CHECK(invoke({"validate-config", "--config", (w / "good.json").string()}).code == kExitOk);
  const auto range = invoke({"validate-config", "--config", (w / "good.json").string(), "--set", "gsfs.smoothing=1.5"});
  CHECK(range.code == kExitValidation);
  CHECK(range.err.find("gsfs.smoothing=1.5") != std::string::npos);
  put(w / "syntax.json", "{\n  \"seed\": 1,\n  oops\n}\n");
  CHECK(invoke({"validate-config", "--config", (w / "syntax.json").string()}).code == kExitValidation);
  CHECK(invoke({"validate-config", "--config", (w / "missing.json").string()}).code == kExitValidation);
  CHECK(invoke({"frobnicate"}).code == kExitValidation);
  CHECK(invoke({"client", "--connect", "127.0.0.1:1"}).code == kExitValidation);
}

TEST_CASE("pointer lookup") {
  const std::string text = "{\n  \"a\": {\n    \"b\": 1,\n    \"c\": [1, 2]\n  },\n  \"b\": 2\n}\n";
  CHECK(locate_pointer(text, "/a/b") == 3u);
  CHECK(locate_pointer(text, "/b") == 6u);
  CHECK(locate_pointer(text, "/a/c/1") == 4u);
  CHECK(locate_pointer(text, "/a") == 2u);
  CHECK_FALSE(locate_pointer(text, "/zzz").has_value());
}

TEST_CASE("binary exit codes") {
  const char* bin = std::getenv("FEDSENSE_BIN");
  if (!bin) return;
  Workdir w;
  put(w / "cfg.json", kConfig);
  const auto sh = [&](const std::string& args) {
    const int s = std::system(("\"" + std::string(bin) + "\" " + args + " >/dev/null 2>&1").c_str());
    return WEXITSTATUS(s);
  };
  CHECK(sh("validate-config --config " + (w / "cfg.json").string()) == 0);
  CHECK(sh("validate-config --config " + (w / "nope.json").string()) == 2);
  CHECK(sh("run --config " + (w / "cfg.json").string() + " --out " + (w / "o").string()) == 0);
  CHECK(fs::exists(w / "o/metrics.csv"));
  CHECK(sh("--help") == 0);
}
