#include "fedsense/cli.hpp"

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "fedsense/error.hpp"
#include "fedsense/federation.hpp"
#include "fedsense/transport.hpp"

namespace fedsense::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Raised for bad input before anything runs; maps to exit status 2.
class ValidationFailure : public Error {
 public:
  using Error::Error;
};

std::vector<std::string> pointer_tokens(const std::string& pointer) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < pointer.size()) {
    if (pointer[i] != '/') break;
    const std::size_t next = pointer.find('/', i + 1);
    std::string tok = pointer.substr(i + 1, next == std::string::npos ? std::string::npos : next - i - 1);
    std::string dec;
    for (std::size_t k = 0; k < tok.size(); ++k) {
      if (tok[k] == '~' && k + 1 < tok.size()) {
        dec += tok[k + 1] == '1' ? '/' : '~';
        ++k;
      } else {
        dec += tok[k];
      }
    }
    out.push_back(std::move(dec));
    if (next == std::string::npos) break;
    i = next;
  }
  return out;
}

bool all_digits(const std::string& s) {
  return !s.empty() && std::all_of(s.begin(), s.end(), [](unsigned char c) { return std::isdigit(c); });
}

struct LoadedConfig {
  ExperimentConfig cfg;
  json provenance;
};

std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw ValidationFailure("cannot read config '" + p.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Rewrites a dotted override key as a JSON pointer so errors can be traced
// back to the --set flag that caused them.
std::string override_pointer(const std::string& assignment) {
  const std::string key = assignment.substr(0, assignment.find('='));
  std::string p = "/";
  for (char c : key) p += c == '.' ? '/' : c;
  return p;
}

LoadedConfig load_config(const std::string& path, const std::vector<std::string>& overrides,
                         std::optional<std::uint64_t> seed) {
  std::string text = "{}";
  fs::path base = fs::current_path();
  if (!path.empty()) {
    text = read_text(path);
    base = fs::absolute(path).parent_path();
  }
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ValidationFailure(path + ": " + e.what());
  }
  if (!j.is_object()) throw ValidationFailure(path + ":1: config must be a JSON object");
  // Relative data paths are taken relative to the config file.
  if (j.contains("data") && j["data"].is_object() && j["data"].contains("csv") && j["data"]["csv"].is_object()) {
    for (const char* key : {"path", "schema"}) {
      auto& v = j["data"]["csv"][key];
      if (v.is_string() && !v.get<std::string>().empty() && fs::path(v.get<std::string>()).is_relative()) {
        v = (base / v.get<std::string>()).lexically_normal().string();
      }
    }
  }
  try {
    for (const auto& o : overrides) apply_override(j, o);
    if (seed) j["seed"] = *seed;
  } catch (const ConfigError& e) {
    throw ValidationFailure(std::string("--set: ") + e.what());
  }

  LoadedConfig lc;
  try {
    lc.cfg = config_from_json(j);
  } catch (const ConfigError& e) {
    std::string where = path.empty() ? "<defaults>" : path;
    for (const auto& o : overrides) {
      const std::string op = override_pointer(o);
      if (e.path() == op || e.path().rfind(op + "/", 0) == 0) where = "--set " + o;
    }
    if (seed && e.path() == "/seed") where = "--seed";
    if (where == path) {
      if (auto line = locate_pointer(text, e.path())) where += ":" + std::to_string(*line);
    }
    const std::string ptr = e.path().empty() ? "" : e.path() + ": ";
    throw ValidationFailure(where + ": " + ptr + e.what());
  }
  lc.provenance = {{"config", path}, {"overrides", overrides}, {"seed", lc.cfg.seed}};
  return lc;
}

void write_file(const fs::path& p, const std::string& content) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw IoError("cannot write '" + p.string() + "'");
  out << content;
  if (!out) throw IoError("write failed for '" + p.string() + "'");
}

fs::path prepare_out(const std::string& dir) {
  fs::path p = dir.empty() ? fs::path(".") : fs::path(dir);
  std::error_code ec;
  fs::create_directories(p, ec);
  if (ec) throw IoError("cannot create output directory '" + p.string() + "': " + ec.message());
  return p;
}

void write_resolved(const fs::path& out, const LoadedConfig& lc) {
  json resolved = config_to_json(lc.cfg);
  resolved["provenance"] = lc.provenance;
  write_file(out / "resolved-config.json", resolved.dump(2) + "\n");
}

struct Common {
  std::string config;
  std::string out = ".";
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
};

void add_common(CLI::App* sub, Common& c, bool with_out) {
  sub->add_option("--config", c.config, "Experiment config (JSON)");
  if (with_out) sub->add_option("--out", c.out, "Output directory");
  sub->add_option("--set", c.overrides, "Override a config key, e.g. gsfs.sensitivity=2")->take_all();
  sub->add_option("--seed", c.seed, "Override the master seed");
}

std::optional<double> column_value(const ComparisonRow& r, const std::string& metric) {
  if (metric == "latency" || metric == "client_latency") return r.client_latency_s;
  if (metric == "central_latency") return r.central_latency_s;
  if (metric == "energy" || metric == "central_energy") return r.central_energy_rpm;
  if (metric == "client_energy") return r.client_energy_rpm;
  if (metric == "accuracy" || metric == "central_accuracy") return r.central_accuracy;
  if (metric == "client_accuracy") return r.client_accuracy;
  if (metric == "f1" || metric == "central_f1") return r.central_f1;
  if (metric == "client_f1") return r.client_f1;
  if (metric == "uploads" || metric == "uploads_total") return static_cast<double>(r.uploads_total);
  if (metric == "bytes" || metric == "bytes_total") return static_cast<double>(r.bytes_total);
  throw ConfigError("unknown metric '" + metric + "'");
}

int cmd_run(const Common& c, bool event_log, std::ostream& out) {
  const auto lc = load_config(c.config, c.overrides, c.seed);
  const fs::path dir = prepare_out(c.out);
  const RunMetrics m = run_experiment(lc.cfg);
  std::ostringstream csv;
  write_metrics_csv(m, csv);
  write_file(dir / "metrics.csv", csv.str());
  write_file(dir / "summary.json", summary_json(m).dump(2) + "\n");
  write_resolved(dir, lc);
  if (event_log) {
    std::ostringstream ev;
    m.log.write_jsonl(ev);
    write_file(dir / "events.jsonl", ev.str());
  }
  out << to_string(m.strategy) << ": " << m.aggregations << " aggregations, central accuracy "
      << format_real(m.final_central.accuracy) << ", uploads " << m.uploads_total << "\n";
  return kExitOk;
}

int cmd_compare(const Common& c, const std::vector<std::string>& asserts, std::ostream& out, std::ostream& err) {
  const auto lc = load_config(c.config, c.overrides, c.seed);
  if (lc.cfg.strategies.size() < 2) {
    throw ValidationFailure("compare needs at least two entries in 'strategies'");
  }
  std::vector<OrderAssertion> parsed;
  for (const auto& a : asserts) {
    try {
      parsed.push_back(parse_order_assertion(a));
    } catch (const ConfigError& e) {
      throw ValidationFailure(std::string("--assert-order: ") + e.what());
    }
  }
  const fs::path dir = prepare_out(c.out);
  const auto rows = compare_strategies(lc.cfg);
  std::ostringstream csv;
  write_comparison_csv(rows, csv);
  write_file(dir / "comparison.csv", csv.str());
  write_file(dir / "comparison.json", comparison_json(rows).dump(2) + "\n");
  write_resolved(dir, lc);
  out << csv.str();
  int status = kExitOk;
  for (const auto& a : parsed) {
    const std::string why = check_order(a, rows);
    if (!why.empty()) {
      err << "order assertion failed: " << why << "\n";
      status = kExitRuntime;
    }
  }
  return status;
}

struct GenArgs {
  std::size_t samples = 1000, features = 8, classes = 2;
  double sep = 3.0;
  std::uint64_t seed = 1;
  std::string out = ".";
};

int cmd_gen_data(const GenArgs& g, std::ostream& out) {
  if (g.samples == 0 || g.features == 0 || g.classes < 2 || !(g.sep >= 0.0)) {
    throw ValidationFailure("gen-data needs samples >= 1, features >= 1, classes >= 2, sep >= 0");
  }
  const fs::path dir = prepare_out(g.out);
  const Dataset ds = gen_synthetic(g.samples, g.features, g.classes, g.sep, g.seed);
  write_csv(ds, dir / "data.csv");
  write_file(dir / "schema.json", schema_for(ds).to_json().dump(2) + "\n");
  out << "wrote " << ds.size() << " samples to " << (dir / "data.csv").string() << "\n";
  return kExitOk;
}

int cmd_validate(const Common& c, std::ostream& out) {
  const auto lc = load_config(c.config, c.overrides, c.seed);
  out << "ok: " << (c.config.empty() ? "<defaults>" : c.config) << " (strategy " << to_string(lc.cfg.strategy) << ", "
      << lc.cfg.partition.num_clients << " clients)\n";
  return kExitOk;
}

json params_json(const ParameterVector& p) {
  json arr = json::array();
  for (double v : p.values()) arr.push_back(v);
  return arr;
}

int cmd_serve(const Common& c, const std::string& bind, long idle_ms, std::ostream& out) {
  const auto lc = load_config(c.config, c.overrides, c.seed);
  const Federation fed = build_federation(lc.cfg);
  transport::ServeOptions so;
  try {
    so.bind = transport::Endpoint::parse(bind);
  } catch (const ConfigError& e) {
    throw ValidationFailure(std::string("--bind: ") + e.what());
  }
  so.num_clients = lc.cfg.partition.num_clients;
  so.strategy = lc.cfg.strategy;
  so.m_fraction = lc.cfg.m_fraction;
  so.fedopt = lc.cfg.fedopt;
  so.max_aggregations = lc.cfg.limits.max_aggregations;
  so.idle_timeout = std::chrono::milliseconds(idle_ms);
  transport::Server server(so, fed.initial);
  const auto port = server.bind();
  spdlog::info("listening on {}:{}", so.bind.host, port);
  const auto res = server.run();
  json reports = json::array();
  for (const auto& r : res.reports) {
    reports.push_back({{"client_id", r.client_id},
                       {"round", r.round},
                       {"accuracy", r.metrics.accuracy},
                       {"f1", r.metrics.f1},
                       {"loss", r.metrics.loss}});
  }
  const json summary = {{"strategy", to_string(so.strategy)},
                        {"aggregations", res.aggregations},
                        {"round", res.state.round},
                        {"rejected_connections", res.rejected_connections},
                        {"reports", reports},
                        {"global_params", params_json(res.state.global_params)}};
  const fs::path dir = prepare_out(c.out);
  write_file(dir / "server-summary.json", summary.dump(2) + "\n");
  write_resolved(dir, lc);
  out << "server finished after " << res.aggregations << " aggregations\n";
  return kExitOk;
}

int cmd_client(const Common& c, const std::string& connect, std::uint64_t id, long timeout_ms, std::ostream& out) {
  const auto lc = load_config(c.config, c.overrides, c.seed);
  const auto& cfg = lc.cfg;
  if (id >= cfg.partition.num_clients) {
    throw ValidationFailure("--client-id must be below partition.num_clients (" +
                            std::to_string(cfg.partition.num_clients) + ")");
  }
  transport::ClientOptions co;
  try {
    co.connect = transport::Endpoint::parse(connect);
  } catch (const ConfigError& e) {
    throw ValidationFailure(std::string("--connect: ") + e.what());
  }
  co.broadcast_timeout = std::chrono::milliseconds(timeout_ms);
  const Federation fed = build_federation(cfg);
  ClientState st = make_client(id, fed.initial, fed.client_train[id], fed.client_val[id], fed.spec, cfg.gsfs,
                               cfg.train, client_batch_seed(cfg, id));
  const auto res = transport::client_session(co, std::move(st), cfg.strategy, cfg.gsfs, cfg.train, fed.spec);
  out << "client " << id << ": " << res.uploads << " uploads, " << res.broadcasts << " broadcasts, last round "
      << res.last_round << "\n";
  return kExitOk;
}

}  // namespace

std::optional<std::size_t> locate_pointer(const std::string& text, const std::string& pointer) {
  std::size_t i = 0;
  auto ws = [&] {
    while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
  };
  auto skip_string = [&] {
    for (++i; i < text.size() && text[i] != '"'; ++i) {
      if (text[i] == '\\') ++i;
    }
    ++i;
  };
  // Skips one value, nested containers included.
  auto skip_value = [&] {
    int depth = 0;
    do {
      ws();
      if (i >= text.size()) return;
      const char ch = text[i];
      if (ch == '"') {
        skip_string();
      } else if (ch == '{' || ch == '[') {
        ++depth;
        ++i;
      } else if (ch == '}' || ch == ']') {
        --depth;
        ++i;
      } else {
        while (i < text.size() && !std::isspace(static_cast<unsigned char>(text[i])) && text[i] != ',' &&
               text[i] != '}' && text[i] != ']') {
          ++i;
        }
      }
      ws();
      if (depth > 0 && i < text.size() && (text[i] == ',' || text[i] == ':')) ++i;
    } while (depth > 0 && i < text.size());
  };

  std::optional<std::size_t> found;
  ws();
  for (const auto& tok : pointer_tokens(pointer)) {
    if (i >= text.size()) break;
    bool hit = false;
    if (text[i] == '{') {
      ++i;
      for (ws(); i < text.size() && text[i] == '"';) {
        const std::size_t key_at = i;
        skip_string();
        const std::string key = text.substr(key_at + 1, i - key_at - 2);
        ws();
        if (i < text.size() && text[i] == ':') ++i;
        ws();
        if (key == tok) {
          found = key_at;
          hit = true;
          break;
        }
        skip_value();
        ws();
        if (i < text.size() && text[i] == ',') ++i;
        ws();
      }
    } else if (text[i] == '[' && all_digits(tok)) {
      ++i;
      ws();
      const auto want = std::stoul(tok);
      std::size_t n = 0;
      while (i < text.size() && text[i] != ']' && n < want) {
        skip_value();
        ws();
        if (i < text.size() && text[i] == ',') ++i;
        ws();
        ++n;
      }
      if (n == want && i < text.size() && text[i] != ']') {
        found = i;
        hit = true;
      }
    }
    if (!hit) break;
  }
  if (!found) return std::nullopt;
  return static_cast<std::size_t>(std::count(text.begin(), text.begin() + static_cast<std::ptrdiff_t>(*found), '\n')) + 1;
}

OrderAssertion parse_order_assertion(const std::string& text) {
  const auto colon = text.find(':');
  if (colon == std::string::npos || colon == 0) {
    throw ConfigError("expected metric:a<b<c, got '" + text + "'");
  }
  OrderAssertion a;
  a.metric = text.substr(0, colon);
  ComparisonRow probe{};
  column_value(probe, a.metric);  // rejects unknown metrics
  std::string cur;
  auto flush = [&] {
    if (cur.empty()) throw ConfigError("empty strategy name in '" + text + "'");
    a.chain.push_back(strategy_from_string(cur));
    cur.clear();
  };
  for (std::size_t i = colon + 1; i < text.size(); ++i) {
    const char ch = text[i];
    if (ch == '<' || ch == '>') {
      flush();
      a.ops.push_back(ch);
    } else if (!std::isspace(static_cast<unsigned char>(ch))) {
      cur += ch;
    }
  }
  flush();
  if (a.chain.size() < 2) throw ConfigError("order assertion needs at least two strategies");
  return a;
}

std::string check_order(const OrderAssertion& a, const std::vector<ComparisonRow>& rows) {
  auto value = [&](Strategy s) -> std::optional<double> {
    for (const auto& r : rows) {
      if (r.strategy == s) return column_value(r, a.metric);
    }
    throw ConfigError("strategy " + to_string(s) + " is not part of the comparison");
  };
  for (std::size_t i = 0; i + 1 < a.chain.size(); ++i) {
    const auto x = value(a.chain[i]);
    const auto y = value(a.chain[i + 1]);
    const std::string pair = to_string(a.chain[i]) + " " + a.ops[i] + " " + to_string(a.chain[i + 1]);
    if (!x || !y) return a.metric + ": " + pair + " undefined (no completed cycles)";
    const bool ok = a.ops[i] == '<' ? *x < *y : *x > *y;
    if (!ok) return a.metric + ": expected " + pair + ", got " + format_real(*x) + " vs " + format_real(*y);
  }
  return {};
}

void configure_logging() {
  static bool done = false;
  if (!done) {
    spdlog::set_default_logger(spdlog::stderr_color_mt("fedsense"));
    done = true;
  }
  spdlog::level::level_enum lvl = spdlog::level::warn;
  if (const char* env = std::getenv("FEDSENSE_LOG")) {
    const std::string v = env;
    if (v == "error") lvl = spdlog::level::err;
    else if (v == "warn") lvl = spdlog::level::warn;
    else if (v == "info") lvl = spdlog::level::info;
    else if (v == "debug") lvl = spdlog::level::debug;
  }
  spdlog::set_level(lvl);
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Federated learning simulator and runtime", "fedsense"};
  app.require_subcommand(1);

  Common run_c, cmp_c, val_c, srv_c, cli_c;
  bool event_log = false;
  std::vector<std::string> asserts;
  GenArgs gen;
  std::string bind = "127.0.0.1:7070", connect = "127.0.0.1:7070";
  std::uint64_t client_id = 0;
  long idle_ms = 120000, timeout_ms = 30000;

  auto* run = app.add_subcommand("run", "Simulate one strategy");
  add_common(run, run_c, true);
  run->add_flag("--event-log", event_log, "Also write events.jsonl");

  auto* cmp = app.add_subcommand("compare", "Simulate several strategies on shared data");
  add_common(cmp, cmp_c, true);
  cmp->add_option("--assert-order", asserts, "e.g. latency:gsfs<fedopt<fedavg")->take_all();

  auto* gd = app.add_subcommand("gen-data", "Write a synthetic dataset and schema");
  gd->add_option("--samples", gen.samples);
  gd->add_option("--features", gen.features);
  gd->add_option("--classes", gen.classes);
  gd->add_option("--sep", gen.sep);
  gd->add_option("--seed", gen.seed);
  gd->add_option("--out", gen.out);

  auto* val = app.add_subcommand("validate-config", "Check a config and exit");
  add_common(val, val_c, false);

  auto* srv = app.add_subcommand("serve", "Run the aggregation server over TCP");
  add_common(srv, srv_c, true);
  srv->add_option("--bind", bind, "host:port");
  srv->add_option("--idle-timeout-ms", idle_ms);

  auto* cl = app.add_subcommand("client", "Run one client over TCP");
  add_common(cl, cli_c, false);
  cl->add_option("--connect", connect, "host:port");
  cl->add_option("--client-id", client_id)->required();
  cl->add_option("--broadcast-timeout-ms", timeout_ms);

  try {
    std::vector<std::string> rev(args.rbegin(), args.rend());
    app.parse(rev);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitValidation;
  }

  try {
    if (*run) return cmd_run(run_c, event_log, out);
    if (*cmp) return cmd_compare(cmp_c, asserts, out, err);
    if (*gd) return cmd_gen_data(gen, out);
    if (*val) return cmd_validate(val_c, out);
    if (*srv) return cmd_serve(srv_c, bind, idle_ms, out);
    if (*cl) return cmd_client(cli_c, connect, client_id, timeout_ms, out);
  } catch (const ValidationFailure& e) {
    err << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const ConfigError& e) {
    err << "error: " << (e.path().empty() ? "" : e.path() + ": ") << e.what() << "\n";
    return kExitValidation;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitRuntime;
}

}  // namespace fedsense::cli
