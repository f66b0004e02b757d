#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <future>
#include <map>
#include <thread>

#include "fedsense/federation.hpp"
#include "fedsense/sim.hpp"
#include "fedsense/transport.hpp"

using namespace fedsense;
using namespace fedsense::transport;
using namespace std::chrono_literals;

namespace {

ExperimentConfig lockstep(Strategy s) {
  ExperimentConfig c;
  c.strategy = s;
  c.seed = 4;
  c.data.synthetic = {600, 5, 3, 3.0};
  c.partition.num_clients = 3;
  c.m_fraction = 1.0;
  c.gsfs.perf_threshold = 0.0;
  c.gsfs.sensitivity = -1e6;
  c.gsfs.eval_every = 5;
  c.network = {0.0, 0.0, 1e300};
  c.compute.heterogeneity = 0.0;
  c.limits.max_aggregations = 5;
  c.record_trajectory = true;
  return c;
}

struct LoopbackRun {
  ServeResult server;
  std::vector<ClientRunResult> clients;
};

LoopbackRun run_loopback(const ExperimentConfig& cfg) {
  const Federation fed = build_federation(cfg);
  ServeOptions so;
  so.bind = Endpoint{"127.0.0.1", 0};
  so.num_clients = cfg.partition.num_clients;
  so.strategy = cfg.strategy;
  so.m_fraction = cfg.m_fraction;
  so.fedopt = cfg.fedopt;
  so.max_aggregations = cfg.limits.max_aggregations;
  so.idle_timeout = 20s;
  Server server(so, fed.initial);
  const auto port = server.bind();
  auto srv = std::async(std::launch::async, [&] { return server.run(); });
  std::vector<std::future<ClientRunResult>> cs;
  for (std::size_t k = 0; k < so.num_clients; ++k) {
    cs.push_back(std::async(std::launch::async, [&, k] {
      ClientOptions co;
      co.connect = Endpoint{"127.0.0.1", port};
      co.broadcast_timeout = 20s;
      auto st = make_client(k, fed.initial, fed.client_train[k], fed.client_val[k], fed.spec, cfg.gsfs, cfg.train,
                            client_batch_seed(cfg, k));
      return client_session(co, std::move(st), cfg.strategy, cfg.gsfs, cfg.train, fed.spec);
    }));
  }
  LoopbackRun r;
  for (auto& f : cs) r.clients.push_back(f.get());
  r.server = srv.get();
  return r;
}

double max_abs_diff(const ParameterVector& a, const ParameterVector& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.values()[i] - b.values()[i]));
  return m;
}

ParameterVector vec2(double a, double b) { return ParameterVector({a, b}, {LayerSlice{0, 0, 2, 0, 2}}); }

ClientUpdate upd(ClientId id, std::vector<double> v, std::uint64_t n = 10) {
  ClientUpdate u;
  u.client_id = id;
  const std::size_t n2 = v.size();
  u.delta = ParameterVector(std::move(v), {LayerSlice{0, 0, n2, 0, n2}});
  u.sample_count = n;
  return u;
}

}  // namespace

TEST_CASE("endpoint parsing") {
  const auto e = Endpoint::parse("10.0.0.2:7070");
  CHECK(e.host == "10.0.0.2");
  CHECK(e.port == 7070);
  CHECK(Endpoint::parse(":81").host == "127.0.0.1");
  CHECK(e.to_string() == "10.0.0.2:7070");
  CHECK_THROWS_AS(Endpoint::parse("nohost"), ConfigError);
  CHECK_THROWS_AS(Endpoint::parse("h:99999"), ConfigError);
  CHECK_THROWS_AS(Endpoint::parse("h:x"), ConfigError);
}

TEST_CASE("loopback run matches the simulator") {
  for (auto s : {Strategy::gsfs, Strategy::fedavg, Strategy::fedopt}) {
    CAPTURE(to_string(s));
    const auto cfg = lockstep(s);
    const auto sim = run_experiment(cfg);
    const auto net = run_loopback(cfg);
    CHECK(net.server.aggregations == 5);
    CHECK(sim.aggregations == 5);
    CHECK(max_abs_diff(net.server.state.global_params, sim.final_global) <= 1e-12);
    CHECK(net.server.reports.size() == 3);
    CHECK(net.server.rejected_connections == 0);
    for (const auto& c : net.clients) CHECK(c.last_round == 5);
  }
}

TEST_CASE("garbage connection is dropped without touching state") {
  const auto cfg = lockstep(Strategy::gsfs);
  const Federation fed = build_federation(cfg);
  ServeOptions so;
  so.num_clients = 3;
  so.m_fraction = 1.0;
  so.max_aggregations = 5;
  so.idle_timeout = 20s;
  std::size_t max_registered = 0;
  so.observer = [&](const ServerCore& core) { max_registered = std::max(max_registered, core.registered()); };
  Server server(so, fed.initial);
  const auto port = server.bind();
  auto srv = std::async(std::launch::async, [&] { return server.run(); });
  {
    auto raw = connect_with_retry(Endpoint{"127.0.0.1", port});
    const std::uint8_t junk[] = {'X', 'S', 'N', '1', 1, 0, 0, 0, 0, 12, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0};
    raw->write_all(junk);
    std::uint8_t buf[16];
    CHECK(raw->wait_readable(5s));
    CHECK(raw->read_some(buf) == 0);
  }
  {
    auto raw = connect_with_retry(Endpoint{"127.0.0.1", port});
    auto frame = wire::encode(make_register(0, fed.initial.size()));
    frame.back() ^= 0x40;
    raw->write_all(frame);
    std::uint8_t buf[16];
    CHECK(raw->wait_readable(5s));
    CHECK(raw->read_some(buf) == 0);
  }
  CHECK(max_registered == 0);
  std::vector<std::future<ClientRunResult>> cs;
  for (std::size_t k = 0; k < 3; ++k) {
    cs.push_back(std::async(std::launch::async, [&, k] {
      ClientOptions co;
      co.connect = Endpoint{"127.0.0.1", port};
      auto st = make_client(k, fed.initial, fed.client_train[k], fed.client_val[k], fed.spec, cfg.gsfs, cfg.train,
                            client_batch_seed(cfg, k));
      return client_session(co, std::move(st), cfg.strategy, cfg.gsfs, cfg.train, fed.spec);
    }));
  }
  for (auto& f : cs) f.get();
  const auto res = srv.get();
  CHECK(res.rejected_connections == 2);
  CHECK(res.aggregations == 5);
  CHECK(max_abs_diff(res.state.global_params, run_experiment(cfg).final_global) <= 1e-12);
}

TEST_CASE("server core registration rules") {
  ServerCore core(Strategy::gsfs, vec2(0.0, 0.0), 2, 0.5, {}, 3);
  CHECK_THROWS_AS(core.on_register({2, 2}), ProtocolError);
  CHECK_THROWS_AS(core.on_register({0, 3}), ProtocolError);
  CHECK(core.on_register({0, 2}).empty());
  CHECK_THROWS_AS(core.on_register({0, 2}), ProtocolError);
  CHECK_FALSE(core.started());
  const auto out = core.on_register({1, 2});
  REQUIRE(out.size() == 1);
  CHECK_FALSE(out[0].to.has_value());
  CHECK(out[0].msg.type == wire::MsgType::broadcast);
  CHECK(core.started());
  CHECK_THROWS_AS(core.on_register({1, 2}), ProtocolError);
}

TEST_CASE("server core keeps the latest update per client") {
  ServerCore core(Strategy::gsfs, vec2(0.0, 0.0), 3, 1.0, {}, 3);
  core.on_register({0, 2});
  core.on_register({1, 2});
  core.on_register({2, 2});
  CHECK(core.on_update(0, make_update(upd(0, {1.0, 1.0}), true)).empty());
  CHECK(core.on_update(1, make_update(upd(1, {2.0, 2.0}), true)).empty());
  CHECK(core.on_update(1, make_update(upd(1, {4.0, 6.0}), true)).empty());
  CHECK(core.pool().size() == 2);
  CHECK(core.pool().submission_count(1) == 2);
  CHECK(core.aggregations() == 0);
  // Spoofed sender, wrong length and wrong flag are all refused.
  CHECK_THROWS_AS(core.on_update(2, make_update(upd(0, {1.0, 1.0}), true)), ProtocolError);
  CHECK_THROWS_AS(core.on_update(2, make_update(upd(2, {1.0}), true)), ProtocolError);
  CHECK_THROWS_AS(core.on_update(2, make_update(upd(2, {1.0, 1.0}), false)), ProtocolError);
  CHECK(core.pool().size() == 2);

  const auto out = core.on_update(2, make_update(upd(2, {0.0, 0.0}), true));
  REQUIRE(out.size() == 1);
  CHECK(core.aggregations() == 1);
  // Equal counts after the two uploads from client 1 reweight toward it:
  // weights 1/4, 2/4, 1/4.
  CHECK(core.state().global_params.values()[0] == doctest::Approx(0.25 * 1 + 0.5 * 4));
  CHECK(core.state().global_params.values()[1] == doctest::Approx(0.25 * 1 + 0.5 * 6));
  CHECK(core.pool().size() == 0);
}

TEST_CASE("server core stops after the last aggregation") {
  ServerCore core(Strategy::fedavg, vec2(0.0, 0.0), 1, 1.0, {}, 2);
  core.on_register({0, 2});
  CHECK_THROWS_AS(core.on_update(0, make_update(upd(0, {1.0, 1.0}), true)), ProtocolError);
  auto out = core.on_update(0, make_update(upd(0, {1.0, 2.0}), false));
  CHECK(out.size() == 1);
  CHECK(core.state().global_params.values()[1] == 2.0);
  out = core.on_update(0, make_update(upd(0, {3.0, 3.0}), false));
  REQUIRE(out.size() == 2);
  CHECK(out[1].msg.type == wire::MsgType::shutdown);
  CHECK(core.finished());
  CHECK(core.on_update(0, make_update(upd(0, {9.0, 9.0}), false)).empty());
  CHECK(core.state().global_params.values()[0] == 3.0);
}

TEST_CASE("server core applies fedopt to pseudo-gradients") {
  FedOptConfig fo;
  fo.server_lr = 0.1;
  ServerCore core(Strategy::fedopt, vec2(0.0, 0.0), 1, 1.0, fo, 5);
  core.on_register({0, 2});
  core.on_update(0, make_update(upd(0, {1.0, -1.0}), true));
  // Local progress of +1 becomes pseudo-gradient -1; the first bias-free Adam
  // step moves by about lr in the direction of the delta.
  const auto& g = core.state().global_params.values();
  CHECK(g[0] > 0.0);
  CHECK(g[1] < 0.0);
  CHECK(std::abs(g[0]) == doctest::Approx(std::abs(g[1])));
}

TEST_CASE("client gives up when no server answers") {
  const auto cfg = lockstep(Strategy::gsfs);
  const Federation fed = build_federation(cfg);
  ClientOptions co;
  co.connect = Endpoint{"127.0.0.1", 1};
  co.max_attempts = 2;
  co.initial_backoff = 10ms;
  auto st = make_client(0, fed.initial, fed.client_train[0], fed.client_val[0], fed.spec, cfg.gsfs, cfg.train, 1);
  CHECK_THROWS_AS(client_session(co, std::move(st), cfg.strategy, cfg.gsfs, cfg.train, fed.spec), SessionError);
}

TEST_CASE("client times out waiting for a broadcast") {
  const auto cfg = lockstep(Strategy::gsfs);
  const Federation fed = build_federation(cfg);
  ServeOptions so;
  so.num_clients = 2;  // never starts with one client
  so.idle_timeout = 2s;
  Server server(so, fed.initial);
  const auto port = server.bind();
  auto srv = std::async(std::launch::async, [&] {
    try {
      return server.run();
    } catch (const Error&) {
      return ServeResult{};
    }
  });
  ClientOptions co;
  co.connect = Endpoint{"127.0.0.1", port};
  co.broadcast_timeout = 200ms;
  auto st = make_client(0, fed.initial, fed.client_train[0], fed.client_val[0], fed.spec, cfg.gsfs, cfg.train, 1);
  CHECK_THROWS_AS(client_session(co, std::move(st), cfg.strategy, cfg.gsfs, cfg.train, fed.spec), SessionError);
  srv.get();
}

TEST_CASE("concurrent uploads serialize into the pool") {
  constexpr std::size_t kSenders = 3, kEach = 40;
  ServeOptions so;
  so.num_clients = kSenders + 1;  // the idle member keeps the gate shut
  so.m_fraction = 1.0;
  so.idle_timeout = 1s;
  std::map<ClientId, ClientUpdate> entries;
  std::map<ClientId, std::uint64_t> counts;
  so.observer = [&](const ServerCore& core) {
    entries = core.pool().entries();
    counts = core.pool().submission_counts();
  };
  Server server(so, vec2(0.0, 0.0));
  const auto port = server.bind();
  auto srv = std::async(std::launch::async, [&] {
    try {
      server.run();
    } catch (const SessionError&) {
    }
  });
  std::vector<std::unique_ptr<Stream>> streams;
  for (std::size_t k = 0; k <= kSenders; ++k) {
    streams.push_back(connect_with_retry(Endpoint{"127.0.0.1", port}));
    send_message(*streams.back(), make_register(k, 2));
  }
  for (auto& s : streams) {
    MessageReader r(*s);
    REQUIRE(r.read(5s)->type == wire::MsgType::broadcast);
  }
  std::vector<std::thread> senders;
  for (std::size_t k = 0; k < kSenders; ++k) {
    senders.emplace_back([&, k] {
      for (std::size_t i = 1; i <= kEach; ++i) {
        const double v = static_cast<double>(k * 1000 + i);
        send_message(*streams[k], make_update(upd(k, {v, -v}, i), true));
      }
    });
  }
  for (auto& t : senders) t.join();
  srv.get();
  // Every per-client stream arrives in order, so the pool holds each
  // sender's final update and has counted all of them.
  REQUIRE(entries.size() == kSenders);
  for (std::size_t k = 0; k < kSenders; ++k) {
    CHECK(counts[k] == kEach);
    CHECK(entries[k].sample_count == kEach);
    CHECK(entries[k].delta.values()[0] == static_cast<double>(k * 1000 + kEach));
  }
}
