#include "fedsense/transport.hpp"

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <atomic>
#include <charconv>
#include <cerrno>
#include <condition_variable>
#include <cstring>
#include <deque>
#include <mutex>
#include <thread>

#include <spdlog/spdlog.h>

namespace fedsense::transport {

using namespace std::chrono_literals;
using wire::MsgType;
using wire::WireMessage;

namespace {

class SocketStream final : public Stream {
 public:
  explicit SocketStream(int fd) : fd_(fd) {
    int one = 1;
    ::setsockopt(fd_, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
  }
  ~SocketStream() override {
    if (fd_ >= 0) ::close(fd_);
  }

  std::size_t read_some(std::span<std::uint8_t> buf) override {
    for (;;) {
      const ssize_t n = ::recv(fd_, buf.data(), buf.size(), 0);
      if (n >= 0) return static_cast<std::size_t>(n);
      if (errno == EINTR) continue;
      if (errno == ECONNRESET || errno == ENOTCONN) return 0;
      throw SessionError(std::string("recv failed: ") + std::strerror(errno));
    }
  }

  void write_all(std::span<const std::uint8_t> bytes) override {
    std::size_t off = 0;
    while (off < bytes.size()) {
      const ssize_t n = ::send(fd_, bytes.data() + off, bytes.size() - off, MSG_NOSIGNAL);
      if (n < 0) {
        if (errno == EINTR) continue;
        throw SessionError(std::string("send failed: ") + std::strerror(errno));
      }
      off += static_cast<std::size_t>(n);
    }
  }

  bool wait_readable(std::chrono::milliseconds timeout) override {
    pollfd p{fd_, POLLIN, 0};
    for (;;) {
      const int r = ::poll(&p, 1, static_cast<int>(timeout.count()));
      if (r >= 0) return r > 0;
      if (errno != EINTR) throw SessionError(std::string("poll failed: ") + std::strerror(errno));
    }
  }

  void shutdown() override { ::shutdown(fd_, SHUT_RDWR); }

 private:
  int fd_;
};

sockaddr_in resolve(const Endpoint& ep) {
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(ep.port);
  if (::inet_pton(AF_INET, ep.host.c_str(), &addr.sin_addr) == 1) return addr;
  addrinfo hints{};
  hints.ai_family = AF_INET;
  hints.ai_socktype = SOCK_STREAM;
  addrinfo* res = nullptr;
  if (::getaddrinfo(ep.host.c_str(), nullptr, &hints, &res) != 0 || !res) {
    throw SessionError("cannot resolve host '" + ep.host + "'");
  }
  addr.sin_addr = reinterpret_cast<sockaddr_in*>(res->ai_addr)->sin_addr;
  ::freeaddrinfo(res);
  return addr;
}

std::unique_ptr<Stream> apply_wrap(const StreamWrapper& wrap, std::unique_ptr<Stream> s) {
  return wrap ? wrap(std::move(s)) : std::move(s);
}

}  // namespace

Endpoint Endpoint::parse(const std::string& text) {
  const auto colon = text.rfind(':');
  if (colon == std::string::npos || colon + 1 == text.size()) {
    throw ConfigError("address '" + text + "' is not host:port");
  }
  Endpoint ep;
  ep.host = colon == 0 ? "127.0.0.1" : text.substr(0, colon);
  unsigned port = 0;
  const char* first = text.data() + colon + 1;
  const char* last = text.data() + text.size();
  const auto [end, ec] = std::from_chars(first, last, port);
  if (ec != std::errc{} || end != last || port > 65535) {
    throw ConfigError("bad port in '" + text + "'");
  }
  ep.port = static_cast<std::uint16_t>(port);
  return ep;
}

std::string Endpoint::to_string() const { return host + ":" + std::to_string(port); }

std::unique_ptr<Stream> connect_with_retry(const Endpoint& ep, int max_attempts,
                                           std::chrono::milliseconds initial_backoff,
                                           std::chrono::milliseconds max_backoff) {
  const sockaddr_in addr = resolve(ep);
  auto backoff = initial_backoff;
  std::string last_error;
  for (int attempt = 1; attempt <= max_attempts; ++attempt) {
    const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
    if (fd < 0) throw SessionError(std::string("socket failed: ") + std::strerror(errno));
    if (::connect(fd, reinterpret_cast<const sockaddr*>(&addr), sizeof addr) == 0) {
      return std::make_unique<SocketStream>(fd);
    }
    last_error = std::strerror(errno);
    ::close(fd);
    spdlog::debug("connect to {} failed (attempt {}/{}): {}", ep.to_string(), attempt, max_attempts, last_error);
    if (attempt < max_attempts) {
      std::this_thread::sleep_for(backoff);
      backoff = std::min(backoff * 2, max_backoff);
    }
  }
  throw SessionError("could not connect to " + ep.to_string() + " after " + std::to_string(max_attempts) +
                     " attempts: " + last_error);
}

void send_message(Stream& s, const WireMessage& msg) { s.write_all(wire::encode(msg)); }

bool MessageReader::fill(std::chrono::milliseconds timeout) {
  if (eof_) return false;
  if (!stream_.wait_readable(timeout)) return false;
  std::uint8_t buf[64 * 1024];
  const std::size_t n = stream_.read_some(buf);
  if (n == 0) {
    eof_ = true;
    return false;
  }
  decoder_.feed(std::span<const std::uint8_t>(buf, n));
  return true;
}

std::optional<WireMessage> MessageReader::read(std::chrono::milliseconds timeout) {
  const auto deadline = std::chrono::steady_clock::now() + timeout;
  for (;;) {
    if (auto m = decoder_.next()) return m;
    if (eof_) {
      if (decoder_.buffered() > 0) throw ProtocolError("stream ended inside a frame");
      return std::nullopt;
    }
    const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - std::chrono::steady_clock::now());
    if (left <= 0ms) throw SessionError("timed out waiting for a message");
    fill(left);
  }
}

std::optional<WireMessage> MessageReader::poll() {
  for (;;) {
    if (auto m = decoder_.next()) return m;
    if (!fill(0ms)) return std::nullopt;
  }
}

WireMessage make_register(ClientId id, std::size_t vector_len) {
  wire::RegisterPayload p{id, static_cast<std::uint32_t>(vector_len)};
  return WireMessage{MsgType::register_client, 0, p.encode()};
}

WireMessage make_update(const ClientUpdate& upd, bool is_delta) {
  wire::UpdatePayload p;
  p.client_id = upd.client_id;
  p.round_hint = static_cast<std::uint32_t>(upd.round_hint);
  p.sample_count = static_cast<std::uint32_t>(upd.sample_count);
  p.values.assign(upd.delta.values().begin(), upd.delta.values().end());
  return WireMessage{MsgType::client_update, static_cast<std::uint8_t>(is_delta ? wire::kFlagDelta : 0), p.encode()};
}

WireMessage make_broadcast(const ParameterVector& global, std::uint64_t round) {
  wire::UpdatePayload p;
  p.round_hint = static_cast<std::uint32_t>(round);
  p.values.assign(global.values().begin(), global.values().end());
  return WireMessage{MsgType::broadcast, 0, p.encode()};
}

WireMessage make_shutdown() { return WireMessage{MsgType::shutdown, 0, {}}; }

// ---------------------------------------------------------------------------
// ServerCore

ServerCore::ServerCore(Strategy strategy, ParameterVector initial, std::size_t num_clients, double m_fraction,
                       FedOptConfig fedopt, std::uint64_t max_aggregations)
    : strategy_(strategy),
      num_clients_(num_clients),
      fedopt_(fedopt),
      max_aggregations_(max_aggregations),
      state_(ServerState::fresh(std::move(initial), strategy)),
      pool_(strategy == Strategy::gsfs ? m_fraction : 1.0) {
  if (num_clients == 0) throw ConfigError("server needs at least one client");
}

bool ServerCore::is_registered(ClientId id) const {
  return std::find(registered_.begin(), registered_.end(), id) != registered_.end();
}

std::vector<ServerCore::Outbound> ServerCore::on_register(const wire::RegisterPayload& reg) {
  if (started_) throw ProtocolError("registration after the run started");
  if (reg.client_id >= num_clients_) throw ProtocolError("client id " + std::to_string(reg.client_id) + " out of range");
  if (is_registered(reg.client_id)) throw ProtocolError("client id " + std::to_string(reg.client_id) + " already registered");
  if (reg.vector_len != state_.global_params.size()) {
    throw ProtocolError("client declared " + std::to_string(reg.vector_len) + " parameters, model has " +
                        std::to_string(state_.global_params.size()));
  }
  registered_.push_back(reg.client_id);
  if (registered_.size() < num_clients_) return {};
  started_ = true;
  return {Outbound{std::nullopt, make_broadcast(state_.global_params, 0)}};
}

std::vector<ServerCore::Outbound> ServerCore::on_update(ClientId from, const WireMessage& msg) {
  if (!started_ || finished_) return {};
  const auto p = wire::UpdatePayload::decode(msg.payload);
  if (p.client_id != from) throw ProtocolError("update claims client " + std::to_string(p.client_id));
  if (p.values.size() != state_.global_params.size()) throw ProtocolError("update vector_len does not match the model");
  const bool is_delta = (msg.flags & wire::kFlagDelta) != 0;
  if (is_delta != (strategy_ != Strategy::fedavg)) {
    throw ProtocolError(strategy_ == Strategy::fedavg ? "fedavg expects full parameters" : "expected a parameter delta");
  }
  ClientUpdate upd;
  upd.client_id = from;
  upd.delta = ParameterVector(p.values, state_.global_params.layers());
  upd.sample_count = std::max<std::uint32_t>(p.sample_count, 1);
  upd.round_hint = p.round_hint;
  pool_.add(std::move(upd), &state_.global_params);
  const bool ready = strategy_ == Strategy::gsfs ? pool_ready(pool_, num_clients_) : pool_.size() == num_clients_;
  return ready ? aggregate() : std::vector<Outbound>{};
}

std::vector<ServerCore::Outbound> ServerCore::aggregate() {
  switch (strategy_) {
    case Strategy::gsfs: {
      auto res = gsfs_aggregate(std::move(state_), std::move(pool_), num_clients_);
      state_ = std::move(res.state);
      pool_ = std::move(res.pool);
      break;
    }
    case Strategy::fedavg: {
      std::vector<WeightedParams> w;
      for (const auto& [_, u] : pool_.entries()) w.push_back({&u.delta, u.sample_count});
      state_.global_params = fedavg_aggregate(w);
      ++state_.round;
      pool_.clear_entries();
      break;
    }
    case Strategy::fedopt: {
      std::vector<ParameterVector> g;
      for (const auto& [_, u] : pool_.entries()) g.push_back(fedopt_pseudo_gradient(u.delta));
      state_ = fedopt_server_step(std::move(state_), g, fedopt_);
      pool_.clear_entries();
      break;
    }
  }
  ++aggregations_;
  std::vector<Outbound> out{Outbound{std::nullopt, make_broadcast(state_.global_params, aggregations_)}};
  if (aggregations_ >= max_aggregations_) {
    finished_ = true;
    out.push_back(Outbound{std::nullopt, make_shutdown()});
  }
  return out;
}

void ServerCore::on_metrics(const wire::MetricsPayload& m) { reports_.push_back(m); }

void ServerCore::on_disconnect(ClientId id) {
  if (!finished_) spdlog::warn("client {} disconnected before the run finished", id);
}

// ---------------------------------------------------------------------------
// Socket server

struct Server::Impl {
  struct Session {
    std::unique_ptr<Stream> stream;
    std::thread reader;
    std::optional<ClientId> client;
    bool open = true;
  };
  enum class InKind { message, closed, rejected };
  struct Inbound {
    std::size_t session;
    InKind kind;
    WireMessage msg;
  };

  ServeOptions opts;
  ParameterVector initial;
  int listen_fd = -1;
  std::uint16_t port = 0;

  std::mutex sessions_mu;
  std::deque<Session> sessions;  // stable addresses
  std::atomic<bool> stopping{false};
  std::thread acceptor;

  std::mutex inbox_mu;
  std::condition_variable inbox_cv;
  std::deque<Inbound> inbox;

  Impl(ServeOptions o, ParameterVector init) : opts(std::move(o)), initial(std::move(init)) {}

  ~Impl() {
    stop_all();
    if (listen_fd >= 0) ::close(listen_fd);
  }

  void push(Inbound in) {
    {
      std::lock_guard lk(inbox_mu);
      inbox.push_back(std::move(in));
    }
    inbox_cv.notify_one();
  }

  void read_loop(std::size_t id, Stream* stream) {
    MessageReader reader(*stream);
    try {
      for (;;) {
        auto m = reader.read(std::chrono::hours(24 * 365));
        if (!m) break;
        push({id, InKind::message, std::move(*m)});
      }
      push({id, InKind::closed, {}});
    } catch (const ProtocolError& e) {
      spdlog::warn("session {}: {}; disconnecting", id, e.what());
      stream->shutdown();
      push({id, InKind::rejected, {}});
    } catch (const std::exception& e) {
      spdlog::debug("session {} ended: {}", id, e.what());
      push({id, InKind::closed, {}});
    }
  }

  void accept_loop() {
    while (!stopping.load()) {
      pollfd p{listen_fd, POLLIN, 0};
      if (::poll(&p, 1, 50) <= 0) continue;
      const int fd = ::accept(listen_fd, nullptr, nullptr);
      if (fd < 0) continue;
      std::unique_ptr<Stream> s = std::make_unique<SocketStream>(fd);
      try {
        s = apply_wrap(opts.wrap, std::move(s));
      } catch (const std::exception& e) {
        spdlog::warn("stream wrapper rejected a connection: {}", e.what());
        continue;
      }
      std::lock_guard lk(sessions_mu);
      const std::size_t id = sessions.size();
      auto& sess = sessions.emplace_back();
      sess.stream = std::move(s);
      Stream* raw = sess.stream.get();
      sess.reader = std::thread([this, id, raw] { read_loop(id, raw); });
    }
  }

  void stop_all() {
    stopping.store(true);
    if (acceptor.joinable()) acceptor.join();
    std::lock_guard lk(sessions_mu);
    for (auto& s : sessions) s.stream->shutdown();
    for (auto& s : sessions) {
      if (s.reader.joinable()) s.reader.join();
    }
  }

  Session& session(std::size_t id) {
    std::lock_guard lk(sessions_mu);
    return sessions[id];
  }

  void drop(std::size_t id) {
    Session& s = session(id);
    s.stream->shutdown();
  }

  void deliver(ServerCore& core, const std::vector<ServerCore::Outbound>& out) {
    for (const auto& o : out) {
      const auto bytes = wire::encode(o.msg);
      std::lock_guard lk(sessions_mu);
      for (auto& s : sessions) {
        if (!s.open || !s.client) continue;
        if (o.to && *o.to != *s.client) continue;
        try {
          s.stream->write_all(bytes);
        } catch (const std::exception& e) {
          spdlog::warn("send to client {} failed: {}", *s.client, e.what());
        }
      }
    }
    (void)core;
  }

  ServeResult run() {
    if (listen_fd < 0) throw SessionError("server is not bound");
    ServerCore core(opts.strategy, initial, opts.num_clients, opts.m_fraction, opts.fedopt, opts.max_aggregations);
    ServeResult result;
    acceptor = std::thread([this] { accept_loop(); });

    std::size_t open_registered = 0;
    for (;;) {
      if (core.finished() && open_registered == 0) break;
      Inbound in;
      bool idle = false;
      {
        std::unique_lock lk(inbox_mu);
        // After the run finishes, wait briefly for clients to report and hang up.
        const auto wait = core.finished() ? std::min(opts.idle_timeout, std::chrono::milliseconds(5000)) : opts.idle_timeout;
        if (inbox_cv.wait_for(lk, wait, [&] { return !inbox.empty(); })) {
          in = std::move(inbox.front());
          inbox.pop_front();
        } else {
          idle = true;
        }
      }
      // Readers take inbox_mu on their way out, so stop them unlocked.
      if (idle) {
        if (core.finished()) break;
        stop_all();
        throw SessionError("server idle for " + std::to_string(opts.idle_timeout.count()) + " ms");
      }
      Session& sess = session(in.session);
      if (in.kind != InKind::message) {
        if (sess.open && sess.client) {
          core.on_disconnect(*sess.client);
          --open_registered;
        }
        if (!sess.client) ++result.rejected_connections;
        sess.open = false;
        continue;
      }
      if (!sess.open) continue;
      try {
        switch (in.msg.type) {
          case MsgType::register_client: {
            if (sess.client) throw ProtocolError("session registered twice");
            const auto reg = wire::RegisterPayload::decode(in.msg.payload);
            auto out = core.on_register(reg);
            {
              std::lock_guard lk(sessions_mu);
              sess.client = reg.client_id;
            }
            ++open_registered;
            deliver(core, out);
            break;
          }
          case MsgType::client_update: {
            if (!sess.client) throw ProtocolError("update before registration");
            deliver(core, core.on_update(*sess.client, in.msg));
            break;
          }
          case MsgType::metrics_report:
            if (!sess.client) throw ProtocolError("metrics before registration");
            core.on_metrics(wire::MetricsPayload::decode(in.msg.payload));
            break;
          case MsgType::shutdown:
            break;
          case MsgType::broadcast:
            throw ProtocolError("clients may not broadcast");
        }
      } catch (const ProtocolError& e) {
        spdlog::warn("session {}: {}; disconnecting", in.session, e.what());
        drop(in.session);
      }
      if (opts.observer) opts.observer(core);
    }
    stop_all();
    result.state = core.state();
    result.aggregations = core.aggregations();
    result.reports = core.reports();
    return result;
  }
};

Server::Server(ServeOptions opts, ParameterVector initial)
    : impl_(std::make_unique<Impl>(std::move(opts), std::move(initial))) {}

Server::~Server() = default;

std::uint16_t Server::bind() {
  const sockaddr_in addr = resolve(impl_->opts.bind);
  const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
  if (fd < 0) throw SessionError(std::string("socket failed: ") + std::strerror(errno));
  int one = 1;
  ::setsockopt(fd, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
  if (::bind(fd, reinterpret_cast<const sockaddr*>(&addr), sizeof addr) != 0 || ::listen(fd, 64) != 0) {
    const std::string err = std::strerror(errno);
    ::close(fd);
    throw SessionError("cannot listen on " + impl_->opts.bind.to_string() + ": " + err);
  }
  sockaddr_in bound{};
  socklen_t len = sizeof bound;
  ::getsockname(fd, reinterpret_cast<sockaddr*>(&bound), &len);
  impl_->listen_fd = fd;
  impl_->port = ntohs(bound.sin_port);
  return impl_->port;
}

ServeResult Server::run() { return impl_->run(); }

ServeResult serve(const ServeOptions& opts, ParameterVector initial) {
  Server server(opts, std::move(initial));
  server.bind();
  return server.run();
}

// ---------------------------------------------------------------------------
// Client session

ClientRunResult client_session(const ClientOptions& opts, ClientState state, Strategy strategy,
                               const GsfsClientConfig& gcfg, const TrainConfig& tcfg, const ModelSpec& spec) {
  auto stream = apply_wrap(opts.wrap, connect_with_retry(opts.connect, opts.max_attempts, opts.initial_backoff,
                                                         opts.max_backoff));
  MessageReader reader(*stream);
  ClientRunResult result;
  send_message(*stream, make_register(state.client_id, state.local_params.size()));

  bool shutdown = false;
  auto apply = [&](const WireMessage& m) {
    if (m.type == MsgType::shutdown) {
      shutdown = true;
      return;
    }
    if (m.type != MsgType::broadcast) return;
    const auto p = wire::UpdatePayload::decode(m.payload);
    ParameterVector global(p.values, state.local_params.layers());
    if (strategy == Strategy::gsfs) {
      on_broadcast(state, global, spec, gcfg);
    } else {
      state.local_params = global;
      state.reference_params = std::move(global);
    }
    ++result.broadcasts;
    result.last_round = p.round_hint;
  };
  auto await_broadcast = [&] {
    for (;;) {
      std::optional<WireMessage> m;
      try {
        m = reader.read(opts.broadcast_timeout);
      } catch (const SessionError&) {
        throw SessionError("client " + std::to_string(state.client_id) + ": no broadcast within " +
                           std::to_string(opts.broadcast_timeout.count()) + " ms");
      }
      if (!m) throw SessionError("server closed the connection");
      apply(*m);
      if (shutdown || m->type == MsgType::broadcast) return;
    }
  };

  await_broadcast();
  while (!shutdown) {
    if (strategy == Strategy::gsfs) {
      auto step = client_step(state, gcfg, tcfg, spec, 0.0, result.last_round);
      if (step.upload) {
        send_message(*stream, make_update(*step.upload, true));
        ++result.uploads;
        await_broadcast();
      } else {
        while (!shutdown) {
          auto m = reader.poll();
          if (!m) break;
          apply(*m);
        }
      }
    } else {
      auto trained = local_train(state.local_params, state.train_shard->samples(), tcfg, spec, *state.batches);
      state.local_params = std::move(trained.params);
      ClientUpdate upd;
      upd.client_id = state.client_id;
      upd.delta = strategy == Strategy::fedavg ? state.local_params : param_delta(state.local_params, state.reference_params);
      upd.sample_count = state.train_shard->size();
      upd.round_hint = result.last_round;
      ++state.submission_count;
      send_message(*stream, make_update(upd, strategy != Strategy::fedavg));
      ++result.uploads;
      await_broadcast();
    }
  }

  wire::MetricsPayload report;
  report.client_id = state.client_id;
  report.round = static_cast<std::uint32_t>(result.last_round);
  report.metrics = evaluate(state.local_params, state.val_shard->samples(), spec);
  try {
    send_message(*stream, WireMessage{MsgType::metrics_report, 0, report.encode()});
  } catch (const SessionError&) {
    // Server already gone; nothing left to report to.
  }
  stream->shutdown();
  result.state = std::move(state);
  return result;
}

}  // namespace fedsense::transport
