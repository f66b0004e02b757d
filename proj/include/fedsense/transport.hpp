#pragma once

// Runs the server and client state machines as separate processes over
// stream sockets, framed with the FSN1 wire format. The server funnels every
// received message through one ordered queue, so strategy state is only ever
// touched by a single thread.

#include <chrono>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fedsense/gsfs_client.hpp"
#include "fedsense/strategies.hpp"
#include "fedsense/wire.hpp"

namespace fedsense::transport {

// Byte stream under the framing layer. Plain sockets ship by default;
// StreamWrapper lets a caller layer e.g. TLS over the accepted or connected
// socket without touching the protocol code.
class Stream {
 public:
  virtual ~Stream() = default;
  // Returns 0 at end of stream.
  virtual std::size_t read_some(std::span<std::uint8_t> buf) = 0;
  virtual void write_all(std::span<const std::uint8_t> bytes) = 0;
  // Waits until data is readable; false on timeout.
  virtual bool wait_readable(std::chrono::milliseconds timeout) = 0;
  virtual void shutdown() = 0;
};

using StreamWrapper = std::function<std::unique_ptr<Stream>(std::unique_ptr<Stream>)>;

struct Endpoint {
  std::string host = "127.0.0.1";
  std::uint16_t port = 0;

  // "host:port"
  static Endpoint parse(const std::string& text);
  std::string to_string() const;
};

std::unique_ptr<Stream> connect_with_retry(const Endpoint& ep, int max_attempts = 5,
                                           std::chrono::milliseconds initial_backoff = std::chrono::milliseconds(100),
                                           std::chrono::milliseconds max_backoff = std::chrono::milliseconds(2000));

void send_message(Stream& s, const wire::WireMessage& msg);

// Reads whole frames from a stream.
class MessageReader {
 public:
  explicit MessageReader(Stream& s) : stream_(s) {}
  // nullopt on clean end of stream; SessionError on timeout.
  std::optional<wire::WireMessage> read(std::chrono::milliseconds timeout);
  // Non-blocking: a frame if one is already available.
  std::optional<wire::WireMessage> poll();

 private:
  bool fill(std::chrono::milliseconds timeout);
  Stream& stream_;
  wire::FrameDecoder decoder_;
  bool eof_ = false;
};

wire::WireMessage make_register(ClientId id, std::size_t vector_len);
wire::WireMessage make_update(const ClientUpdate& upd, bool is_delta);
wire::WireMessage make_broadcast(const ParameterVector& global, std::uint64_t round);
wire::WireMessage make_shutdown();

// Transport-independent server logic.
class ServerCore {
 public:
  struct Outbound {
    std::optional<ClientId> to;  // nullopt = every registered client
    wire::WireMessage msg;
  };

  ServerCore(Strategy strategy, ParameterVector initial, std::size_t num_clients, double m_fraction,
             FedOptConfig fedopt, std::uint64_t max_aggregations);

  // Throws ProtocolError when the registration is invalid; the caller drops
  // the connection.
  std::vector<Outbound> on_register(const wire::RegisterPayload& reg);
  std::vector<Outbound> on_update(ClientId from, const wire::WireMessage& msg);
  void on_metrics(const wire::MetricsPayload& m);
  void on_disconnect(ClientId id);

  const ServerState& state() const { return state_; }
  const UpdatePool& pool() const { return pool_; }
  std::size_t registered() const { return registered_.size(); }
  bool is_registered(ClientId id) const;
  bool started() const { return started_; }
  bool finished() const { return finished_; }
  std::uint64_t aggregations() const { return aggregations_; }
  const std::vector<wire::MetricsPayload>& reports() const { return reports_; }
  std::size_t num_clients() const { return num_clients_; }

 private:
  std::vector<Outbound> aggregate();

  Strategy strategy_;
  std::size_t num_clients_;
  FedOptConfig fedopt_;
  std::uint64_t max_aggregations_;
  ServerState state_;
  UpdatePool pool_;
  std::vector<ClientId> registered_;
  bool started_ = false;
  bool finished_ = false;
  std::uint64_t aggregations_ = 0;
  std::vector<wire::MetricsPayload> reports_;
};

struct ServeOptions {
  Endpoint bind;
  std::size_t num_clients = 1;
  Strategy strategy = Strategy::gsfs;
  double m_fraction = 0.6;
  FedOptConfig fedopt;
  std::uint64_t max_aggregations = 10;
  // Give up when no message arrives for this long.
  std::chrono::milliseconds idle_timeout{120000};
  StreamWrapper wrap;
  // Called on the consumer thread after every handled message.
  std::function<void(const ServerCore&)> observer;
};

struct ServeResult {
  ServerState state;
  std::uint64_t aggregations = 0;
  std::vector<wire::MetricsPayload> reports;
  std::uint64_t rejected_connections = 0;
};

class Server {
 public:
  Server(ServeOptions opts, ParameterVector initial);
  ~Server();
  Server(const Server&) = delete;
  Server& operator=(const Server&) = delete;

  // Binds and listens; returns the bound port (useful with port 0).
  std::uint16_t bind();
  ServeResult run();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

ServeResult serve(const ServeOptions& opts, ParameterVector initial);

struct ClientOptions {
  Endpoint connect;
  int max_attempts = 5;
  std::chrono::milliseconds initial_backoff{100};
  std::chrono::milliseconds max_backoff{2000};
  // Session error when no broadcast arrives for this long while one is due.
  std::chrono::milliseconds broadcast_timeout{30000};
  StreamWrapper wrap;
};

struct ClientRunResult {
  ClientState state;
  std::uint64_t uploads = 0;
  std::uint64_t broadcasts = 0;
  std::uint64_t last_round = 0;
};

ClientRunResult client_session(const ClientOptions& opts, ClientState state, Strategy strategy,
                               const GsfsClientConfig& gcfg, const TrainConfig& tcfg, const ModelSpec& spec);

}  // namespace fedsense::transport
