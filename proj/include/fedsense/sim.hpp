#pragma once

// Deterministic discrete-event simulation of a federation: one event queue,
// one logical clock in milliseconds. FedAvg and FedOpt run synchronous
// rounds; GSFS clients train continuously and upload on trigger while the
// server aggregates whenever the update pool reaches quorum.

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <queue>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "fedsense/config.hpp"
#include "fedsense/model.hpp"

namespace fedsense {

// Declaration order is the tie-break order for simultaneous events.
enum class EventKind : std::uint8_t {
  client_segment_done = 0,
  upload_arrived = 1,
  aggregation = 2,
  broadcast_arrived = 3,
  eval_checkpoint = 4,
};

std::string to_string(EventKind k);

inline constexpr std::uint64_t kServerId = UINT64_MAX;

struct Event {
  double time_ms = 0.0;
  EventKind kind = EventKind::client_segment_done;
  std::uint64_t subject = 0;
  std::uint64_t seq = 0;      // insertion order, last tie-break
  std::uint64_t payload = 0;  // index into the simulator's payload tables
};

// Min-queue ordered by (time, kind, subject, seq).
class EventQueue {
 public:
  void push(double time_ms, EventKind kind, std::uint64_t subject, std::uint64_t payload = 0);
  Event pop();
  const Event& top() const { return heap_.top(); }
  bool empty() const { return heap_.empty(); }
  std::size_t size() const { return heap_.size(); }

 private:
  struct Later {
    bool operator()(const Event& a, const Event& b) const;
  };
  std::priority_queue<Event, std::vector<Event>, Later> heap_;
  std::uint64_t next_seq_ = 0;
};

// Transfer time of one frame: base + uniform jitter + bytes / bandwidth, at
// least zero.
double transfer_ms(const NetworkModel& net, std::size_t bytes, Rng& rng);

struct LogRecord {
  double time_ms = 0.0;
  EventKind kind = EventKind::client_segment_done;
  std::uint64_t subject = 0;
  bool upload = false;         // segment_done: an upload was decided
  double decision_ms = 0.0;    // upload_arrived: when the upload was decided
  std::uint64_t round = 0;     // aggregation / broadcast_arrived
};

struct EventLog {
  std::vector<LogRecord> records;
  double end_time_ms = 0.0;

  void write_jsonl(std::ostream& out) const;
};

struct LatencyEnergy {
  // Mean seconds from upload decision to receipt of the broadcast that
  // follows the aggregation consuming it.
  std::optional<double> response_latency_s;
  // Completed upload->broadcast cycles per simulated minute.
  std::optional<double> energy_efficiency_rpm;
  // Mean seconds from upload decision to the aggregation consuming it.
  std::optional<double> commit_latency_s;
  // Aggregated uploads per simulated minute.
  std::optional<double> commit_rate_rpm;
  std::uint64_t completed_cycles = 0;
};

LatencyEnergy measure_latency_energy(const EventLog& log);

struct RoundRecord {
  double time_ms = 0.0;
  std::uint64_t round = 0;
  MetricsRecord central;
  MetricsRecord client_avg;
  std::uint64_t uploads_cum = 0;
  std::uint64_t bytes_cum = 0;
};

struct RunMetrics {
  Strategy strategy = Strategy::fedavg;
  std::vector<RoundRecord> rounds;
  MetricsRecord final_central;
  MetricsRecord final_client_avg;
  LatencyEnergy timing;
  std::uint64_t uploads_total = 0;
  std::uint64_t bytes_total = 0;
  std::uint64_t broadcasts = 0;  // aggregations whose model was sent to all clients
  std::uint64_t aggregations = 0;
  std::uint64_t gate_size = 0;
  std::uint64_t payload_bytes = 0;
  std::uint64_t uploads_aggregated = 0;
  std::uint64_t uploads_superseded = 0;
  std::uint64_t uploads_residual = 0;   // pooled but never aggregated
  std::uint64_t uploads_in_flight = 0;  // still travelling when the run stopped
  double simulated_time_ms = 0.0;
  // GSFS clients kept training without reaching quorum; see kStallSegmentsPerClient.
  bool stalled = false;
  std::size_t num_clients = 0;
  ParameterVector final_global;
  std::vector<ParameterVector> trajectory;  // global model after each aggregation
  EventLog log;
};

// A GSFS run stops once this many segments per client pass without an
// aggregation and no time limit would end it.
inline constexpr std::uint64_t kStallSegmentsPerClient = 1000;

RunMetrics run_experiment(const ExperimentConfig& cfg);

// State visible after each dispatched event; for tests and debugging.
struct SimSnapshot {
  const Event& event;
  bool handled;  // false for events dropped as stale
  std::span<const ClientState> clients;
  const ServerState& server;
};
using SimObserver = std::function<void(const SimSnapshot&)>;

RunMetrics run_experiment(const ExperimentConfig& cfg, const SimObserver& observer);

// Per-round CSV with a header row; reals printed with 12 significant digits.
void write_metrics_csv(const RunMetrics& m, std::ostream& out);
nlohmann::json summary_json(const RunMetrics& m);

struct ComparisonRow {
  Strategy strategy;
  double central_accuracy, central_f1;
  double client_accuracy, client_f1;
  std::optional<double> central_latency_s, client_latency_s;
  std::optional<double> central_energy_rpm, client_energy_rpm;
  std::uint64_t uploads_total, bytes_total;
};

// The ten metric columns, in output order.
const std::vector<std::string>& comparison_columns();

ComparisonRow comparison_row(const RunMetrics& m);
std::vector<ComparisonRow> compare_strategies(const ExperimentConfig& cfg);
void write_comparison_csv(const std::vector<ComparisonRow>& rows, std::ostream& out);
nlohmann::json comparison_json(const std::vector<ComparisonRow>& rows);

// Formats with 12 significant digits; empty string for nullopt.
std::string format_real(double v);
std::string format_real(const std::optional<double>& v);

}  // namespace fedsense
