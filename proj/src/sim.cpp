#include "fedsense/sim.hpp"

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <memory>
#include <ostream>

#include "fedsense/error.hpp"
#include "fedsense/federation.hpp"
#include "fedsense/gsfs_client.hpp"
#include "fedsense/wire.hpp"

#include <spdlog/spdlog.h>

namespace fedsense {

using nlohmann::json;

std::string to_string(EventKind k) {
  switch (k) {
    case EventKind::client_segment_done: return "client_segment_done";
    case EventKind::upload_arrived: return "upload_arrived";
    case EventKind::aggregation: return "aggregation";
    case EventKind::broadcast_arrived: return "broadcast_arrived";
    case EventKind::eval_checkpoint: return "eval_checkpoint";
  }
  return "unknown";
}

bool EventQueue::Later::operator()(const Event& a, const Event& b) const {
  if (a.time_ms != b.time_ms) return a.time_ms > b.time_ms;
  if (a.kind != b.kind) return a.kind > b.kind;
  if (a.subject != b.subject) return a.subject > b.subject;
  return a.seq > b.seq;
}

void EventQueue::push(double time_ms, EventKind kind, std::uint64_t subject, std::uint64_t payload) {
  heap_.push(Event{time_ms, kind, subject, next_seq_++, payload});
}

Event EventQueue::pop() {
  Event e = heap_.top();
  heap_.pop();
  return e;
}

double transfer_ms(const NetworkModel& net, std::size_t bytes, Rng& rng) {
  double jitter = 0.0;
  if (net.jitter_ms > 0.0) jitter = rng.uniform(-net.jitter_ms, net.jitter_ms);
  const double t = net.base_latency_ms + jitter + 1000.0 * static_cast<double>(bytes) / net.bandwidth_bytes_per_s;
  return std::max(t, 0.0);
}

std::string format_real(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.12g", v);
  return buf;
}

std::string format_real(const std::optional<double>& v) { return v ? format_real(*v) : std::string(); }

namespace {

double round12(double v) { return std::strtod(format_real(v).c_str(), nullptr); }

json real_or_null(const std::optional<double>& v) { return v ? json(round12(*v)) : json(nullptr); }

}  // namespace

void EventLog::write_jsonl(std::ostream& out) const {
  for (const auto& r : records) {
    json j{{"t", round12(r.time_ms)}, {"kind", to_string(r.kind)}};
    j["subject"] = r.subject == kServerId ? json("server") : json(r.subject);
    if (r.kind == EventKind::client_segment_done) j["upload"] = r.upload;
    if (r.kind == EventKind::upload_arrived) j["decision_t"] = round12(r.decision_ms);
    if (r.kind == EventKind::aggregation || r.kind == EventKind::broadcast_arrived ||
        r.kind == EventKind::eval_checkpoint) {
      j["round"] = r.round;
    }
    out << j.dump() << '\n';
  }
}

LatencyEnergy measure_latency_energy(const EventLog& log) {
  struct Waiting {
    double decision_ms;
    std::uint64_t round;
  };
  std::map<std::uint64_t, std::vector<double>> arrived;       // not yet aggregated
  std::map<std::uint64_t, std::vector<Waiting>> committed;    // aggregated, awaiting receipt
  double commit_sum = 0.0, receipt_sum = 0.0;
  std::uint64_t commits = 0;
  LatencyEnergy out;
  for (const auto& r : log.records) {
    switch (r.kind) {
      case EventKind::upload_arrived:
        arrived[r.subject].push_back(r.decision_ms);
        break;
      case EventKind::aggregation:
        for (auto& [k, list] : arrived) {
          for (double d : list) {
            commit_sum += r.time_ms - d;
            ++commits;
            committed[k].push_back({d, r.round});
          }
          list.clear();
        }
        break;
      case EventKind::broadcast_arrived: {
        auto& list = committed[r.subject];
        std::vector<Waiting> keep;
        for (const auto& w : list) {
          if (w.round <= r.round) {
            receipt_sum += r.time_ms - w.decision_ms;
            ++out.completed_cycles;
          } else {
            keep.push_back(w);
          }
        }
        list.swap(keep);
        break;
      }
      default:
        break;
    }
  }
  const double minutes = log.end_time_ms / 60000.0;
  if (out.completed_cycles > 0) {
    out.response_latency_s = receipt_sum / static_cast<double>(out.completed_cycles) / 1000.0;
    if (minutes > 0.0) out.energy_efficiency_rpm = static_cast<double>(out.completed_cycles) / minutes;
  }
  if (commits > 0) {
    out.commit_latency_s = commit_sum / static_cast<double>(commits) / 1000.0;
    if (minutes > 0.0) out.commit_rate_rpm = static_cast<double>(commits) / minutes;
  }
  return out;
}

namespace {

MetricsRecord average(const std::vector<MetricsRecord>& ms) {
  MetricsRecord avg;
  if (ms.empty()) return avg;
  for (const auto& m : ms) {
    avg.accuracy += m.accuracy;
    avg.precision += m.precision;
    avg.recall += m.recall;
    avg.f1 += m.f1;
    avg.loss += m.loss;
    avg.sample_count += m.sample_count;
  }
  const double n = static_cast<double>(ms.size());
  avg.accuracy /= n;
  avg.precision /= n;
  avg.recall /= n;
  avg.f1 /= n;
  avg.loss /= n;
  avg.sample_count /= ms.size();
  return avg;
}

class Simulator {
 public:
  explicit Simulator(const ExperimentConfig& cfg)
      : cfg_(cfg),
        fed_(build_federation(cfg)),
        net_rng_(derive_seed(cfg.seed, SeedStream::network)),
        pool_(cfg.m_fraction) {
    const std::size_t n = fed_.num_clients();
    for (std::size_t k = 0; k < n; ++k) {
      clients_.push_back(make_client(k, fed_.initial, fed_.client_train[k], fed_.client_val[k], fed_.spec,
                                     cfg_.gsfs, cfg_.train, client_batch_seed(cfg_, k)));
      ms_per_step_.push_back(cfg_.compute.ms_for(k, n));
    }
    generation_.assign(n, 0);
    applied_round_.assign(n, 0);
    sync_received_.resize(n);
    server_ = ServerState::fresh(fed_.initial, cfg_.strategy);
    out_.strategy = cfg_.strategy;
    out_.num_clients = n;
    out_.payload_bytes = wire::update_frame_bytes(fed_.initial.size());
    out_.gate_size = synchronous() ? n : pool_threshold(cfg_.m_fraction, n);
    broadcasts_.push_back(std::make_shared<const ParameterVector>(fed_.initial));
  }

  void set_observer(SimObserver obs) { observer_ = std::move(obs); }

  RunMetrics run() {
    if (cfg_.limits.max_aggregations == 0 && !std::isfinite(cfg_.limits.max_simulated_time_ms)) {
      throw ConfigError("run needs max_aggregations > 0 or a finite max_simulated_time_ms", "/limits");
    }
    for (std::size_t k = 0; k < clients_.size(); ++k) schedule_segment(k, 0.0);

    bool stopped_by_time = false;
    double last_time = 0.0;
    while (!queue_.empty()) {
      if (queue_.top().time_ms > cfg_.limits.max_simulated_time_ms) {
        stopped_by_time = true;
        break;
      }
      const Event ev = queue_.pop();
      const bool handled = dispatch(ev);
      if (handled) last_time = ev.time_ms;
      if (observer_) observer_(SimSnapshot{ev, handled, clients_, server_});
      if (segments_since_aggregation_ > kStallSegmentsPerClient * clients_.size()) {
        spdlog::warn("no aggregation after {} segments; stopping", segments_since_aggregation_);
        out_.stalled = true;
        break;
      }
    }
    out_.simulated_time_ms = stopped_by_time ? cfg_.limits.max_simulated_time_ms : last_time;
    out_.log.end_time_ms = out_.simulated_time_ms;
    finish();
    return std::move(out_);
  }

 private:
  bool synchronous() const { return cfg_.strategy != Strategy::gsfs; }

  std::size_t steps_per_segment(std::size_t k) const {
    if (synchronous()) {
      return static_cast<std::size_t>(cfg_.train.local_epochs) * clients_[k].batches->steps_per_epoch();
    }
    return segment_steps(clients_[k], cfg_.gsfs);
  }

  void schedule_segment(std::size_t k, double now) {
    const double done = now + static_cast<double>(steps_per_segment(k)) * ms_per_step_[k];
    queue_.push(done, EventKind::client_segment_done, k, generation_[k]);
  }

  void log(double t, EventKind kind, std::uint64_t subject, bool upload = false, double decision = 0.0,
           std::uint64_t round = 0) {
    out_.log.records.push_back(LogRecord{t, kind, subject, upload, decision, round});
  }

  void send_upload(std::size_t k, ClientUpdate upd, double now) {
    const std::uint64_t slot = uploads_.size();
    uploads_.push_back(Pending{std::move(upd), now});
    ++out_.uploads_total;
    out_.bytes_total += out_.payload_bytes;
    ++in_flight_;
    queue_.push(now + transfer_ms(cfg_.network, out_.payload_bytes, net_rng_), EventKind::upload_arrived, k, slot);
  }

  // Returns false for events that were dropped without effect.
  bool dispatch(const Event& ev) {
    switch (ev.kind) {
      case EventKind::client_segment_done: return on_segment_done(ev);
      case EventKind::upload_arrived: on_upload_arrived(ev); return true;
      case EventKind::aggregation: return on_aggregation(ev);
      case EventKind::broadcast_arrived: return on_broadcast_arrived(ev);
      case EventKind::eval_checkpoint: return false;
    }
    return false;
  }

  bool on_segment_done(const Event& ev) {
    const std::size_t k = ev.subject;
    if (finishing_ || ev.payload != generation_[k]) return false;
    ClientState& c = clients_[k];
    if (synchronous()) {
      auto trained = local_train(c.local_params, c.train_shard->samples(), cfg_.train, fed_.spec, *c.batches);
      c.local_params = std::move(trained.params);
      ClientUpdate upd;
      upd.client_id = k;
      upd.delta = cfg_.strategy == Strategy::fedavg ? c.local_params : param_delta(c.local_params, c.reference_params);
      upd.sample_count = c.train_shard->size();
      upd.local_timestamp = ev.time_ms;
      upd.round_hint = out_.aggregations;
      ++c.submission_count;
      log(ev.time_ms, EventKind::client_segment_done, k, true);
      send_upload(k, std::move(upd), ev.time_ms);
      return true;
    }
    ++segments_since_aggregation_;
    auto step = client_step(c, cfg_.gsfs, cfg_.train, fed_.spec, ev.time_ms, out_.aggregations);
    log(ev.time_ms, EventKind::client_segment_done, k, step.upload.has_value());
    if (step.upload) send_upload(k, std::move(*step.upload), ev.time_ms);
    schedule_segment(k, ev.time_ms);
    return true;
  }

  void on_upload_arrived(const Event& ev) {
    const std::size_t k = ev.subject;
    Pending p = std::move(uploads_[ev.payload]);
    --in_flight_;
    log(ev.time_ms, EventKind::upload_arrived, k, false, p.decision_ms);
    if (synchronous()) {
      sync_received_[k] = std::move(p.update);
      if (++sync_count_ == clients_.size()) queue_.push(ev.time_ms, EventKind::aggregation, kServerId);
      return;
    }
    pool_.add(std::move(p.update), &server_.global_params);
    if (!finishing_ && !aggregation_scheduled_ && pool_ready(pool_, clients_.size())) {
      aggregation_scheduled_ = true;
      queue_.push(ev.time_ms, EventKind::aggregation, kServerId);
    }
  }

  bool on_aggregation(const Event& ev) {
    aggregation_scheduled_ = false;
    if (finishing_) return false;
    segments_since_aggregation_ = 0;
    if (synchronous()) {
      if (cfg_.strategy == Strategy::fedavg) {
        std::vector<WeightedParams> w;
        for (const auto& u : sync_received_) w.push_back({&u->delta, u->sample_count});
        server_.global_params = fedavg_aggregate(w);
        ++server_.round;
      } else {
        std::vector<ParameterVector> g;
        for (const auto& u : sync_received_) g.push_back(fedopt_pseudo_gradient(u->delta));
        server_ = fedopt_server_step(std::move(server_), g, cfg_.fedopt);
      }
      out_.uploads_aggregated += sync_count_;
      for (auto& u : sync_received_) u.reset();
      sync_count_ = 0;
    } else {
      if (!pool_ready(pool_, clients_.size())) return false;
      out_.uploads_aggregated += pool_.size();
      auto res = gsfs_aggregate(std::move(server_), std::move(pool_), clients_.size());
      server_ = std::move(res.state);
      pool_ = std::move(res.pool);
    }
    ++out_.aggregations;
    log(ev.time_ms, EventKind::aggregation, kServerId, false, 0.0, out_.aggregations);
    record_round(ev.time_ms);

    broadcasts_.push_back(std::make_shared<const ParameterVector>(server_.global_params));
    ++out_.broadcasts;
    out_.bytes_total += out_.payload_bytes * clients_.size();
    out_.rounds.back().bytes_cum = out_.bytes_total;
    for (std::size_t k = 0; k < clients_.size(); ++k) {
      queue_.push(ev.time_ms + transfer_ms(cfg_.network, out_.payload_bytes, net_rng_), EventKind::broadcast_arrived, k,
                  out_.aggregations);
    }
    if (cfg_.record_trajectory) out_.trajectory.push_back(server_.global_params);
    if (cfg_.limits.max_aggregations > 0 && out_.aggregations >= cfg_.limits.max_aggregations) finishing_ = true;
    return true;
  }

  bool on_broadcast_arrived(const Event& ev) {
    const std::size_t k = ev.subject;
    const std::uint64_t round = ev.payload;
    // A later broadcast can overtake an earlier one on a jittery link.
    if (round <= applied_round_[k]) return false;
    applied_round_[k] = round;
    ClientState& c = clients_[k];
    const ParameterVector& global = *broadcasts_[round];
    if (synchronous()) {
      c.local_params = global;
      c.reference_params = global;
    } else {
      on_broadcast(c, global, fed_.spec, cfg_.gsfs);
    }
    ++generation_[k];
    log(ev.time_ms, EventKind::broadcast_arrived, k, false, 0.0, round);
    if (!finishing_) schedule_segment(k, ev.time_ms);
    return true;
  }

  MetricsRecord client_average() const {
    std::vector<MetricsRecord> ms;
    for (const auto& c : clients_) ms.push_back(evaluate(c.local_params, fed_.test.samples(), fed_.spec));
    return average(ms);
  }

  void record_round(double t) {
    RoundRecord r;
    r.time_ms = t;
    r.round = out_.aggregations;
    r.central = evaluate(server_.global_params, fed_.test.samples(), fed_.spec);
    r.client_avg = client_average();
    r.uploads_cum = out_.uploads_total;
    r.bytes_cum = out_.bytes_total;
    out_.rounds.push_back(r);
    log(t, EventKind::eval_checkpoint, kServerId, false, 0.0, out_.aggregations);
  }

  void finish() {
    if (out_.rounds.empty()) {
      out_.final_central = evaluate(server_.global_params, fed_.test.samples(), fed_.spec);
      out_.final_client_avg = client_average();
    } else {
      out_.final_central = out_.rounds.back().central;
      out_.final_client_avg = out_.rounds.back().client_avg;
    }
    out_.uploads_superseded = pool_.superseded();
    out_.uploads_residual = synchronous() ? sync_count_ : pool_.size();
    out_.uploads_in_flight = in_flight_;
    out_.final_global = server_.global_params;
    out_.timing = measure_latency_energy(out_.log);
  }

  struct Pending {
    ClientUpdate update;
    double decision_ms = 0.0;
  };

  const ExperimentConfig& cfg_;
  Federation fed_;
  Rng net_rng_;
  UpdatePool pool_;
  ServerState server_;
  EventQueue queue_;
  std::vector<ClientState> clients_;
  std::vector<double> ms_per_step_;
  std::vector<std::uint64_t> generation_;
  std::vector<std::uint64_t> applied_round_;
  std::vector<std::optional<ClientUpdate>> sync_received_;
  std::size_t sync_count_ = 0;
  std::vector<Pending> uploads_;
  std::vector<std::shared_ptr<const ParameterVector>> broadcasts_;  // index = round
  std::uint64_t in_flight_ = 0;
  bool aggregation_scheduled_ = false;
  bool finishing_ = false;
  SimObserver observer_;
  std::uint64_t segments_since_aggregation_ = 0;
  RunMetrics out_;
};

}  // namespace

RunMetrics run_experiment(const ExperimentConfig& cfg) { return run_experiment(cfg, SimObserver{}); }

RunMetrics run_experiment(const ExperimentConfig& cfg, const SimObserver& observer) {
  Simulator sim(cfg);
  sim.set_observer(observer);
  return sim.run();
}

void write_metrics_csv(const RunMetrics& m, std::ostream& out) {
  out << "time_ms,round,central_accuracy,central_f1,client_avg_accuracy,client_avg_f1,uploads_cum,bytes_cum\n";
  for (const auto& r : m.rounds) {
    out << format_real(r.time_ms) << ',' << r.round << ',' << format_real(r.central.accuracy) << ','
        << format_real(r.central.f1) << ',' << format_real(r.client_avg.accuracy) << ','
        << format_real(r.client_avg.f1) << ',' << r.uploads_cum << ',' << r.bytes_cum << '\n';
  }
}

namespace {

json metrics_json(const MetricsRecord& m) {
  return json{{"accuracy", round12(m.accuracy)}, {"precision", round12(m.precision)},
              {"recall", round12(m.recall)},     {"f1", round12(m.f1)},
              {"loss", round12(m.loss)},         {"sample_count", m.sample_count}};
}

}  // namespace

json summary_json(const RunMetrics& m) {
  return json{{"strategy", to_string(m.strategy)},
              {"num_clients", m.num_clients},
              {"final_central", metrics_json(m.final_central)},
              {"final_client_avg", metrics_json(m.final_client_avg)},
              {"response_latency_s", real_or_null(m.timing.response_latency_s)},
              {"energy_efficiency_rpm", real_or_null(m.timing.energy_efficiency_rpm)},
              {"commit_latency_s", real_or_null(m.timing.commit_latency_s)},
              {"commit_rate_rpm", real_or_null(m.timing.commit_rate_rpm)},
              {"completed_cycles", m.timing.completed_cycles},
              {"uploads_total", m.uploads_total},
              {"bytes_total", m.bytes_total},
              {"broadcasts", m.broadcasts},
              {"aggregations", m.aggregations},
              {"gate_size", m.gate_size},
              {"payload_bytes", m.payload_bytes},
              {"uploads_aggregated", m.uploads_aggregated},
              {"uploads_superseded", m.uploads_superseded},
              {"uploads_residual", m.uploads_residual},
              {"uploads_in_flight", m.uploads_in_flight},
              {"simulated_time_ms", round12(m.simulated_time_ms)},
              {"stalled", m.stalled},
              {"rounds", m.rounds.size()}};
}

const std::vector<std::string>& comparison_columns() {
  static const std::vector<std::string> cols{
      "central_accuracy",  "central_f1",         "client_accuracy",   "client_f1",    "central_latency_s",
      "client_latency_s",  "central_energy_rpm", "client_energy_rpm", "uploads_total", "bytes_total"};
  return cols;
}

ComparisonRow comparison_row(const RunMetrics& m) {
  ComparisonRow r{};
  r.strategy = m.strategy;
  r.central_accuracy = m.final_central.accuracy;
  r.central_f1 = m.final_central.f1;
  r.client_accuracy = m.final_client_avg.accuracy;
  r.client_f1 = m.final_client_avg.f1;
  r.central_latency_s = m.timing.commit_latency_s;
  r.client_latency_s = m.timing.response_latency_s;
  r.central_energy_rpm = m.timing.energy_efficiency_rpm;
  if (m.timing.energy_efficiency_rpm && m.num_clients > 0) {
    r.client_energy_rpm = *m.timing.energy_efficiency_rpm / static_cast<double>(m.num_clients);
  }
  r.uploads_total = m.uploads_total;
  r.bytes_total = m.bytes_total;
  return r;
}

std::vector<ComparisonRow> compare_strategies(const ExperimentConfig& cfg) {
  const std::vector<Strategy>& list = cfg.strategies;
  if (list.size() < 2) throw ConfigError("compare needs at least two strategies", "/strategies");
  std::vector<ComparisonRow> rows;
  for (Strategy s : list) {
    ExperimentConfig one = cfg;
    one.strategy = s;
    one.record_trajectory = false;
    rows.push_back(comparison_row(run_experiment(one)));
  }
  return rows;
}

void write_comparison_csv(const std::vector<ComparisonRow>& rows, std::ostream& out) {
  out << "strategy";
  for (const auto& c : comparison_columns()) out << ',' << c;
  out << '\n';
  for (const auto& r : rows) {
    out << to_string(r.strategy) << ',' << format_real(r.central_accuracy) << ',' << format_real(r.central_f1) << ','
        << format_real(r.client_accuracy) << ',' << format_real(r.client_f1) << ','
        << format_real(r.central_latency_s) << ',' << format_real(r.client_latency_s) << ','
        << format_real(r.central_energy_rpm) << ',' << format_real(r.client_energy_rpm) << ',' << r.uploads_total
        << ',' << r.bytes_total << '\n';
  }
}

json comparison_json(const std::vector<ComparisonRow>& rows) {
  json arr = json::array();
  for (const auto& r : rows) {
    arr.push_back(json{{"strategy", to_string(r.strategy)},
                       {"central_accuracy", round12(r.central_accuracy)},
                       {"central_f1", round12(r.central_f1)},
                       {"client_accuracy", round12(r.client_accuracy)},
                       {"client_f1", round12(r.client_f1)},
                       {"central_latency_s", real_or_null(r.central_latency_s)},
                       {"client_latency_s", real_or_null(r.client_latency_s)},
                       {"central_energy_rpm", real_or_null(r.central_energy_rpm)},
                       {"client_energy_rpm", real_or_null(r.client_energy_rpm)},
                       {"uploads_total", r.uploads_total},
                       {"bytes_total", r.bytes_total}});
  }
  return json{{"columns", comparison_columns()}, {"rows", arr}};
}

}  // namespace fedsense
