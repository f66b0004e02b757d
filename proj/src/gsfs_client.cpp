#include "fedsense/gsfs_client.hpp"

#include <algorithm>
#include <cmath>

#include "fedsense/error.hpp"

namespace fedsense {

std::string to_string(MetricKind k) {
  switch (k) {
    case MetricKind::accuracy: return "accuracy";
    case MetricKind::loss: return "loss";
    case MetricKind::f1: return "f1";
  }
  return "unknown";
}

MetricKind metric_kind_from_string(const std::string& s) {
  if (s == "accuracy") return MetricKind::accuracy;
  if (s == "loss") return MetricKind::loss;
  if (s == "f1") return MetricKind::f1;
  throw ConfigError("unknown metric_kind '" + s + "'", "/gsfs/metric_kind");
}

double metric_value(const MetricsRecord& m, MetricKind kind) {
  switch (kind) {
    case MetricKind::accuracy: return m.accuracy;
    case MetricKind::loss: return m.loss;
    case MetricKind::f1: return m.f1;
  }
  return m.loss;
}

void GsfsClientConfig::validate() const {
  if (!(perf_threshold >= 0.0)) throw ConfigError("gsfs perf_threshold must be >= 0", "/gsfs/perf_threshold");
  if (!(smoothing > 0.0 && smoothing < 1.0)) throw ConfigError("gsfs smoothing must lie in (0, 1)", "/gsfs/smoothing");
  if (!std::isfinite(sensitivity)) throw ConfigError("gsfs sensitivity must be finite", "/gsfs/sensitivity");
  if (eval_every && *eval_every < 1) throw ConfigError("gsfs eval_every must be >= 1", "/gsfs/eval_every");
}

GradStats GradStats::empty(std::size_t layers) {
  GradStats s;
  s.mu.assign(layers, 0.0);
  s.sigma.assign(layers, 0.0);
  s.observations.assign(layers, 0);
  return s;
}

bool GradStats::armed() const {
  return !observations.empty() && std::all_of(observations.begin(), observations.end(),
                                              [](std::uint32_t v) { return v >= kArmObservations; });
}

double perf_delta(double current_metric, double reference_metric) {
  return std::abs(current_metric - reference_metric);
}

bool perf_trigger(double delta, double threshold) { return delta > threshold; }

GradStats update_grad_stats(GradStats stats, std::span<const double> norms, double alpha) {
  if (norms.size() != stats.layers()) throw ShapeError("norm count does not match tracked layers");
  for (std::size_t l = 0; l < norms.size(); ++l) {
    const double g = norms[l];
    if (!(g >= 0.0) || !std::isfinite(g)) throw DataError("gradient norm must be finite and nonnegative");
    if (stats.observations[l] == 0) {
      stats.mu[l] = g;
      stats.sigma[l] = 0.0;
      stats.observations[l] = 1;
      continue;
    }
    if (stats.observations[l] < kArmObservations) ++stats.observations[l];
    const double mu_old = stats.mu[l];
    // Incremental form of the moving averages: a constant input stays an
    // exact fixed point (mu = g, sigma = 0) in floating point.
    stats.mu[l] = mu_old + (1.0 - alpha) * (g - mu_old);
    stats.sigma[l] += (1.0 - alpha) * (std::abs(g - mu_old) - stats.sigma[l]);
  }
  return stats;
}

std::vector<double> adaptive_thresholds(const GradStats& stats, double beta) {
  std::vector<double> out(stats.layers());
  for (std::size_t l = 0; l < stats.layers(); ++l) {
    if (stats.observations[l] == 0) {
      throw StateError("layer " + std::to_string(l) + " has no gradient statistics yet");
    }
    out[l] = stats.mu[l] + beta * stats.sigma[l];
  }
  return out;
}

bool grad_trigger(std::span<const double> norms, std::span<const double> thresholds) {
  if (norms.size() != thresholds.size()) throw ShapeError("norms and thresholds differ in length");
  for (std::size_t l = 0; l < norms.size(); ++l) {
    if (norms[l] > thresholds[l]) return true;
  }
  return false;
}

SegmentDecision decide_segment(GradStats& stats, const std::vector<std::vector<double>>& step_norms,
                               double current_metric, double reference_metric,
                               const GsfsClientConfig& cfg) {
  SegmentDecision d;
  for (const auto& norms : step_norms) {
    if (stats.armed() && !d.grad_fired) {
      d.grad_fired = grad_trigger(norms, adaptive_thresholds(stats, cfg.sensitivity));
    }
    stats = update_grad_stats(std::move(stats), norms, cfg.smoothing);
  }
  d.perf_change = perf_delta(current_metric, reference_metric);
  d.perf_fired = perf_trigger(d.perf_change, cfg.perf_threshold);
  return d;
}

ParameterVector param_delta(const ParameterVector& current, const ParameterVector& reference) {
  if (!current.same_shape(reference)) throw ShapeError("parameter shapes differ");
  ParameterVector out = current;
  auto v = out.values();
  const auto r = reference.values();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] -= r[i];
  return out;
}

ClientState make_client(ClientId id, const ParameterVector& global,
                        std::shared_ptr<const Dataset> train, std::shared_ptr<const Dataset> val,
                        const ModelSpec& spec, const GsfsClientConfig& gcfg, const TrainConfig& tcfg,
                        std::uint64_t batch_seed) {
  if (!train || train->empty()) throw ConfigError("client " + std::to_string(id) + " has an empty training shard");
  if (!val || val->empty()) throw ConfigError("client " + std::to_string(id) + " has an empty validation shard");
  ClientState s;
  s.client_id = id;
  s.grad_stats = GradStats::empty(spec.num_layers());
  s.batches = std::make_shared<MinibatchStream>(train->size(), tcfg.batch_size, batch_seed);
  s.train_shard = std::move(train);
  s.val_shard = std::move(val);
  on_broadcast(s, global, spec, gcfg);
  return s;
}

std::size_t segment_steps(const ClientState& state, const GsfsClientConfig& cfg) {
  return cfg.eval_every ? *cfg.eval_every : state.batches->steps_per_epoch();
}

ClientStepResult client_step(ClientState& state, const GsfsClientConfig& gcfg, const TrainConfig& tcfg,
                             const ModelSpec& spec, double now, std::uint64_t round_hint) {
  const std::size_t steps = segment_steps(state, gcfg);
  auto trained = train_steps(std::move(state.local_params), state.train_shard->samples(), spec,
                             tcfg.learning_rate, *state.batches, steps);
  state.local_params = std::move(trained.params);
  state.steps_done += steps;

  ClientStepResult out;
  out.metric = metric_value(evaluate(state.local_params, state.val_shard->samples(), spec), gcfg.metric_kind);
  out.decision = decide_segment(state.grad_stats, trained.step_norms, out.metric, state.reference_metric, gcfg);
  if (out.decision.upload()) {
    ++state.submission_count;
    ClientUpdate upd;
    upd.client_id = state.client_id;
    upd.delta = param_delta(state.local_params, state.reference_params);
    upd.sample_count = state.train_shard->size();
    upd.local_timestamp = now;
    upd.round_hint = round_hint;
    out.upload = std::move(upd);
  }
  return out;
}

void on_broadcast(ClientState& state, const ParameterVector& global, const ModelSpec& spec,
                  const GsfsClientConfig& cfg) {
  if (!state.local_params.values().empty() && !state.local_params.same_shape(global)) {
    throw ShapeError("broadcast model shape does not match the client model");
  }
  state.local_params = global;
  state.reference_params = global;
  state.reference_metric = metric_value(evaluate(global, state.val_shard->samples(), spec), cfg.metric_kind);
}

}  // namespace fedsense
