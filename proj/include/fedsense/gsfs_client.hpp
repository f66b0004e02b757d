#pragma once

// Client half of GSFS: a performance-change trigger on a local validation
// shard, per-layer moving gradient-norm statistics with adaptive thresholds,
// and the reference reset applied when a global model is broadcast.

#include <memory>
#include <optional>
#include <span>
#include <vector>

#include "fedsense/data.hpp"
#include "fedsense/model.hpp"
#include "fedsense/strategies.hpp"

namespace fedsense {

enum class MetricKind { accuracy, loss, f1 };

std::string to_string(MetricKind k);
MetricKind metric_kind_from_string(const std::string& s);
double metric_value(const MetricsRecord& m, MetricKind kind);

struct GsfsClientConfig {
  double perf_threshold = 0.01;  // delta_perf
  double smoothing = 0.9;        // alpha
  double sensitivity = 1.0;      // beta
  // Local steps per segment; unset means one local epoch.
  std::optional<std::size_t> eval_every;
  MetricKind metric_kind = MetricKind::loss;

  void validate() const;
};

// A threshold built from a single observation has sigma = 0 whatever beta
// is, so a layer is only tested once sigma has seen one deviation.
inline constexpr std::uint32_t kArmObservations = 2;

struct GradStats {
  std::vector<double> mu;
  std::vector<double> sigma;
  std::vector<std::uint32_t> observations;  // per layer, saturates at kArmObservations

  static GradStats empty(std::size_t layers);
  std::size_t layers() const { return mu.size(); }
  // Every layer has enough history for its threshold to be tested.
  bool armed() const;
};

// |current - reference|
double perf_delta(double current_metric, double reference_metric);
// delta > threshold, strictly.
bool perf_trigger(double delta, double threshold);

// mu <- a mu + (1 - a) |g|;  sigma <- a sigma + (1 - a) ||g| - mu_old|.
// A layer's first observation sets mu = |g|, sigma = 0.
GradStats update_grad_stats(GradStats stats, std::span<const double> norms, double alpha);

// mu + beta sigma per layer; StateError for uninitialized layers.
std::vector<double> adaptive_thresholds(const GradStats& stats, double beta);

// True iff some layer norm strictly exceeds its threshold.
bool grad_trigger(std::span<const double> norms, std::span<const double> thresholds);

struct SegmentDecision {
  bool grad_fired = false;
  bool perf_fired = false;
  double perf_change = 0.0;
  bool upload() const { return grad_fired || perf_fired; }
};

// Folds one segment of per-step layer norms into `stats` and decides whether
// to upload. Each step is tested against thresholds built from the steps
// before it; steps seen before every layer is armed cannot fire.
SegmentDecision decide_segment(GradStats& stats, const std::vector<std::vector<double>>& step_norms,
                               double current_metric, double reference_metric,
                               const GsfsClientConfig& cfg);

struct ClientState {
  ClientId client_id = 0;
  ParameterVector local_params;
  ParameterVector reference_params;
  double reference_metric = 0.0;
  GradStats grad_stats;
  std::uint64_t submission_count = 0;
  std::uint64_t steps_done = 0;
  std::shared_ptr<const Dataset> train_shard;
  std::shared_ptr<const Dataset> val_shard;
  std::shared_ptr<MinibatchStream> batches;  // owned by this client alone
};

// Builds a client positioned at `global` (as if a broadcast had arrived).
ClientState make_client(ClientId id, const ParameterVector& global,
                        std::shared_ptr<const Dataset> train, std::shared_ptr<const Dataset> val,
                        const ModelSpec& spec, const GsfsClientConfig& gcfg, const TrainConfig& tcfg,
                        std::uint64_t batch_seed);

struct ClientStepResult {
  SegmentDecision decision;
  std::optional<ClientUpdate> upload;
  double metric = 0.0;
};

std::size_t segment_steps(const ClientState& state, const GsfsClientConfig& cfg);

// One training segment followed by the trigger checks. On upload the
// submission count grows; the reference point is left alone.
ClientStepResult client_step(ClientState& state, const GsfsClientConfig& gcfg, const TrainConfig& tcfg,
                             const ModelSpec& spec, double now = 0.0, std::uint64_t round_hint = 0);

// theta <- global, theta_ref <- global, reference metric re-evaluated on the
// validation shard. Gradient statistics are kept.
void on_broadcast(ClientState& state, const ParameterVector& global, const ModelSpec& spec,
                  const GsfsClientConfig& cfg);

ParameterVector param_delta(const ParameterVector& current, const ParameterVector& reference);

}  // namespace fedsense
