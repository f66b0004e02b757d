#include "fedsense/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "fedsense/error.hpp"
#include "fedsense/kernels.hpp"

namespace fedsense {

void ModelSpec::validate() const {
  if (input_dim == 0) throw ConfigError("model input_dim must be positive", "/model/input_dim");
  if (num_classes < 2) throw ConfigError("model num_classes must be at least 2", "/model/num_classes");
  for (std::size_t h : hidden_dims) {
    if (h == 0) throw ConfigError("model hidden_dims entries must be positive", "/model/hidden_dims");
  }
}

std::vector<LayerSlice> ModelSpec::layout() const {
  std::vector<LayerSlice> out;
  std::size_t offset = 0;
  std::size_t fan_in = input_dim;
  for (std::size_t l = 0; l < num_layers(); ++l) {
    const std::size_t fan_out = l < hidden_dims.size() ? hidden_dims[l] : num_classes;
    LayerSlice s;
    s.layer_id = static_cast<std::uint32_t>(l);
    s.offset = offset;
    s.fan_in = fan_in;
    s.fan_out = fan_out;
    s.length = fan_in * fan_out + fan_out;
    out.push_back(s);
    offset += s.length;
    fan_in = fan_out;
  }
  return out;
}

std::size_t ModelSpec::param_count() const {
  std::size_t n = 0;
  for (const auto& s : layout()) n += s.length;
  return n;
}

ParameterVector::ParameterVector(std::vector<double> values, std::vector<LayerSlice> layers)
    : values_(std::move(values)), layers_(std::move(layers)) {
  std::size_t expect = 0;
  for (const auto& s : layers_) {
    if (s.offset != expect) throw ShapeError("layer offsets are not contiguous");
    expect += s.length;
  }
  if (expect != values_.size()) {
    throw ShapeError("layer index covers " + std::to_string(expect) + " values, vector has " +
                     std::to_string(values_.size()));
  }
}

ParameterVector ParameterVector::zeros(const ModelSpec& spec) {
  return ParameterVector(std::vector<double>(spec.param_count(), 0.0), spec.layout());
}

bool ParameterVector::all_finite() const {
  return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
}

std::vector<double> layer_norms(const ParameterVector& v) {
  std::vector<double> norms;
  norms.reserve(v.layers().size());
  for (std::size_t l = 0; l < v.layers().size(); ++l) {
    norms.push_back(std::sqrt(kernels::sum_squares(v.layer(l))));
  }
  return norms;
}

void TrainConfig::validate() const {
  if (local_epochs < 1) throw ConfigError("train local_epochs must be >= 1", "/train/local_epochs");
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
    throw ConfigError("train learning_rate must be a finite nonnegative number",
                      "/train/learning_rate");
  }
  if (batch_size == 0) throw ConfigError("train batch_size must be positive", "/train/batch_size");
}

ParameterVector init_params(const ModelSpec& spec, std::uint64_t seed) {
  spec.validate();
  ParameterVector p = ParameterVector::zeros(spec);
  Rng rng(seed);
  for (const auto& s : p.layers()) {
    const double r = std::sqrt(6.0 / static_cast<double>(s.fan_in + s.fan_out));
    auto w = p.values().subspan(s.weight_offset(), s.fan_in * s.fan_out);
    for (double& x : w) x = rng.uniform(-r, r);
  }
  return p;
}

namespace {

void check_batch(const ParameterVector& params, const LabeledSamples& batch, const ModelSpec& spec) {
  if (batch.count() == 0) throw DataError("batch is empty");
  if (batch.dim != spec.input_dim) {
    throw ShapeError("feature width " + std::to_string(batch.dim) + " does not match input_dim " +
                     std::to_string(spec.input_dim));
  }
  if (params.layers() != spec.layout()) throw ShapeError("parameter layout does not match model spec");
}

void check_sample(const LabeledSamples& batch, std::size_t i, std::size_t num_classes) {
  const int y = batch.y(i);
  if (y < 0 || static_cast<std::size_t>(y) >= num_classes) {
    throw DataError("label " + std::to_string(y) + " outside [0, " + std::to_string(num_classes) + ")");
  }
  for (double v : batch.x(i)) {
    if (!std::isfinite(v)) throw DataError("non-finite feature value in batch");
  }
}

double activate(Activation a, double z) { return a == Activation::relu ? std::max(z, 0.0) : std::tanh(z); }

// Derivative expressed through the activation output h = act(z).
double activate_grad(Activation a, double z, double h) {
  if (a == Activation::relu) return z > 0.0 ? 1.0 : 0.0;
  return 1.0 - h * h;
}

// Per-sample forward pass keeping pre-activations and activations.
struct Trace {
  std::vector<std::vector<double>> pre;   // z for every layer
  std::vector<std::vector<double>> post;  // inputs to every layer; post[0] = x
};

void forward_trace(const ParameterVector& params, std::span<const double> x, const ModelSpec& spec,
                   Trace& tr) {
  const auto& layers = params.layers();
  tr.pre.resize(layers.size());
  tr.post.resize(layers.size());
  tr.post[0].assign(x.begin(), x.end());
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& s = layers[l];
    const auto w = params.values().subspan(s.weight_offset(), s.fan_in * s.fan_out);
    const auto b = params.values().subspan(s.bias_offset(), s.fan_out);
    auto& z = tr.pre[l];
    z.resize(s.fan_out);
    for (std::size_t j = 0; j < s.fan_out; ++j) {
      z[j] = kernels::dot(w.subspan(j * s.fan_in, s.fan_in), tr.post[l]) + b[j];
    }
    if (l + 1 < layers.size()) {
      auto& h = tr.post[l + 1];
      h.resize(s.fan_out);
      for (std::size_t j = 0; j < s.fan_out; ++j) h[j] = activate(spec.activation, z[j]);
    }
  }
}

// Softmax probabilities in place; returns log-sum-exp.
double softmax_inplace(std::vector<double>& z) {
  const double mx = *std::max_element(z.begin(), z.end());
  double sum = 0.0;
  for (double& v : z) {
    v = std::exp(v - mx);
    sum += v;
  }
  for (double& v : z) v /= sum;
  return mx + std::log(sum);
}

int argmax_lowest(std::span<const double> v) {
  int best = 0;
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (v[i] > v[best]) best = static_cast<int>(i);
  }
  return best;
}

}  // namespace

std::vector<double> forward(const ParameterVector& params, std::span<const double> x,
                            const ModelSpec& spec) {
  if (x.size() != spec.input_dim) throw ShapeError("feature width does not match input_dim");
  Trace tr;
  forward_trace(params, x, spec, tr);
  return tr.pre.back();
}

int predict(const ParameterVector& params, std::span<const double> x, const ModelSpec& spec) {
  return argmax_lowest(forward(params, x, spec));
}

LossAndGrad loss_and_grad(const ParameterVector& params, const LabeledSamples& batch,
                          const ModelSpec& spec) {
  check_batch(params, batch, spec);
  const auto& layers = params.layers();
  LossAndGrad out;
  out.grad.grad = ParameterVector::zeros(spec);
  auto g = out.grad.grad.values();
  const auto theta = params.values();

  Trace tr;
  std::vector<double> delta, delta_prev;
  double loss_sum = 0.0;
  for (std::size_t i = 0; i < batch.count(); ++i) {
    check_sample(batch, i, spec.num_classes);
    forward_trace(params, batch.x(i), spec, tr);
    const int y = batch.y(i);
    const double z_y = tr.pre.back()[y];
    delta = tr.pre.back();
    const double lse = softmax_inplace(delta);
    loss_sum += lse - z_y;
    delta[y] -= 1.0;

    for (std::size_t l = layers.size(); l-- > 0;) {
      const auto& s = layers[l];
      auto gw = g.subspan(s.weight_offset(), s.fan_in * s.fan_out);
      auto gb = g.subspan(s.bias_offset(), s.fan_out);
      for (std::size_t j = 0; j < s.fan_out; ++j) {
        kernels::axpy(delta[j], tr.post[l], gw.subspan(j * s.fan_in, s.fan_in));
        gb[j] += delta[j];
      }
      if (l == 0) break;
      const auto w = theta.subspan(s.weight_offset(), s.fan_in * s.fan_out);
      delta_prev.assign(s.fan_in, 0.0);
      for (std::size_t j = 0; j < s.fan_out; ++j) {
        kernels::axpy(delta[j], w.subspan(j * s.fan_in, s.fan_in), delta_prev);
      }
      const auto& z = tr.pre[l - 1];
      const auto& h = tr.post[l];
      for (std::size_t k = 0; k < s.fan_in; ++k) {
        delta_prev[k] *= activate_grad(spec.activation, z[k], h[k]);
      }
      delta.swap(delta_prev);
    }
  }
  const double inv = 1.0 / static_cast<double>(batch.count());
  for (double& v : g) v *= inv;
  out.loss = loss_sum * inv;
  out.grad.per_layer_norms = layer_norms(out.grad.grad);
  return out;
}

MinibatchStream::MinibatchStream(std::size_t n, std::size_t batch_size, std::uint64_t seed)
    : rng_(seed), order_(n), batch_(batch_size) {
  if (n == 0) throw ConfigError("training shard is empty");
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  std::iota(order_.begin(), order_.end(), std::size_t{0});
}

std::span<const std::size_t> MinibatchStream::next() {
  if (pos_ == 0) rng_.shuffle(std::span<std::size_t>(order_));
  const std::size_t len = std::min(batch_, order_.size() - pos_);
  std::span<const std::size_t> out(order_.data() + pos_, len);
  pos_ += len;
  if (pos_ == order_.size()) pos_ = 0;
  return out;
}

TrainResult train_steps(ParameterVector params, const LabeledSamples& shard, const ModelSpec& spec,
                        double learning_rate, MinibatchStream& stream, std::size_t steps) {
  TrainResult out;
  out.step_norms.reserve(steps);
  std::vector<std::size_t> rows;
  for (std::size_t s = 0; s < steps; ++s) {
    const auto local = stream.next();
    rows.resize(local.size());
    for (std::size_t i = 0; i < local.size(); ++i) rows[i] = shard.row(local[i]);
    auto lg = loss_and_grad(params, shard.subset(rows), spec);
    kernels::axpy(-learning_rate, lg.grad.grad.values(), params.values());
    out.step_norms.push_back(std::move(lg.grad.per_layer_norms));
  }
  out.params = std::move(params);
  return out;
}

TrainResult local_train(const ParameterVector& params, const LabeledSamples& shard,
                        const TrainConfig& cfg, const ModelSpec& spec, MinibatchStream& stream) {
  cfg.validate();
  if (shard.count() == 0) throw ConfigError("training shard is empty");
  const std::size_t steps = static_cast<std::size_t>(cfg.local_epochs) * stream.steps_per_epoch();
  return train_steps(params, shard, spec, cfg.learning_rate, stream, steps);
}

TrainResult local_train(const ParameterVector& params, const LabeledSamples& shard,
                        const TrainConfig& cfg, const ModelSpec& spec) {
  if (shard.count() == 0) throw ConfigError("training shard is empty");
  MinibatchStream stream(shard.count(), cfg.batch_size, cfg.seed);
  return local_train(params, shard, cfg, spec, stream);
}

std::size_t ConfusionMatrix::total() const {
  return std::accumulate(counts.begin(), counts.end(), std::size_t{0});
}

double ConfusionMatrix::precision(std::size_t c) const {
  std::size_t predicted = 0;
  for (std::size_t t = 0; t < num_classes; ++t) predicted += at(t, c);
  return predicted == 0 ? 0.0 : static_cast<double>(at(c, c)) / static_cast<double>(predicted);
}

double ConfusionMatrix::recall(std::size_t c) const {
  std::size_t actual = 0;
  for (std::size_t p = 0; p < num_classes; ++p) actual += at(c, p);
  return actual == 0 ? 0.0 : static_cast<double>(at(c, c)) / static_cast<double>(actual);
}

MetricsRecord metrics_from_confusion(const ConfusionMatrix& cm) {
  MetricsRecord m;
  m.sample_count = cm.total();
  std::size_t correct = 0;
  double p = 0.0, r = 0.0;
  for (std::size_t c = 0; c < cm.num_classes; ++c) {
    correct += cm.at(c, c);
    p += cm.precision(c);
    r += cm.recall(c);
  }
  const double k = static_cast<double>(cm.num_classes);
  m.precision = p / k;
  m.recall = r / k;
  m.f1 = (m.precision + m.recall) > 0.0 ? 2.0 * m.precision * m.recall / (m.precision + m.recall) : 0.0;
  m.accuracy = m.sample_count == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(m.sample_count);
  return m;
}

MetricsRecord evaluate(const ParameterVector& params, const LabeledSamples& shard,
                       const ModelSpec& spec) {
  if (shard.count() == 0) throw ConfigError("evaluation shard is empty");
  check_batch(params, shard, spec);
  ConfusionMatrix cm(spec.num_classes);
  Trace tr;
  double loss_sum = 0.0;
  std::vector<double> probs;
  for (std::size_t i = 0; i < shard.count(); ++i) {
    check_sample(shard, i, spec.num_classes);
    forward_trace(params, shard.x(i), spec, tr);
    const auto& logits = tr.pre.back();
    const int y = shard.y(i);
    cm.add(y, argmax_lowest(logits));
    probs = logits;
    loss_sum += softmax_inplace(probs) - logits[y];
  }
  MetricsRecord m = metrics_from_confusion(cm);
  m.loss = loss_sum / static_cast<double>(shard.count());
  return m;
}

}  // namespace fedsense
