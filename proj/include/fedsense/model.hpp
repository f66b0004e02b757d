#pragma once

// Small classifiers with exact gradients: multinomial logistic regression
// (no hidden layers) or an MLP with relu/tanh hidden layers, trained with
// softmax cross-entropy.

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "fedsense/rng.hpp"

namespace fedsense {

enum class Activation { relu, tanh };

// One dense layer inside a flat parameter vector: a row-major
// fan_out x fan_in weight block followed by fan_out biases.
struct LayerSlice {
  std::uint32_t layer_id = 0;
  std::size_t offset = 0;
  std::size_t length = 0;
  std::size_t fan_in = 0;
  std::size_t fan_out = 0;

  std::size_t weight_offset() const { return offset; }
  std::size_t bias_offset() const { return offset + fan_in * fan_out; }
  bool operator==(const LayerSlice&) const = default;
};

struct ModelSpec {
  std::size_t input_dim = 0;
  std::vector<std::size_t> hidden_dims;  // empty = logistic regression
  std::size_t num_classes = 2;
  Activation activation = Activation::relu;

  // Throws ConfigError when a dimension is zero or num_classes < 2.
  void validate() const;
  std::vector<LayerSlice> layout() const;
  std::size_t param_count() const;
  std::size_t num_layers() const { return hidden_dims.size() + 1; }
};

class ParameterVector {
 public:
  ParameterVector() = default;
  ParameterVector(std::vector<double> values, std::vector<LayerSlice> layers);
  // Zero-filled vector with the layout of spec.
  static ParameterVector zeros(const ModelSpec& spec);

  std::span<double> values() { return values_; }
  std::span<const double> values() const { return values_; }
  std::vector<double>& raw() { return values_; }
  const std::vector<LayerSlice>& layers() const { return layers_; }

  std::span<double> layer(std::size_t l) { return values().subspan(layers_[l].offset, layers_[l].length); }
  std::span<const double> layer(std::size_t l) const {
    return values().subspan(layers_[l].offset, layers_[l].length);
  }

  std::size_t size() const { return values_.size(); }
  bool same_shape(const ParameterVector& other) const { return layers_ == other.layers_; }
  bool all_finite() const;

  bool operator==(const ParameterVector&) const = default;

 private:
  std::vector<double> values_;
  std::vector<LayerSlice> layers_;
};

struct GradientVector {
  ParameterVector grad;
  std::vector<double> per_layer_norms;
};

// Euclidean norm of every layer slice of v.
std::vector<double> layer_norms(const ParameterVector& v);

// Row-major view over labeled samples; rows is an optional subset (empty
// means every row).
struct LabeledSamples {
  std::span<const double> features;
  std::span<const int> labels;
  std::size_t dim = 0;
  std::span<const std::size_t> rows;

  std::size_t count() const { return rows.empty() ? labels.size() : rows.size(); }
  std::size_t row(std::size_t i) const { return rows.empty() ? i : rows[i]; }
  std::span<const double> x(std::size_t i) const { return features.subspan(row(i) * dim, dim); }
  int y(std::size_t i) const { return labels[row(i)]; }
  LabeledSamples subset(std::span<const std::size_t> r) const { return {features, labels, dim, r}; }
};

struct TrainConfig {
  int local_epochs = 1;
  double learning_rate = 0.1;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;

  void validate() const;
};

struct MetricsRecord {
  double accuracy = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  double loss = 0.0;
  std::size_t sample_count = 0;
};

struct LossAndGrad {
  double loss = 0.0;
  GradientVector grad;
};

// Glorot-uniform weights, zero biases.
ParameterVector init_params(const ModelSpec& spec, std::uint64_t seed);

// Logits for one sample.
std::vector<double> forward(const ParameterVector& params, std::span<const double> x,
                            const ModelSpec& spec);
// Argmax of logits, ties to the lowest class index.
int predict(const ParameterVector& params, std::span<const double> x, const ModelSpec& spec);

LossAndGrad loss_and_grad(const ParameterVector& params, const LabeledSamples& batch,
                          const ModelSpec& spec);

// Shuffled mini-batch order over n samples. Reshuffles at every epoch
// boundary; the final batch of an epoch may be short.
class MinibatchStream {
 public:
  MinibatchStream(std::size_t n, std::size_t batch_size, std::uint64_t seed);

  std::span<const std::size_t> next();
  std::size_t steps_per_epoch() const { return (order_.size() + batch_ - 1) / batch_; }

 private:
  Rng rng_;
  std::vector<std::size_t> order_;
  std::size_t batch_;
  std::size_t pos_ = 0;
};

struct TrainResult {
  ParameterVector params;
  std::vector<std::vector<double>> step_norms;  // one per-layer list per step
};

// Runs `steps` SGD steps theta <- theta - lr * grad pulling batches from stream.
TrainResult train_steps(ParameterVector params, const LabeledSamples& shard, const ModelSpec& spec,
                        double learning_rate, MinibatchStream& stream, std::size_t steps);

// E local epochs of mini-batch SGD, batch order drawn from cfg.seed.
TrainResult local_train(const ParameterVector& params, const LabeledSamples& shard,
                        const TrainConfig& cfg, const ModelSpec& spec);
// Same, continuing an existing batch stream.
TrainResult local_train(const ParameterVector& params, const LabeledSamples& shard,
                        const TrainConfig& cfg, const ModelSpec& spec, MinibatchStream& stream);

struct ConfusionMatrix {
  std::size_t num_classes = 0;
  std::vector<std::size_t> counts;  // counts[truth * num_classes + predicted]

  explicit ConfusionMatrix(std::size_t classes) : num_classes(classes), counts(classes * classes) {}
  void add(int truth, int predicted) { ++counts[truth * num_classes + predicted]; }
  std::size_t at(std::size_t truth, std::size_t predicted) const {
    return counts[truth * num_classes + predicted];
  }
  std::size_t total() const;
  // Per-class rates; a 0/0 class yields 0.
  double precision(std::size_t c) const;
  double recall(std::size_t c) const;
};

// Macro precision/recall, f1 as their harmonic mean; loss is left at zero.
MetricsRecord metrics_from_confusion(const ConfusionMatrix& cm);

MetricsRecord evaluate(const ParameterVector& params, const LabeledSamples& shard,
                       const ModelSpec& spec);

}  // namespace fedsense
