#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "rfau/data.hpp"
#include "rfau/numerics.hpp"

namespace rfau {

// y = x W^T + b, with x holding one sample per row.
struct LinearLayer {
  Matrix weight;  // out_dim x in_dim
  Vector bias;    // out_dim

  std::size_t in_dim() const noexcept { return weight.cols(); }
  std::size_t out_dim() const noexcept { return weight.rows(); }

  friend bool operator==(const LinearLayer&, const LinearLayer&) = default;
};

// Linear layers with ReLU between them; the last layer is a linear head whose
// outputs are logits. Layer k produces the pre-activation feature x_k.
class Mlp {
 public:
  Mlp() = default;
  explicit Mlp(std::vector<LinearLayer> layers);

  const std::vector<LinearLayer>& layers() const noexcept { return layers_; }
  std::vector<LinearLayer>& layers() noexcept { return layers_; }
  const LinearLayer& layer(std::size_t k) const { return layers_.at(k); }
  LinearLayer& layer(std::size_t k) { return layers_.at(k); }

  std::size_t num_layers() const noexcept { return layers_.size(); }
  std::size_t input_width() const { return layers_.front().in_dim(); }
  std::size_t output_width() const { return layers_.back().out_dim(); }
  std::vector<std::size_t> widths() const;
  std::size_t parameter_count() const;

  friend bool operator==(const Mlp&, const Mlp&) = default;

 private:
  std::vector<LinearLayer> layers_;
};

// Every intermediate value of one forward pass.
struct FeatureTape {
  Matrix input;               // x_0
  std::vector<Matrix> pre;    // pre[k]: output of linear layer k (pre-activation)
  std::vector<Matrix> post;   // post[k] = relu(pre[k]) for hidden layers only

  // The matrix layer k consumed.
  const Matrix& layer_input(std::size_t k) const { return k == 0 ? input : post[k - 1]; }

  friend bool operator==(const FeatureTape&, const FeatureTape&) = default;
};

struct ForwardResult {
  Matrix logits;
  FeatureTape tape;
};

struct LayerGrad {
  Matrix weight;
  Vector bias;
};
using MlpGrads = std::vector<LayerGrad>;

// He-normal weights (std sqrt(2 / in_dim)), zero biases. widths = {input, hidden..., output}.
Mlp mlp_init(std::span<const std::size_t> widths, Rng& rng);

ForwardResult forward(const Mlp& m, const Matrix& x);
Matrix predict_logits(const Mlp& m, const Matrix& x);
Matrix predict_proba(const Mlp& m, const Matrix& x);

// Reverse-mode gradients. `dlogits` is dLoss/dlogits for the whole batch (any
// 1/N averaging is already folded in), so dW_k = delta_k^T * input_k with no
// further scaling. ReLU'(0) = 0.
MlpGrads backward(const Mlp& m, const FeatureTape& tape, const Matrix& dlogits);

// Backpropagates from the output layer down to layer 0, adding
// `feature_grads[k]` (when non-empty) to dLoss/dx_k on the way. Returns
// dLoss/dx_k for every layer; `on_layer` sees each layer's delta and input.
using LayerVisitor = std::function<void(std::size_t layer, const Matrix& delta, const Matrix& input)>;
std::vector<Matrix> backpropagate(const std::vector<const Matrix*>& weights, const FeatureTape& tape,
                                  const Matrix& dlogits, std::span<const Matrix> feature_grads,
                                  const LayerVisitor& on_layer);

// A trainable tensor viewed as a flat span together with its gradient.
struct ParamSlot {
  std::span<double> value;
  std::span<const double> grad;
};

std::vector<ParamSlot> param_slots(Mlp& m, const MlpGrads& grads);
double global_grad_norm(std::span<const ParamSlot> slots);
void scale_grads(MlpGrads& grads, double factor);

// Plain gradient descent: theta <- theta - lr * g. Throws NumericError (without
// touching any parameter) when a gradient is non-finite.
void sgd_update(std::span<const ParamSlot> slots, double lr);
void sgd_step(Mlp& m, const MlpGrads& grads, double lr);

struct AdamWOptions {
  double lr = 1e-2;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

// Decoupled weight decay Adam. Moments are allocated on the first step and
// must keep matching the slot sizes afterwards.
class AdamW {
 public:
  explicit AdamW(AdamWOptions options = {}) : options_(options) {}

  void step(std::span<const ParamSlot> slots);
  std::size_t steps() const noexcept { return t_; }
  const AdamWOptions& options() const noexcept { return options_; }

 private:
  AdamWOptions options_;
  std::size_t t_ = 0;
  std::vector<Vector> m_;
  std::vector<Vector> v_;
};

void adamw_step(Mlp& m, const MlpGrads& grads, AdamW& state);

enum class OptimizerKind { sgd, adamw };

std::string to_string(OptimizerKind kind);
OptimizerKind parse_optimizer(const std::string& name);

// Runs either SGD or AdamW over parameter slots.
class Optimizer {
 public:
  Optimizer(OptimizerKind kind, double lr, double weight_decay = 0.0);
  void step(std::span<const ParamSlot> slots);

 private:
  OptimizerKind kind_;
  double lr_;
  AdamW adamw_;
};

// Softmax cross-entropy over rows, each row weighted: loss = sum_i w_i * CE_i.
// Writes dLoss/dlogits into `dlogits` (resized) and returns the loss. The
// gradient accounts for the 1e-12 log clip exactly.
double weighted_softmax_xent(const Matrix& logits, const Matrix& targets, std::span<const double> row_weights,
                             Matrix& dlogits);

struct TrainOptions {
  std::size_t epochs = 20;
  std::size_t batch = 32;
  double lr = 1e-2;
  OptimizerKind optimizer = OptimizerKind::adamw;
  double weight_decay = 0.0;
};

struct EpochLog {
  std::size_t epoch = 0;
  double mean_loss = 0.0;
  double accuracy = 0.0;
};

// Mean cross-entropy training over shuffled mini-batches (the last batch may be short).
std::vector<EpochLog> train_supervised(Mlp& m, const Dataset& data, const TrainOptions& options, Rng& rng);

}  // namespace rfau
