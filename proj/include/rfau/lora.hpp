#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "rfau/model.hpp"
#include "rfau/numerics.hpp"

namespace rfau {

// Low-rank branch Delta W = B A attached to linear layer `layer`.
struct LoraAdapter {
  std::size_t layer = 0;
  Matrix a;  // rank x in_dim
  Matrix b;  // out_dim x rank

  std::size_t rank() const noexcept { return a.rows(); }

  friend bool operator==(const LoraAdapter&, const LoraAdapter&) = default;
};

struct AttachOptions {
  std::size_t rank = 4;
  double a_init_std = 0.01;
  // Multiplier on the branch output. 1 means the plain x W^T + x A^T B^T form.
  double scale = 1.0;
};

// Hidden layers 0 .. L-2 (everything but the classifier head).
std::vector<std::size_t> default_instrumented_layers(const Mlp& base);

// A frozen base network plus LoRA adapters on a subset of its layers.
// Adapters are kept sorted by layer index; that order is the "instrumented
// order" used by every per-layer vector in this module.
class InstrumentedModel {
 public:
  InstrumentedModel(Mlp base, std::vector<LoraAdapter> adapters, double scale = 1.0);

  const Mlp& base() const noexcept { return base_; }
  const std::vector<LoraAdapter>& adapters() const noexcept { return adapters_; }
  std::vector<LoraAdapter>& adapters() noexcept { return adapters_; }
  double scale() const noexcept { return scale_; }

  std::size_t instrumented_count() const noexcept { return adapters_.size(); }
  std::vector<std::size_t> instrumented_layers() const;
  // Position of `layer` in the instrumented order, if it carries an adapter.
  std::optional<std::size_t> slot_of(std::size_t layer) const;

 private:
  Mlp base_;
  std::vector<LoraAdapter> adapters_;
  double scale_;
};

// B = 0, A ~ N(0, a_init_std^2). The rank must satisfy 1 <= rank <= min(out, in)
// for every chosen layer.
InstrumentedModel attach(const Mlp& base, std::span<const std::size_t> layer_ids, const AttachOptions& options,
                         Rng& rng);

// Per instrumented layer, for every row of the batch:
//   pretrained: the frozen network's feature x_k on the same input
//   summed:     the adapted network's feature x_k^s (what the next layer consumes)
//   residual:   summed - pretrained, the total increment the adapters introduced
//   branch:     the layer's own LoRA output  scale * x_{k-1} A^T B^T
// When no adapter upstream of layer k is active, residual == branch.
struct LayerDecomposition {
  std::size_t layer = 0;
  Matrix pretrained;
  Matrix residual;
  Matrix summed;
  Matrix branch;
};

struct DecomposedTape {
  FeatureTape student;  // adapted network
  FeatureTape frozen;   // base network on the same input
  std::vector<LayerDecomposition> layers;  // instrumented order
  std::vector<Matrix> projected;           // x_{k-1} A^T per adapter, reused by backward
};

struct DecomposedForward {
  Matrix logits;
  DecomposedTape tape;
};

DecomposedForward forward_decomposed(const InstrumentedModel& im, const Matrix& x);

// Adapted network only (no frozen stream). `projected`, when non-null,
// receives x_{k-1} A^T per adapter for backward_adapters.
ForwardResult forward_adapted(const InstrumentedModel& im, const Matrix& x, std::vector<Matrix>* projected = nullptr);

struct AdapterGrad {
  Matrix a;
  Matrix b;
};
using AdapterGrads = std::vector<AdapterGrad>;

// Exact gradients of a loss w.r.t. every A and B. `dlogits` is dLoss/dlogits;
// `feature_grads` (instrumented order, may be empty) adds dLoss/dx_k^s at each
// instrumented layer. Base weights receive no update.
AdapterGrads backward_adapters(const InstrumentedModel& im, const FeatureTape& student,
                               std::span<const Matrix> projected, const Matrix& dlogits,
                               std::span<const Matrix> feature_grads = {});
AdapterGrads backward_adapters(const InstrumentedModel& im, const DecomposedTape& tape, const Matrix& dlogits,
                               std::span<const Matrix> feature_grads = {});

std::vector<ParamSlot> adapter_slots(InstrumentedModel& im, const AdapterGrads& grads);

// W + scale * B A at every instrumented layer; other layers copied.
Mlp merge(const InstrumentedModel& im);

}  // namespace rfau
