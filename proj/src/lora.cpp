#include "rfau/lora.hpp"

#include <algorithm>
#include <string>

#include "rfau/error.hpp"

namespace rfau {

std::vector<std::size_t> default_instrumented_layers(const Mlp& base) {
  std::vector<std::size_t> out;
  for (std::size_t k = 0; k + 1 < base.num_layers(); ++k) out.push_back(k);
  return out;
}

InstrumentedModel::InstrumentedModel(Mlp base, std::vector<LoraAdapter> adapters, double scale)
    : base_(std::move(base)), adapters_(std::move(adapters)), scale_(scale) {
  std::ranges::sort(adapters_, {}, &LoraAdapter::layer);
  for (std::size_t i = 0; i < adapters_.size(); ++i) {
    const auto& ad = adapters_[i];
    if (i > 0 && adapters_[i - 1].layer == ad.layer) {
      throw ConfigError("InstrumentedModel: layer " + std::to_string(ad.layer) + " has two adapters");
    }
    if (ad.layer >= base_.num_layers()) {
      throw ConfigError("InstrumentedModel: layer " + std::to_string(ad.layer) + " does not exist");
    }
    const auto& host = base_.layer(ad.layer);
    if (ad.a.cols() != host.in_dim() || ad.b.rows() != host.out_dim() || ad.b.cols() != ad.a.rows()) {
      throw ShapeError("InstrumentedModel: adapter on layer " + std::to_string(ad.layer) +
                       " does not match its host layer");
    }
  }
}

std::vector<std::size_t> InstrumentedModel::instrumented_layers() const {
  std::vector<std::size_t> out;
  for (const auto& ad : adapters_) out.push_back(ad.layer);
  return out;
}

std::optional<std::size_t> InstrumentedModel::slot_of(std::size_t layer) const {
  for (std::size_t i = 0; i < adapters_.size(); ++i) {
    if (adapters_[i].layer == layer) return i;
  }
  return std::nullopt;
}

InstrumentedModel attach(const Mlp& base, std::span<const std::size_t> layer_ids, const AttachOptions& options,
                         Rng& rng) {
  std::vector<std::size_t> ids(layer_ids.begin(), layer_ids.end());
  std::ranges::sort(ids);
  if (std::ranges::adjacent_find(ids) != ids.end()) throw ConfigError("attach: duplicate layer id");
  std::vector<LoraAdapter> adapters;
  for (std::size_t k : ids) {
    if (k >= base.num_layers()) {
      throw ConfigError("attach: layer " + std::to_string(k) + " out of range (model has " +
                        std::to_string(base.num_layers()) + " layers)");
    }
    const auto& host = base.layer(k);
    const std::size_t bound = std::min(host.out_dim(), host.in_dim());
    if (options.rank < 1 || options.rank > bound) {
      throw ConfigError("attach: rank " + std::to_string(options.rank) + " invalid for layer " + std::to_string(k) +
                        " (must be in [1, " + std::to_string(bound) + "])");
    }
    adapters.push_back({k, gaussian_fill(rng, options.rank, host.in_dim(), 0.0, options.a_init_std),
                        Matrix(host.out_dim(), options.rank)});
  }
  return InstrumentedModel(base, std::move(adapters), options.scale);
}

namespace {

Matrix relu(const Matrix& m) {
  Matrix out = m;
  for (double& v : out.values()) v = v > 0.0 ? v : 0.0;
  return out;
}

// Runs the adapted network; fills projected (x A^T) and branch outputs per adapter.
ForwardResult run_adapted(const InstrumentedModel& im, const Matrix& x, std::vector<Matrix>* projected,
                          std::vector<Matrix>* branches) {
  const Mlp& base = im.base();
  if (x.cols() != base.input_width()) {
    throw ShapeError("forward_decomposed: input has " + std::to_string(x.cols()) + " columns, model expects " +
                     std::to_string(base.input_width()));
  }
  ForwardResult out;
  out.tape.input = x;
  const std::size_t n = base.num_layers();
  for (std::size_t k = 0; k < n; ++k) {
    const auto& layer = base.layer(k);
    const Matrix& in = out.tape.layer_input(k);
    Matrix z = matmul_nt(in, layer.weight);
    add_row_vector(z, layer.bias);
    if (auto slot = im.slot_of(k)) {
      const auto& ad = im.adapters()[*slot];
      Matrix h = matmul_nt(in, ad.a);
      Matrix branch = im.scale() * matmul_nt(h, ad.b);
      z += branch;
      if (projected) projected->push_back(std::move(h));
      if (branches) branches->push_back(std::move(branch));
    }
    if (k + 1 < n) out.tape.post.push_back(relu(z));
    out.tape.pre.push_back(std::move(z));
  }
  out.logits = out.tape.pre.back();
  return out;
}

}  // namespace

ForwardResult forward_adapted(const InstrumentedModel& im, const Matrix& x, std::vector<Matrix>* projected) {
  return run_adapted(im, x, projected, nullptr);
}

DecomposedForward forward_decomposed(const InstrumentedModel& im, const Matrix& x) {
  DecomposedForward out;
  std::vector<Matrix> branches;
  ForwardResult student = run_adapted(im, x, &out.tape.projected, &branches);
  ForwardResult frozen = forward(im.base(), x);
  for (std::size_t i = 0; i < im.adapters().size(); ++i) {
    const std::size_t k = im.adapters()[i].layer;
    LayerDecomposition d;
    d.layer = k;
    d.pretrained = frozen.tape.pre[k];
    d.summed = student.tape.pre[k];
    d.residual = d.summed - d.pretrained;
    d.branch = std::move(branches[i]);
    out.tape.layers.push_back(std::move(d));
  }
  out.logits = std::move(student.logits);
  out.tape.student = std::move(student.tape);
  out.tape.frozen = std::move(frozen.tape);
  return out;
}

AdapterGrads backward_adapters(const InstrumentedModel& im, const FeatureTape& student,
                               std::span<const Matrix> projected, const Matrix& dlogits,
                               std::span<const Matrix> feature_grads) {
  const Mlp& base = im.base();
  const auto& adapters = im.adapters();
  if (projected.size() != adapters.size()) throw ShapeError("backward_adapters: tape does not match adapters");
  if (!feature_grads.empty() && feature_grads.size() != adapters.size()) {
    throw ShapeError("backward_adapters: need one feature gradient per instrumented layer");
  }

  // Effective weights W + scale * B A drive the chain rule through the adapted network.
  std::vector<Matrix> effective;
  effective.reserve(adapters.size());
  std::vector<const Matrix*> weights(base.num_layers());
  std::vector<Matrix> layer_feature_grads(base.num_layers());
  for (std::size_t k = 0; k < base.num_layers(); ++k) weights[k] = &base.layer(k).weight;
  for (std::size_t i = 0; i < adapters.size(); ++i) {
    const auto& ad = adapters[i];
    effective.push_back(base.layer(ad.layer).weight + im.scale() * matmul(ad.b, ad.a));
    if (!feature_grads.empty()) {
      if (!feature_grads[i].empty() && !feature_grads[i].same_shape(student.pre[ad.layer])) {
        throw ShapeError("backward_adapters: feature gradient shape mismatch at layer " + std::to_string(ad.layer));
      }
      layer_feature_grads[ad.layer] = feature_grads[i];
    }
  }
  for (std::size_t i = 0; i < adapters.size(); ++i) weights[adapters[i].layer] = &effective[i];

  AdapterGrads grads(adapters.size());
  backpropagate(weights, student, dlogits, layer_feature_grads,
                [&](std::size_t k, const Matrix& delta, const Matrix& input) {
                  auto slot = im.slot_of(k);
                  if (!slot) return;
                  const auto& ad = adapters[*slot];
                  // z += scale * (x A^T) B^T
                  grads[*slot].b = im.scale() * matmul_tn(delta, projected[*slot]);
                  grads[*slot].a = im.scale() * matmul_tn(matmul(delta, ad.b), input);
                });
  return grads;
}

AdapterGrads backward_adapters(const InstrumentedModel& im, const DecomposedTape& tape, const Matrix& dlogits,
                               std::span<const Matrix> feature_grads) {
  return backward_adapters(im, tape.student, tape.projected, dlogits, feature_grads);
}

std::vector<ParamSlot> adapter_slots(InstrumentedModel& im, const AdapterGrads& grads) {
  auto& adapters = im.adapters();
  if (grads.size() != adapters.size()) throw ShapeError("adapter_slots: gradient count mismatch");
  std::vector<ParamSlot> slots;
  for (std::size_t i = 0; i < adapters.size(); ++i) {
    if (!grads[i].a.same_shape(adapters[i].a) || !grads[i].b.same_shape(adapters[i].b)) {
      throw ShapeError("adapter_slots: gradient shape mismatch");
    }
    slots.push_back({adapters[i].a.values(), grads[i].a.values()});
    slots.push_back({adapters[i].b.values(), grads[i].b.values()});
  }
  return slots;
}

Mlp merge(const InstrumentedModel& im) {
  Mlp out = im.base();
  for (const auto& ad : im.adapters()) {
    out.layer(ad.layer).weight += im.scale() * matmul(ad.b, ad.a);
  }
  return out;
}

}  // namespace rfau
