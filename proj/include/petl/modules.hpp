#pragma once

#include <cstddef>
#include <variant>

#include "petl/ops.hpp"
#include "petl/tensor.hpp"

namespace petl {

struct LoraState {
  Tensor a;  // [d x r], Gaussian init
  Tensor b;  // [r x d], zero init
  double s = 8.0;

  std::size_t rank() const { return a.dim(1); }
};

/// x W (+ bias) + s (x A) B.
inline Tensor lora_qv_forward(const Tensor& x, const Tensor& w, const Tensor& bias,
                              const LoraState& lora) {
  Tensor frozen = ops::linear(x, w, bias);
  Tensor update = ops::linear(ops::linear(x, lora.a), lora.b);
  return ops::add(frozen, ops::scale(update, lora.s));
}

/// W + s A B, the deployable merged projection.
inline Tensor lora_merge(const Tensor& w, const Tensor& a, const Tensor& b, double s) {
  NoGradScope no_grad;
  return ops::add(w.detach(), ops::scale(ops::matmul(a.detach(), b.detach()), s));
}

struct BottleneckState {
  Tensor ln_gamma, ln_beta;
  Tensor down_w, down_b;  // [d x r], [r]
  Tensor up_w, up_b;      // [r x d], [d], zero init
};

/// LN -> down-projection -> ReLU -> up-projection.
inline Tensor bottleneck_forward(const Tensor& x, const BottleneckState& st) {
  Tensor h = ops::layer_norm(x, st.ln_gamma, st.ln_beta);
  h = ops::relu(ops::linear(h, st.down_w, st.down_b));
  return ops::linear(h, st.up_w, st.up_b);
}

struct ConformerAdapterState {
  Tensor ln_gamma, ln_beta;
  Tensor pw1_w, pw1_b;  // [d x 2r], [2r]
  Tensor dw_w, dw_b;    // [r x k], [r]
  ops::BatchNormState bn;
  Tensor pw2_w, pw2_b;  // [r x d], [d], zero init

  std::size_t bottleneck() const { return dw_w.dim(0); }
  std::size_t kernel() const { return dw_w.dim(1); }
};

/// LN -> pointwise (d -> 2r) -> GLU (-> r) -> depthwise conv along the
/// sequence -> batch norm -> swish -> pointwise (r -> d). x is [B x S x d].
inline Tensor conformer_adapter_forward(const Tensor& x, ConformerAdapterState& st, bool training) {
  if (x.rank() != 3 || x.dim(1) < 1)
    throw DimensionError("conformer adapter: expected [B x S x d], got " + shape_str(x.shape()));
  Tensor h = ops::layer_norm(x, st.ln_gamma, st.ln_beta);
  h = ops::glu(ops::linear(h, st.pw1_w, st.pw1_b));
  h = ops::depthwise_conv1d(h, st.dw_w, st.dw_b);
  h = ops::swish(ops::batch_norm_1d(h, st.bn, training));
  return ops::linear(h, st.pw2_w, st.pw2_b);
}

using AdapterState = std::variant<BottleneckState, ConformerAdapterState>;

inline Tensor adapter_forward(const Tensor& x, AdapterState& st, bool training) {
  if (auto* b = std::get_if<BottleneckState>(&st)) return bottleneck_forward(x, *b);
  return conformer_adapter_forward(x, std::get<ConformerAdapterState>(st), training);
}

/// Inserts p prompt tokens right after the CLS token of [B x (N+1) x d].
/// Only valid on the input of the first layer.
inline Tensor attach_prompts_shallow(const Tensor& x, const Tensor& prompts,
                                     std::size_t layer_index = 0) {
  if (layer_index != 0)
    throw ConfigError("shallow prompts attach before the first layer only (got layer " +
                      std::to_string(layer_index) + ")");
  if (x.rank() != 3 || prompts.rank() != 2 || prompts.dim(1) != x.dim(2))
    throw DimensionError("attach_prompts_shallow: x " + shape_str(x.shape()) + " prompts " +
                         shape_str(prompts.shape()));
  const std::size_t s = x.dim(1);
  return ops::concat_seq({ops::slice_seq(x, 0, 1), ops::tile_batch(prompts, x.dim(0)),
                          ops::slice_seq(x, 1, s - 1)});
}

/// Deep prompts: layer 0 inserts p prompts after CLS; every later layer
/// discards the p prompt positions produced by the previous layer and puts
/// its own fresh prompts in their place.
inline Tensor attach_prompts_deep(const Tensor& x, const Tensor& prompts, std::size_t layer_index) {
  if (layer_index == 0) return attach_prompts_shallow(x, prompts, 0);
  const std::size_t p = prompts.dim(0), s = x.dim(1);
  if (x.rank() != 3 || s < 1 + p || prompts.dim(1) != x.dim(2))
    throw DimensionError("attach_prompts_deep: x " + shape_str(x.shape()) + " prompts " +
                         shape_str(prompts.shape()));
  return ops::concat_seq({ops::slice_seq(x, 0, 1), ops::tile_batch(prompts, x.dim(0)),
                          ops::slice_seq(x, 1 + p, s - 1 - p)});
}

struct PrefixKV {
  Tensor k;
  Tensor v;
};

/// Projects the prefix table [p x d] through the frozen key/value weights and
/// prepends the rows to K and V ([B x S x d] each). Queries are untouched.
inline PrefixKV prefix_kv(const Tensor& k, const Tensor& v, const Tensor& prefix,
                          const Tensor& w_k, const Tensor& w_v) {
  const std::size_t bsz = k.dim(0);
  Tensor pk = ops::tile_batch(ops::matmul(prefix, w_k), bsz);
  Tensor pv = ops::tile_batch(ops::matmul(prefix, w_v), bsz);
  return {ops::concat_seq({pk, k}), ops::concat_seq({pv, v})};
}

}  // namespace petl
