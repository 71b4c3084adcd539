#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "petl/config.hpp"
#include "petl/layout.hpp"
#include "petl/modules.hpp"
#include "petl/ops.hpp"

namespace petl {

/// Handles onto one encoder layer's parameters inside a ParamStore.
struct EncoderLayer {
  Tensor ln1_gamma, ln1_beta;
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor ln2_gamma, ln2_beta;
  Tensor w_ff1, b_ff1, w_ff2, b_ff2;

  static EncoderLayer bind(ParamStore& store, std::size_t i) {
    const std::string p = layer_prefix(i);
    auto g = [&](const std::string& s) { return store.at(p + s); };
    return {g("ln1.gamma"),     g("ln1.beta"),      g("mhsa.q.weight"), g("mhsa.q.bias"),
            g("mhsa.k.weight"), g("mhsa.k.bias"),   g("mhsa.v.weight"), g("mhsa.v.bias"),
            g("mhsa.o.weight"), g("mhsa.o.bias"),   g("ln2.gamma"),     g("ln2.beta"),
            g("ff.fc1.weight"), g("ff.fc1.bias"),   g("ff.fc2.weight"), g("ff.fc2.bias")};
  }
};

struct PatchEmbedding {
  Tensor weight, bias;  // [patch_dim x d], [d]
  Tensor cls;           // [1 x d]
  Tensor pos;           // [(N+1) x d]

  static PatchEmbedding bind(ParamStore& store) {
    return {store.at("embed.patch.weight"), store.at("embed.patch.bias"), store.at("embed.cls"),
            store.at("embed.pos")};
  }
};

struct ClassifierHead {
  Tensor weight, bias;  // [d x C], [C]

  static ClassifierHead bind(ParamStore& store) {
    return {store.at("head.weight"), store.at("head.bias")};
  }
};

/// PETL modules attached to one layer. Null members are absent.
struct LayerHooks {
  const LoraState* lora_q = nullptr;
  const LoraState* lora_v = nullptr;
  const Tensor* prefix = nullptr;
  AdapterState* mhsa_parallel = nullptr;
  AdapterState* mhsa_sequential = nullptr;
  AdapterState* ff_parallel = nullptr;
  AdapterState* ff_sequential = nullptr;
};

/// Optional per-layer activation capture for tests and diagnostics.
struct LayerTrace {
  Tensor input;           // X_in
  Tensor attn_input;      // LN(X_in)
  Tensor ff_input;        // LN(X_hat)
  Tensor keys;            // K after any prefix extension
  Tensor attn_probs;      // [B x heads x S x (S + prefix)]
  Tensor output;          // X_out
};

/// Patchify, project, prepend the CLS token and add positional embeddings:
/// [B x F x T] -> [B x (N+1) x d].
inline Tensor patch_embed(const Tensor& spectrogram, const PatchEmbedding& emb,
                          const BackboneConfig& cfg) {
  const auto& g = cfg.patch;
  if (spectrogram.rank() != 3 || spectrogram.dim(1) != g.freq_bins ||
      spectrogram.dim(2) != g.time_bins)
    throw DimensionError("patch_embed: expected [B x " + std::to_string(g.freq_bins) + " x " +
                         std::to_string(g.time_bins) + "], got " +
                         shape_str(spectrogram.shape()));
  const std::size_t bsz = spectrogram.dim(0);
  Tensor tokens = ops::linear(ops::patchify(spectrogram, g.patch_h, g.patch_w), emb.weight, emb.bias);
  Tensor seq = ops::concat_seq({ops::tile_batch(emb.cls, bsz), tokens});
  return ops::add(seq, ops::tile_batch(emb.pos, bsz));
}

/// One pre-LN encoder layer:
///   X_hat = X_in + MHSA(LN(X_in)),  X_out = X_hat + FF(LN(X_hat)),
/// with PETL hooks at their sites. Parallel adapters read the sub-layer's LN
/// output; sequential adapters read the block input.
inline Tensor layer_forward(const Tensor& x, const EncoderLayer& layer, const LayerHooks& hooks,
                            std::size_t heads, bool training, LayerTrace* trace = nullptr) {
  if (x.rank() != 3 || x.dim(1) < 1)
    throw DimensionError("layer_forward: expected [B x S x d], got " + shape_str(x.shape()));
  Tensor h = ops::layer_norm(x, layer.ln1_gamma, layer.ln1_beta);
  Tensor q = hooks.lora_q ? lora_qv_forward(h, layer.wq, layer.bq, *hooks.lora_q)
                          : ops::linear(h, layer.wq, layer.bq);
  Tensor k = ops::linear(h, layer.wk, layer.bk);
  Tensor v = hooks.lora_v ? lora_qv_forward(h, layer.wv, layer.bv, *hooks.lora_v)
                          : ops::linear(h, layer.wv, layer.bv);
  if (hooks.prefix) {
    PrefixKV kv = prefix_kv(k, v, *hooks.prefix, layer.wk, layer.wv);
    k = kv.k;
    v = kv.v;
  }
  Tensor probs;
  Tensor attn = ops::attention(q, k, v, heads, trace ? &probs : nullptr);
  Tensor x_hat = ops::add(x, ops::linear(attn, layer.wo, layer.bo));
  if (hooks.mhsa_parallel) x_hat = ops::add(x_hat, adapter_forward(h, *hooks.mhsa_parallel, training));
  if (hooks.mhsa_sequential) x_hat = ops::add(x_hat, adapter_forward(x, *hooks.mhsa_sequential, training));

  Tensor h2 = ops::layer_norm(x_hat, layer.ln2_gamma, layer.ln2_beta);
  Tensor ff = ops::linear(ops::gelu(ops::linear(h2, layer.w_ff1, layer.b_ff1)), layer.w_ff2, layer.b_ff2);
  Tensor out = ops::add(x_hat, ff);
  if (hooks.ff_parallel) out = ops::add(out, adapter_forward(h2, *hooks.ff_parallel, training));
  if (hooks.ff_sequential) out = ops::add(out, adapter_forward(x_hat, *hooks.ff_sequential, training));

  if (trace) *trace = {x, h, h2, k, probs, out};
  return out;
}

/// Linear classifier on the CLS representation: [B x d] -> [B x C].
inline Tensor classify(const Tensor& cls, const ClassifierHead& head) {
  return ops::linear(cls, head.weight, head.bias);
}

/// Removes every backbone parameter from the trainable set.
inline void freeze_all(ParamStore& store) {
  std::vector<std::string> ids(store.trainable_ids().begin(), store.trainable_ids().end());
  for (const auto& id : ids)
    if (param_owner(id) == ParamOwner::Backbone) store.set_trainable(id, false);
}

}  // namespace petl
