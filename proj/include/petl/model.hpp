#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "petl/backbone.hpp"
#include "petl/plan.hpp"

namespace petl {

namespace detail {

inline std::uint64_t fnv1a(std::string_view s, std::uint64_t h = 1469598103934665603ull) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

inline Tensor materialize(const ParamSpec& spec, std::uint64_t seed) {
  switch (spec.init.kind) {
    case InitSpec::Kind::Zeros: return Tensor::zeros(spec.shape);
    case InitSpec::Kind::Ones: return Tensor::full(spec.shape, 1.0);
    case InitSpec::Kind::Normal: break;
  }
  // Seeded per id so a tensor's initial value does not depend on what else
  // the model contains.
  std::mt19937_64 rng(splitmix64(seed ^ fnv1a(spec.id)));
  std::normal_distribution<double> dist(0.0, spec.init.std);
  std::vector<double> v(spec.numel());
  for (double& x : v) x = dist(rng);
  return Tensor::from(spec.shape, std::move(v));
}

}  // namespace detail

/// Marks every additive bias of the encoder layer stack trainable, plus the head.
inline void apply_bitfit_mask(ParamStore& store) {
  std::vector<std::string> ids;
  for (const auto& [id, t] : store.entries())
    if (is_layer_bias_term(id) || param_owner(id) == ParamOwner::Head) ids.push_back(id);
  for (const auto& id : ids) store.set_trainable(id, true);
}

/// Byte hash over (id, values) of every non-trainable parameter.
inline std::uint64_t frozen_hash(const ParamStore& store) {
  std::uint64_t h = 1469598103934665603ull;
  for (const auto& [id, t] : store.entries()) {
    if (store.is_trainable(id)) continue;
    h = detail::fnv1a(id, h);
    auto d = t.data();
    h = detail::fnv1a(std::string_view(reinterpret_cast<const char*>(d.data()), d.size_bytes()), h);
  }
  return h;
}

/// Encoder + head + the PETL modules of one method, all parameters in one store.
class Model {
 public:
  Model(const BackboneConfig& cfg, const PetlMethod& method, std::uint64_t seed)
      : cfg_(cfg), plan_(build_plan(method, cfg)) {
    for (const auto& spec : backbone_layout(cfg_)) store_.add(spec.id, detail::materialize(spec, seed));
    for (const auto& spec : method_layout(plan_, cfg_)) {
      Tensor t = detail::materialize(spec, seed);
      if (spec.buffer)
        store_.add_buffer(spec.id, t);
      else
        store_.add(spec.id, t);
    }
    for (const auto& spec : head_layout(cfg_)) store_.add(spec.id, detail::materialize(spec, seed));
    bind();
    apply_mask();
  }

  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;
  Model(Model&&) = default;
  Model& operator=(Model&&) = default;

  const BackboneConfig& config() const { return cfg_; }
  const InjectionPlan& plan() const { return plan_; }
  ParamStore& params() { return store_; }
  const ParamStore& params() const { return store_; }

  /// Resets the trainable set to exactly what the plan prescribes.
  void apply_mask() {
    store_.freeze_everything();
    if (plan_.train_bias_terms) apply_bitfit_mask(store_);
    for (const auto& [id, t] : store_.entries())
      if (is_trainable_under(plan_, id)) store_.set_trainable(id, true);
  }

  /// Copies backbone tensors from `records`; ids not owned by the backbone are ignored.
  void load_backbone(const std::map<std::string, Tensor>& records) {
    for (auto& [id, t] : store_.entries()) {
      if (param_owner(id) != ParamOwner::Backbone) continue;
      auto it = records.find(id);
      if (it == records.end()) throw ConfigError("backbone checkpoint lacks " + id);
      if (it->second.shape() != t.shape())
        throw DimensionError("backbone checkpoint shape mismatch for " + id + ": " +
                             shape_str(it->second.shape()) + " vs " + shape_str(t.shape()));
      std::copy(it->second.data().begin(), it->second.data().end(), t.data().begin());
    }
  }

  /// Copies any matching parameter or buffer values from `records`.
  void load_matching(const std::map<std::string, Tensor>& records) {
    auto copy_into = [](Tensor& dst, const Tensor& src, const std::string& id) {
      if (src.shape() != dst.shape()) throw DimensionError("shape mismatch for " + id);
      std::copy(src.data().begin(), src.data().end(), dst.data().begin());
    };
    for (auto& [id, t] : store_.entries())
      if (auto it = records.find(id); it != records.end()) copy_into(t, it->second, id);
    for (auto& [id, t] : store_.buffers())
      if (auto it = records.find(id); it != records.end()) copy_into(t, it->second, id);
  }

  /// [B x F x T] -> CLS representation [B x d]. `trace`, when given, receives
  /// one entry per layer.
  Tensor encode(const Tensor& x, bool training, std::vector<LayerTrace>* trace = nullptr) {
    Tensor seq = patch_embed(x, embed_, cfg_);
    if (shallow_prompts_) seq = attach_prompts_shallow(seq, shallow_prompts_);
    if (trace) trace->assign(cfg_.layers, {});
    for (std::size_t i = 0; i < cfg_.layers; ++i) {
      LayerModules& m = modules_[i];
      if (m.deep_prompts) seq = attach_prompts_deep(seq, m.deep_prompts, i);
      LayerHooks hooks;
      if (m.lora_q) hooks.lora_q = &*m.lora_q;
      if (m.lora_v) hooks.lora_v = &*m.lora_v;
      if (m.prefix) hooks.prefix = &m.prefix;
      hooks.mhsa_parallel = m.adapter(Site::MhsaParallel);
      hooks.mhsa_sequential = m.adapter(Site::MhsaSequential);
      hooks.ff_parallel = m.adapter(Site::FfParallel);
      hooks.ff_sequential = m.adapter(Site::FfSequential);
      seq = layer_forward(seq, layers_[i], hooks, cfg_.heads, training,
                          trace ? &(*trace)[i] : nullptr);
    }
    seq = ops::layer_norm(seq, final_gamma_, final_beta_);
    return ops::reshape(ops::slice_seq(seq, 0, 1), {seq.dim(0), cfg_.d});
  }

  Tensor logits(const Tensor& x, bool training, std::vector<LayerTrace>* trace = nullptr) {
    return classify(encode(x, training, trace), head_);
  }

 private:
  struct LayerModules {
    std::optional<LoraState> lora_q, lora_v;
    Tensor prefix;
    Tensor deep_prompts;
    std::map<Site, AdapterState> adapters;

    AdapterState* adapter(Site s) {
      auto it = adapters.find(s);
      return it == adapters.end() ? nullptr : &it->second;
    }
  };

  void bind() {
    embed_ = PatchEmbedding::bind(store_);
    head_ = ClassifierHead::bind(store_);
    final_gamma_ = store_.at("final_ln.gamma");
    final_beta_ = store_.at("final_ln.beta");
    layers_.clear();
    modules_.assign(cfg_.layers, {});
    for (std::size_t i = 0; i < cfg_.layers; ++i) layers_.push_back(EncoderLayer::bind(store_, i));
    const double lora_s = std::holds_alternative<method::Lora>(plan_.method)
                              ? std::get<method::Lora>(plan_.method).s
                              : 0.0;
    for (std::size_t i = 0; i < cfg_.layers; ++i) {
      const std::string lp = layer_prefix(i);
      LayerModules& m = modules_[i];
      for (Site s : plan_.layers[i]) {
        switch (s) {
          case Site::LoraQ:
            m.lora_q = LoraState{store_.at(lp + "mhsa.lora.A_q"), store_.at(lp + "mhsa.lora.B_q"), lora_s};
            break;
          case Site::LoraV:
            m.lora_v = LoraState{store_.at(lp + "mhsa.lora.A_v"), store_.at(lp + "mhsa.lora.B_v"), lora_s};
            break;
          case Site::KvPrefix:
            m.prefix = store_.at(lp + "mhsa.prefix");
            break;
          case Site::InputPrompts:
            if (std::holds_alternative<method::PromptShallow>(plan_.method))
              shallow_prompts_ = store_.at("prompt.shallow");
            else
              m.deep_prompts = store_.at(lp + "prompt");
            break;
          default:
            m.adapters.emplace(s, bind_adapter(adapter_prefix(i, s)));
        }
      }
    }
  }

  AdapterState bind_adapter(const std::string& p) {
    if (std::holds_alternative<method::Bottleneck>(plan_.method))
      return BottleneckState{store_.at(p + "ln.gamma"),  store_.at(p + "ln.beta"),
                             store_.at(p + "down.weight"), store_.at(p + "down.bias"),
                             store_.at(p + "up.weight"),   store_.at(p + "up.bias")};
    ConformerAdapterState st;
    st.ln_gamma = store_.at(p + "ln.gamma");
    st.ln_beta = store_.at(p + "ln.beta");
    st.pw1_w = store_.at(p + "pw1.weight");
    st.pw1_b = store_.at(p + "pw1.bias");
    st.dw_w = store_.at(p + "dw.weight");
    st.dw_b = store_.at(p + "dw.bias");
    st.bn.gamma = store_.at(p + "bn.gamma");
    st.bn.beta = store_.at(p + "bn.beta");
    st.bn.running_mean = store_.buffer(p + "bn.running_mean");
    st.bn.running_var = store_.buffer(p + "bn.running_var");
    st.pw2_w = store_.at(p + "pw2.weight");
    st.pw2_b = store_.at(p + "pw2.bias");
    return st;
  }

  BackboneConfig cfg_;
  InjectionPlan plan_;
  ParamStore store_;
  PatchEmbedding embed_;
  ClassifierHead head_;
  Tensor final_gamma_, final_beta_;
  Tensor shallow_prompts_;
  std::vector<EncoderLayer> layers_;
  std::vector<LayerModules> modules_;
};

}  // namespace petl
