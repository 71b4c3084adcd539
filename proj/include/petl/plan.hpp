#pragma once

#include <algorithm>
#include <cstddef>
#include <string>
#include <variant>
#include <vector>

#include "petl/config.hpp"
#include "petl/layout.hpp"

namespace petl {

/// Attachment points inside one encoder layer.
enum class Site {
  LoraQ,           // low-rank update of the query projection
  LoraV,           // low-rank update of the value projection
  KvPrefix,        // trainable prefix rows prepended to keys and values
  InputPrompts,    // prompt tokens entering the layer
  MhsaParallel,    // adapter on LN(x), added beside the attention branch
  MhsaSequential,  // adapter on the attention block input, added after it
  FfParallel,      // adapter on LN(x_hat), added beside the FF branch
  FfSequential,    // adapter on the FF block input, added after it
};

inline std::string site_name(Site s) {
  switch (s) {
    case Site::LoraQ: return "lora_q";
    case Site::LoraV: return "lora_v";
    case Site::KvPrefix: return "kv_prefix";
    case Site::InputPrompts: return "input_prompts";
    case Site::MhsaParallel: return "mhsa_parallel";
    case Site::MhsaSequential: return "mhsa_sequential";
    case Site::FfParallel: return "ff_parallel";
    case Site::FfSequential: return "ff_sequential";
  }
  return "?";
}

inline bool is_adapter_site(Site s) {
  return s == Site::MhsaParallel || s == Site::MhsaSequential || s == Site::FfParallel ||
         s == Site::FfSequential;
}

/// Where a method attaches, layer by layer, and which parameter groups it trains.
struct InjectionPlan {
  PetlMethod method;
  std::vector<std::vector<Site>> layers;
  bool train_backbone = false;    // full fine-tuning
  bool train_bias_terms = false;  // BitFit

  bool has(std::size_t layer, Site s) const {
    const auto& v = layers.at(layer);
    return std::find(v.begin(), v.end(), s) != v.end();
  }
  std::size_t adapter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += std::count_if(l.begin(), l.end(), is_adapter_site);
    return n;
  }
  /// Prompt tokens carried through the sequence (0 when the method has none).
  std::size_t prompt_tokens() const {
    if (const auto* s = std::get_if<method::PromptShallow>(&method)) return s->p;
    if (const auto* s = std::get_if<method::PromptDeep>(&method)) return s->p;
    return 0;
  }
};

inline InjectionPlan build_plan(const PetlMethod& m, const BackboneConfig& cfg) {
  cfg.validate();
  validate(m);
  InjectionPlan plan;
  plan.method = m;
  plan.layers.assign(cfg.layers, {});
  auto adapter_sites = [&](AdapterConfig c, AdapterMode mode) {
    const bool par = mode == AdapterMode::Parallel;
    for (auto& l : plan.layers) {
      if (c == AdapterConfig::Pfeiffer) {
        // Pfeiffer: one adapter per layer. Parallel sits beside the MHSA block;
        // the sequential variant sits after the FF block.
        l.push_back(par ? Site::MhsaParallel : Site::FfSequential);
      } else {
        l.push_back(par ? Site::MhsaParallel : Site::MhsaSequential);
        l.push_back(par ? Site::FfParallel : Site::FfSequential);
      }
    }
  };
  std::visit(
      [&](const auto& v) {
        using T = std::decay_t<decltype(v)>;
        if constexpr (std::is_same_v<T, method::FullFineTune>) {
          plan.train_backbone = true;
        } else if constexpr (std::is_same_v<T, method::BitFit>) {
          plan.train_bias_terms = true;
        } else if constexpr (std::is_same_v<T, method::Lora>) {
          for (auto& l : plan.layers) {
            if (v.target_q) l.push_back(Site::LoraQ);
            if (v.target_v) l.push_back(Site::LoraV);
          }
        } else if constexpr (std::is_same_v<T, method::PromptShallow>) {
          plan.layers.front().push_back(Site::InputPrompts);
        } else if constexpr (std::is_same_v<T, method::PromptDeep>) {
          for (auto& l : plan.layers) l.push_back(Site::InputPrompts);
        } else if constexpr (std::is_same_v<T, method::Prefix>) {
          for (auto& l : plan.layers) l.push_back(Site::KvPrefix);
        } else if constexpr (std::is_same_v<T, method::Bottleneck>) {
          adapter_sites(v.config, v.mode);
        } else if constexpr (std::is_same_v<T, method::Conformer>) {
          adapter_sites(v.config, v.mode);
        }
      },
      m);
  return plan;
}

namespace detail {

inline void bottleneck_specs(std::vector<ParamSpec>& out, const std::string& p, std::size_t d,
                             std::size_t r) {
  out.push_back({p + "ln.gamma", {d}, InitSpec::ones()});
  out.push_back({p + "ln.beta", {d}, InitSpec::zeros()});
  out.push_back({p + "down.weight", {d, r}, InitSpec::fan_in(d)});
  out.push_back({p + "down.bias", {r}, InitSpec::zeros()});
  out.push_back({p + "up.weight", {r, d}, InitSpec::zeros()});
  out.push_back({p + "up.bias", {d}, InitSpec::zeros()});
}

inline void conformer_specs(std::vector<ParamSpec>& out, const std::string& p, std::size_t d,
                            std::size_t r, std::size_t k) {
  out.push_back({p + "ln.gamma", {d}, InitSpec::ones()});
  out.push_back({p + "ln.beta", {d}, InitSpec::zeros()});
  out.push_back({p + "pw1.weight", {d, 2 * r}, InitSpec::fan_in(d)});
  out.push_back({p + "pw1.bias", {2 * r}, InitSpec::zeros()});
  out.push_back({p + "dw.weight", {r, k}, InitSpec::fan_in(k)});
  out.push_back({p + "dw.bias", {r}, InitSpec::zeros()});
  out.push_back({p + "bn.gamma", {r}, InitSpec::ones()});
  out.push_back({p + "bn.beta", {r}, InitSpec::zeros()});
  out.push_back({p + "bn.running_mean", {r}, InitSpec::zeros(), true});
  out.push_back({p + "bn.running_var", {r}, InitSpec::ones(), true});
  out.push_back({p + "pw2.weight", {r, d}, InitSpec::zeros()});
  out.push_back({p + "pw2.bias", {d}, InitSpec::zeros()});
}

}  // namespace detail

inline std::string adapter_prefix(std::size_t layer, Site s) {
  return layer_prefix(layer) + "adapter." + site_name(s) + ".";
}

/// Parameters (and buffers) introduced by the plan's PETL modules, in
/// deterministic order.
inline std::vector<ParamSpec> method_layout(const InjectionPlan& plan, const BackboneConfig& cfg) {
  const std::size_t d = cfg.d;
  std::vector<ParamSpec> out;
  for (std::size_t i = 0; i < plan.layers.size(); ++i) {
    const std::string lp = layer_prefix(i);
    for (Site s : plan.layers[i]) {
      std::visit(
          [&](const auto& v) {
            using T = std::decay_t<decltype(v)>;
            if constexpr (std::is_same_v<T, method::Lora>) {
              const char* tag = s == Site::LoraQ ? "q" : "v";
              out.push_back({lp + "mhsa.lora.A_" + tag, {d, v.r}, InitSpec::normal(0.02)});
              out.push_back({lp + "mhsa.lora.B_" + tag, {v.r, d}, InitSpec::zeros()});
            } else if constexpr (std::is_same_v<T, method::PromptShallow>) {
              out.push_back({"prompt.shallow", {v.p, d}, InitSpec::normal(0.02)});
            } else if constexpr (std::is_same_v<T, method::PromptDeep>) {
              out.push_back({lp + "prompt", {v.p, d}, InitSpec::normal(0.02)});
            } else if constexpr (std::is_same_v<T, method::Prefix>) {
              out.push_back({lp + "mhsa.prefix", {v.p, d}, InitSpec::normal(0.02)});
            } else if constexpr (std::is_same_v<T, method::Bottleneck>) {
              detail::bottleneck_specs(out, adapter_prefix(i, s), d, v.r);
            } else if constexpr (std::is_same_v<T, method::Conformer>) {
              detail::conformer_specs(out, adapter_prefix(i, s), d, v.r, v.k);
            }
          },
          plan.method);
    }
  }
  return out;
}

/// Trainable-mask rule: the head always; PETL module parameters always;
/// backbone parameters only under full fine-tuning, or their additive bias
/// terms under BitFit.
inline bool is_trainable_under(const InjectionPlan& plan, std::string_view id) {
  switch (param_owner(id)) {
    case ParamOwner::Head:
    case ParamOwner::Method:
      return true;
    case ParamOwner::Backbone:
      return plan.train_backbone || (plan.train_bias_terms && is_layer_bias_term(id));
  }
  return false;
}

}  // namespace petl
