#pragma once

#include <cmath>
#include <cstddef>
#include <cstdio>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"
#include "petl/layout.hpp"
#include "petl/plan.hpp"

namespace petl::accounting {

/// Trainable-parameter census of one method on one backbone. Head parameters
/// are kept out of `trainable_params`, `per_module` and `closed_form`.
struct ParamReport {
  PetlMethod method;
  std::size_t total_params = 0;     // backbone + method + head
  std::size_t backbone_params = 0;  // denominator for percent_of_full
  std::size_t trainable_params = 0;
  std::size_t head_params = 0;
  std::map<std::string, std::size_t> per_module;
  std::size_t closed_form = 0;
  double percent_of_full = 0.0;
  std::string note;
};

/// Grouping key for the per-module breakdown: the owning module path of an id.
inline std::string module_key(const std::string& id) {
  for (const char* marker : {".adapter.", ".lora."}) {
    if (auto pos = id.find(marker); pos != std::string::npos) {
      auto end = id.find('.', pos + std::string(marker).size());
      if (std::string(marker) == ".lora.") return id.substr(0, pos + 5);
      return id.substr(0, end);
    }
  }
  if (ends_with(id, ".prefix") || ends_with(id, ".prompt") || id == "prompt.shallow") return id;
  if (starts_with(id, "layer.")) return id.substr(0, id.find('.', 6));
  return id.substr(0, id.find('.'));
}

/// Closed-form trainable count (head excluded), derived by hand from the
/// module definitions and independent of any enumeration.
inline std::size_t closed_form(const PetlMethod& m, const BackboneConfig& cfg) {
  const std::size_t d = cfg.d, L = cfg.layers, ff = cfg.ff_dim();
  return std::visit(
      [&](const auto& v) -> std::size_t {
        using T = std::decay_t<decltype(v)>;
        if constexpr (std::is_same_v<T, method::FullFineTune>) {
          const std::size_t per_layer = 4 * (d * d + d) + 2 * d * ff + ff + d + 4 * d;
          return cfg.patch.patch_dim() * d + d + d + cfg.seq_len() * d + L * per_layer + 2 * d;
        } else if constexpr (std::is_same_v<T, method::LinearProbe>) {
          return 0;
        } else if constexpr (std::is_same_v<T, method::BitFit>) {
          return L * (4 * d + ff + d + 2 * d);
        } else if constexpr (std::is_same_v<T, method::Lora>) {
          const std::size_t targets = (v.target_q ? 1 : 0) + (v.target_v ? 1 : 0);
          return L * targets * 2 * d * v.r;
        } else if constexpr (std::is_same_v<T, method::PromptShallow>) {
          return v.p * d;
        } else if constexpr (std::is_same_v<T, method::PromptDeep> ||
                             std::is_same_v<T, method::Prefix>) {
          return L * v.p * d;
        } else if constexpr (std::is_same_v<T, method::Bottleneck>) {
          const std::size_t sites = v.config == AdapterConfig::Pfeiffer ? 1 : 2;
          return sites * L * (2 * d * v.r + v.r + 3 * d);
        } else {
          const std::size_t sites = v.config == AdapterConfig::Pfeiffer ? 1 : 2;
          return sites * L * (3 * d + 3 * d * v.r + v.r * (v.k + 5));
        }
      },
      m);
}

inline std::string sig2(double x) {
  if (x == 0.0) return "0";
  const int digits = static_cast<int>(std::floor(std::log10(std::fabs(x))));
  const int decimals = std::max(0, 1 - digits);
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", decimals, x);
  return buf;
}

/// trainable / full as a percentage.
inline double percent_of_full(const ParamReport& r, std::size_t full_total) {
  if (full_total == 0) throw ConfigError("percent_of_full: full model has zero parameters");
  return 100.0 * static_cast<double>(r.trainable_params) / static_cast<double>(full_total);
}

namespace detail {

inline void finalize(ParamReport& r, const BackboneConfig& cfg) {
  r.closed_form = closed_form(r.method, cfg);
  r.percent_of_full = percent_of_full(r, r.backbone_params);
  if (const auto* c = std::get_if<method::Conformer>(&r.method)) {
    if (c->config == AdapterConfig::Pfeiffer && c->r == 8 && c->k == 31 && cfg.d == 768 &&
        cfg.layers == 12)
      r.note = "reference budget of 271K for this configuration is approximate and not "
               "reconstructed; the count above is exact for this layout";
  }
}

}  // namespace detail

/// Census by enumerating the layout a Model would allocate. Needs no tensor
/// storage, so it works at full scale.
inline ParamReport count_trainable(const InjectionPlan& plan, const BackboneConfig& cfg) {
  ParamReport r;
  r.method = plan.method;
  auto visit = [&](const std::vector<ParamSpec>& specs) {
    for (const auto& s : specs) {
      if (s.buffer) continue;
      r.total_params += s.numel();
      const auto owner = param_owner(s.id);
      if (owner == ParamOwner::Backbone) r.backbone_params += s.numel();
      if (!is_trainable_under(plan, s.id)) continue;
      if (owner == ParamOwner::Head) {
        r.head_params += s.numel();
        continue;
      }
      r.trainable_params += s.numel();
      r.per_module[module_key(s.id)] += s.numel();
    }
  };
  visit(backbone_layout(cfg));
  visit(method_layout(plan, cfg));
  visit(head_layout(cfg));
  detail::finalize(r, cfg);
  return r;
}

/// Census by enumerating an allocated store's trainable mask.
inline ParamReport count_trainable(const ParamStore& store, const InjectionPlan& plan,
                                   const BackboneConfig& cfg) {
  ParamReport r;
  r.method = plan.method;
  for (const auto& [id, t] : store.entries()) {
    r.total_params += t.numel();
    if (param_owner(id) == ParamOwner::Backbone) r.backbone_params += t.numel();
  }
  for (const auto& id : store.trainable_ids()) {
    const std::size_t n = store.at(id).numel();
    if (param_owner(id) == ParamOwner::Head) {
      r.head_params += n;
      continue;
    }
    r.trainable_params += n;
    r.per_module[module_key(id)] += n;
  }
  detail::finalize(r, cfg);
  return r;
}

/// Backbone parameter count (head excluded) of a configuration.
inline std::size_t backbone_total(const BackboneConfig& cfg) {
  std::size_t n = 0;
  for (const auto& s : backbone_layout(cfg)) n += s.numel();
  return n;
}

/// Returns `m` with its budget hyperparameter (r for LoRA/adapters, p for
/// prompts/prefix) replaced by `h`.
inline PetlMethod with_hyperparameter(PetlMethod m, std::size_t h) {
  std::visit(
      [&](auto& v) {
        if constexpr (requires { v.r; })
          v.r = h;
        else if constexpr (requires { v.p; })
          v.p = h;
        else
          throw ConfigError("method " + method_name(PetlMethod{v}) +
                            " has no budget hyperparameter");
      },
      m);
  return m;
}

inline std::size_t hyperparameter_of(const PetlMethod& m) {
  return std::visit(
      [](const auto& v) -> std::size_t {
        if constexpr (requires { v.r; })
          return v.r;
        else if constexpr (requires { v.p; })
          return v.p;
        else
          return 0;
      },
      m);
}

/// Largest r (or p) whose closed-form count does not exceed `target`. Ranks
/// are capped at d; prompt/prefix lengths at `max_tokens`.
inline std::size_t solve_budget(const PetlMethod& family, std::size_t target,
                                const BackboneConfig& cfg, std::size_t max_tokens = 1u << 20) {
  const bool is_rank = std::visit([](const auto& v) { return requires { v.r; }; }, family);
  const std::size_t hi_cap = is_rank ? cfg.d : max_tokens;
  auto cost = [&](std::size_t h) { return closed_form(with_hyperparameter(family, h), cfg); };
  if (cost(1) > target)
    throw ConfigError("budget " + std::to_string(target) + " is below the minimum " +
                      std::to_string(cost(1)) + " for " + method_name(family));
  std::size_t lo = 1, hi = hi_cap;
  if (cost(hi) <= target) return hi;
  while (hi - lo > 1) {
    const std::size_t mid = lo + (hi - lo) / 2;
    (cost(mid) <= target ? lo : hi) = mid;
  }
  return lo;
}

inline nlohmann::json to_json(const ParamReport& r) {
  nlohmann::json j;
  j["method"] = method_name(r.method);
  j["config"] = describe(r.method);
  j["trainable_params"] = r.trainable_params;
  j["head_params"] = r.head_params;
  j["closed_form"] = r.closed_form;
  j["backbone_params"] = r.backbone_params;
  j["total_params"] = r.total_params;
  j["percent_of_full"] = sig2(r.percent_of_full);
  j["per_module"] = r.per_module;
  if (!r.note.empty()) j["note"] = r.note;
  return j;
}

inline std::string with_commas(std::size_t n) {
  std::string s = std::to_string(n);
  for (int i = static_cast<int>(s.size()) - 3; i > 0; i -= 3) s.insert(static_cast<std::size_t>(i), ",");
  return s;
}

inline void print_table(std::ostream& os, const ParamReport& r, bool per_module = false) {
  os << "method            " << describe(r.method) << '\n'
     << "trainable         " << with_commas(r.trainable_params) << '\n'
     << "closed form       " << with_commas(r.closed_form)
     << (r.closed_form == r.trainable_params ? "  (match)" : "  (MISMATCH)") << '\n'
     << "head (separate)   " << with_commas(r.head_params) << '\n'
     << "backbone total    " << with_commas(r.backbone_params) << '\n'
     << "percent of full   " << sig2(r.percent_of_full) << "%\n";
  if (!r.note.empty()) os << "note              " << r.note << '\n';
  if (per_module)
    for (const auto& [k, n] : r.per_module) os << "  " << k << "  " << with_commas(n) << '\n';
}

}  // namespace petl::accounting
