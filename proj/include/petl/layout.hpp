#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

#include "petl/config.hpp"
#include "petl/tensor.hpp"

namespace petl {

struct InitSpec {
  enum class Kind { Zeros, Ones, Normal };
  Kind kind = Kind::Zeros;
  double std = 0.0;

  static InitSpec zeros() { return {Kind::Zeros, 0.0}; }
  static InitSpec ones() { return {Kind::Ones, 0.0}; }
  static InitSpec normal(double s) { return {Kind::Normal, s}; }
  static InitSpec fan_in(std::size_t n) { return normal(1.0 / std::sqrt(static_cast<double>(n))); }
};

/// One named tensor of a model: its id, shape and initializer. Buffers hold
/// state (batch-norm running statistics) and are never counted as parameters.
struct ParamSpec {
  std::string id;
  Shape shape;
  InitSpec init;
  bool buffer = false;

  std::size_t numel() const { return numel_of(shape); }
};

enum class ParamOwner { Backbone, Head, Method };

inline bool ends_with(std::string_view s, std::string_view suffix) {
  return s.size() >= suffix.size() && s.substr(s.size() - suffix.size()) == suffix;
}
inline bool starts_with(std::string_view s, std::string_view prefix) {
  return s.substr(0, prefix.size()) == prefix;
}

/// Ownership is encoded in the id: "head.*" is the classifier, ids carrying a
/// ".lora.", ".adapter.", "prompt" or ".prefix" segment belong to a PETL module,
/// everything else is backbone.
inline ParamOwner param_owner(std::string_view id) {
  if (starts_with(id, "head.")) return ParamOwner::Head;
  if (id.find(".lora.") != std::string_view::npos || id.find(".adapter.") != std::string_view::npos ||
      id.find("prompt") != std::string_view::npos || id.find(".prefix") != std::string_view::npos)
    return ParamOwner::Method;
  return ParamOwner::Backbone;
}

/// Additive-bias parameters of the encoder layer stack (projection and FF
/// biases, layer-norm shifts).
inline bool is_layer_bias_term(std::string_view id) {
  return param_owner(id) == ParamOwner::Backbone && starts_with(id, "layer.") &&
         (ends_with(id, ".bias") || ends_with(id, ".beta"));
}

/// Parameters excluded from decoupled weight decay.
inline bool is_decay_exempt(std::string_view id) {
  return ends_with(id, ".bias") || ends_with(id, ".beta") || ends_with(id, ".gamma") ||
         id.find("prompt") != std::string_view::npos || id.find(".prefix") != std::string_view::npos;
}

inline std::string layer_prefix(std::size_t i) { return "layer." + std::to_string(i) + "."; }

inline std::vector<ParamSpec> backbone_layout(const BackboneConfig& cfg) {
  cfg.validate();
  const std::size_t d = cfg.d, ff = cfg.ff_dim(), pp = cfg.patch.patch_dim();
  std::vector<ParamSpec> out;
  out.push_back({"embed.patch.weight", {pp, d}, InitSpec::fan_in(pp)});
  out.push_back({"embed.patch.bias", {d}, InitSpec::zeros()});
  out.push_back({"embed.cls", {1, d}, InitSpec::normal(0.02)});
  out.push_back({"embed.pos", {cfg.seq_len(), d}, InitSpec::normal(0.02)});
  for (std::size_t i = 0; i < cfg.layers; ++i) {
    const std::string p = layer_prefix(i);
    out.push_back({p + "ln1.gamma", {d}, InitSpec::ones()});
    out.push_back({p + "ln1.beta", {d}, InitSpec::zeros()});
    for (const char* proj : {"q", "k", "v", "o"}) {
      out.push_back({p + "mhsa." + proj + ".weight", {d, d}, InitSpec::fan_in(d)});
      out.push_back({p + "mhsa." + proj + ".bias", {d}, InitSpec::zeros()});
    }
    out.push_back({p + "ln2.gamma", {d}, InitSpec::ones()});
    out.push_back({p + "ln2.beta", {d}, InitSpec::zeros()});
    out.push_back({p + "ff.fc1.weight", {d, ff}, InitSpec::fan_in(d)});
    out.push_back({p + "ff.fc1.bias", {ff}, InitSpec::zeros()});
    out.push_back({p + "ff.fc2.weight", {ff, d}, InitSpec::fan_in(ff)});
    out.push_back({p + "ff.fc2.bias", {d}, InitSpec::zeros()});
  }
  out.push_back({"final_ln.gamma", {d}, InitSpec::ones()});
  out.push_back({"final_ln.beta", {d}, InitSpec::zeros()});
  return out;
}

inline std::vector<ParamSpec> head_layout(const BackboneConfig& cfg) {
  return {{"head.weight", {cfg.d, cfg.n_classes}, InitSpec::fan_in(cfg.d)},
          {"head.bias", {cfg.n_classes}, InitSpec::zeros()}};
}

}  // namespace petl
