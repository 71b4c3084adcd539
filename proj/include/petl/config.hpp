#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <type_traits>
#include <variant>

#include "petl/tensor.hpp"

namespace petl {

struct PatchGrid {
  std::size_t freq_bins = 32;
  std::size_t time_bins = 32;
  std::size_t patch_h = 8;
  std::size_t patch_w = 8;

  std::size_t n_patches() const { return (freq_bins / patch_h) * (time_bins / patch_w); }
  std::size_t patch_dim() const { return patch_h * patch_w; }
};

/// Dimensions of the frozen encoder.
struct BackboneConfig {
  std::size_t d = 64;
  std::size_t layers = 4;
  std::size_t heads = 4;
  std::size_t ff_ratio = 4;
  PatchGrid patch;
  std::size_t n_classes = 10;
  std::uint64_t seed = 0;

  std::size_t ff_dim() const { return ff_ratio * d; }
  std::size_t seq_len() const { return patch.n_patches() + 1; }

  void validate() const {
    if (d == 0 || heads == 0 || d % heads != 0)
      throw ConfigError("backbone: d=" + std::to_string(d) + " must be divisible by heads=" +
                        std::to_string(heads));
    if (layers < 1) throw ConfigError("backbone: need at least one layer");
    if (ff_ratio < 1) throw ConfigError("backbone: ff_ratio must be >= 1");
    if (patch.patch_h == 0 || patch.patch_w == 0 || patch.freq_bins % patch.patch_h != 0 ||
        patch.time_bins % patch.patch_w != 0 || patch.n_patches() == 0)
      throw ConfigError("backbone: patch grid does not divide the spectrogram extents");
    if (n_classes < 1) throw ConfigError("backbone: need at least one class");
  }

  /// Desk-scale default used for training.
  static BackboneConfig desk() { return {}; }

  /// 768/12/12 encoder over 128x640 spectrograms with 16x16 patches (320
  /// patches). Used for parameter audits only; its backbone holds 85,500,672
  /// parameters excluding the head.
  static BackboneConfig full_scale(std::size_t n_classes = 50) {
    BackboneConfig c;
    c.d = 768;
    c.layers = 12;
    c.heads = 12;
    c.ff_ratio = 4;
    c.patch = {128, 640, 16, 16};
    c.n_classes = n_classes;
    return c;
  }
};

enum class AdapterConfig { Pfeiffer, Houlsby };
enum class AdapterMode { Parallel, Sequential };

namespace method {

struct FullFineTune {};
struct LinearProbe {};
struct BitFit {};

struct Lora {
  std::size_t r = 6;
  double alpha = 16.0;  // recorded only; the applied scale is `s`
  double s = 8.0;
  bool target_q = true;
  bool target_v = true;
};

struct PromptShallow {
  std::size_t p = 300;
};

struct PromptDeep {
  std::size_t p = 25;
};

struct Prefix {
  std::size_t p = 24;
};

struct Bottleneck {
  std::size_t r = 12;
  AdapterConfig config = AdapterConfig::Pfeiffer;
  AdapterMode mode = AdapterMode::Parallel;
};

struct Conformer {
  std::size_t r = 8;
  std::size_t k = 31;
  AdapterConfig config = AdapterConfig::Pfeiffer;
  AdapterMode mode = AdapterMode::Parallel;
};

}  // namespace method

using PetlMethod =
    std::variant<method::FullFineTune, method::LinearProbe, method::BitFit, method::Lora,
                 method::PromptShallow, method::PromptDeep, method::Prefix, method::Bottleneck,
                 method::Conformer>;

inline std::string method_name(const PetlMethod& m) {
  return std::visit(
      [](const auto& v) -> std::string {
        using T = std::decay_t<decltype(v)>;
        if constexpr (std::is_same_v<T, method::FullFineTune>) return "full";
        else if constexpr (std::is_same_v<T, method::LinearProbe>) return "linear";
        else if constexpr (std::is_same_v<T, method::BitFit>) return "bitfit";
        else if constexpr (std::is_same_v<T, method::Lora>) return "lora";
        else if constexpr (std::is_same_v<T, method::PromptShallow>) return "spt";
        else if constexpr (std::is_same_v<T, method::PromptDeep>) return "dpt";
        else if constexpr (std::is_same_v<T, method::Prefix>) return "prefix";
        else if constexpr (std::is_same_v<T, method::Bottleneck>) return "bottleneck";
        else return "conformer";
      },
      m);
}

inline std::string to_string(AdapterConfig c) {
  return c == AdapterConfig::Pfeiffer ? "pfeiffer" : "houlsby";
}
inline std::string to_string(AdapterMode m) {
  return m == AdapterMode::Parallel ? "parallel" : "sequential";
}

/// Human-readable label including hyperparameters, e.g. "conformer(r=8,k=31,pfeiffer,parallel)".
inline std::string describe(const PetlMethod& m) {
  return std::visit(
      [&](const auto& v) -> std::string {
        using T = std::decay_t<decltype(v)>;
        const std::string name = method_name(m);
        if constexpr (std::is_same_v<T, method::Lora>)
          return name + "(r=" + std::to_string(v.r) + ",s=" + std::to_string(v.s) + ")";
        else if constexpr (std::is_same_v<T, method::PromptShallow> ||
                           std::is_same_v<T, method::PromptDeep> ||
                           std::is_same_v<T, method::Prefix>)
          return name + "(p=" + std::to_string(v.p) + ")";
        else if constexpr (std::is_same_v<T, method::Bottleneck>)
          return name + "(r=" + std::to_string(v.r) + "," + to_string(v.config) + "," +
                 to_string(v.mode) + ")";
        else if constexpr (std::is_same_v<T, method::Conformer>)
          return name + "(r=" + std::to_string(v.r) + ",k=" + std::to_string(v.k) + "," +
                 to_string(v.config) + "," + to_string(v.mode) + ")";
        else
          return name;
      },
      m);
}

/// Checks the hyperparameter invariants: r >= 1, p >= 1, k >= 1, s > 0.
inline void validate(const PetlMethod& m) {
  std::visit(
      [](const auto& v) {
        using T = std::decay_t<decltype(v)>;
        if constexpr (std::is_same_v<T, method::Lora>) {
          if (v.r < 1) throw ConfigError("lora: r must be >= 1");
          if (!(v.s > 0.0)) throw ConfigError("lora: s must be > 0");
          if (!v.target_q && !v.target_v) throw ConfigError("lora: no target projection");
        } else if constexpr (std::is_same_v<T, method::PromptShallow> ||
                             std::is_same_v<T, method::PromptDeep> ||
                             std::is_same_v<T, method::Prefix>) {
          if (v.p < 1) throw ConfigError("prompt/prefix: p must be >= 1");
        } else if constexpr (std::is_same_v<T, method::Bottleneck>) {
          if (v.r < 1) throw ConfigError("bottleneck: r must be >= 1");
        } else if constexpr (std::is_same_v<T, method::Conformer>) {
          if (v.r < 1) throw ConfigError("conformer: r must be >= 1");
          if (v.k < 1) throw ConfigError("conformer: k must be >= 1");
          if (v.mode == AdapterMode::Sequential)
            throw ConfigError("conformer adapter supports parallel placement only");
        }
      },
      m);
}

}  // namespace petl
