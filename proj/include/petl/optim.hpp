#pragma once

#include <cmath>
#include <cstddef>
#include <map>
#include <numbers>
#include <string>
#include <vector>

#include "petl/layout.hpp"
#include "petl/tensor.hpp"

namespace petl::harness {

/// Cosine annealing from lr0 at t = 0 down to 0 at t = T.
inline double cosine_lr(std::size_t t, std::size_t total, double lr0) {
  if (total == 0) return lr0;
  const double frac = static_cast<double>(std::min(t, total)) / static_cast<double>(total);
  return lr0 * 0.5 * (1.0 + std::cos(std::numbers::pi * frac));
}

struct AdamWConfig {
  double weight_decay = 0.1;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// AdamW with decoupled weight decay. Decay skips biases, norm affine terms
/// and prompt/prefix embeddings. Trainable tensors without a gradient this
/// step are left untouched.
class AdamW {
 public:
  explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

  void step(ParamStore& store, double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (const auto& id : store.trainable_ids()) {
      Tensor& p = store.at(id);
      if (!p.has_grad()) continue;
      auto& st = state_[id];
      if (st.m.empty()) {
        st.m.assign(p.numel(), 0.0);
        st.v.assign(p.numel(), 0.0);
      }
      const bool decay = cfg_.weight_decay != 0.0 && !is_decay_exempt(id);
      auto w = p.data();
      auto g = p.grad();
      for (std::size_t i = 0; i < w.size(); ++i) {
        if (decay) w[i] *= 1.0 - lr * cfg_.weight_decay;
        st.m[i] = cfg_.beta1 * st.m[i] + (1.0 - cfg_.beta1) * g[i];
        st.v[i] = cfg_.beta2 * st.v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
        const double mhat = st.m[i] / bc1, vhat = st.v[i] / bc2;
        w[i] -= lr * mhat / (std::sqrt(vhat) + cfg_.eps);
      }
    }
  }

  std::size_t steps() const { return t_; }

 private:
  struct Moments {
    std::vector<double> m, v;
  };
  AdamWConfig cfg_;
  std::size_t t_ = 0;
  std::map<std::string, Moments> state_;
};

}  // namespace petl::harness
