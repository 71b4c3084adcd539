#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <numeric>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "petl/checkpoint.hpp"
#include "petl/model.hpp"
#include "petl/optim.hpp"
#include "petl/synthetic.hpp"

namespace petl::harness {

struct TrainConfig {
  double lr = 0.005;
  double weight_decay = 0.1;
  std::size_t epochs = 30;
  std::size_t batch_size = 32;
  double beta1 = 0.9;
  double beta2 = 0.999;
  std::uint64_t seed = 0;
  bool record_wall_time = false;  // off keeps metrics byte-reproducible

  void validate() const {
    if (!(lr > 0)) throw ConfigError("train: lr must be > 0");
    if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
    if (weight_decay < 0) throw ConfigError("train: weight_decay must be >= 0");
  }
};

struct MetricsRecord {
  std::size_t epoch = 0;
  std::string split;
  double loss = 0.0;
  double accuracy = 0.0;
  double lr = 0.0;
  std::size_t trainable_params = 0;
  double wall_time = 0.0;
};

inline constexpr const char* kMetricsSchema = "# schema=petl-metrics/1";
inline constexpr const char* kMetricsHeader = "epoch,split,loss,accuracy,lr,trainable_params,wall_time";

inline void write_metrics_header(std::ostream& os) { os << kMetricsSchema << '\n' << kMetricsHeader << '\n'; }

inline void write_metrics_row(std::ostream& os, const MetricsRecord& r) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%zu,%s,%.12g,%.6f,%.9g,%zu,%.3f", r.epoch, r.split.c_str(),
                r.loss, r.accuracy, r.lr, r.trainable_params, r.wall_time);
  os << buf << '\n';
}

struct EvalResult {
  double loss = 0.0;
  double accuracy = 0.0;
};

inline Dataset batch_of(const Dataset& d, std::span<const std::size_t> idx) { return d.subset(idx); }

/// Mean loss and accuracy in eval mode without recording a tape.
inline EvalResult evaluate(Model& model, const Dataset& data, std::size_t batch_size = 64) {
  NoGradScope no_grad;
  EvalResult r;
  std::size_t correct = 0;
  std::vector<std::size_t> idx(data.size());
  std::iota(idx.begin(), idx.end(), 0);
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    const std::size_t n = std::min(batch_size, data.size() - start);
    Dataset b = data.subset(std::span(idx).subspan(start, n));
    Tensor logits = model.logits(b.x, false);
    r.loss += ops::cross_entropy(logits, b.y).item() * static_cast<double>(n);
    const std::size_t c = logits.dim(1);
    for (std::size_t i = 0; i < n; ++i) {
      auto row = logits.data().subspan(i * c, c);
      correct += static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin()) == b.y[i];
    }
  }
  r.loss /= static_cast<double>(data.size());
  r.accuracy = static_cast<double>(correct) / static_cast<double>(data.size());
  return r;
}

inline double grad_norm(const ParamStore& store) {
  double s = 0.0;
  for (const auto& id : store.trainable_ids()) {
    const Tensor& t = store.at(id);
    if (!t.has_grad()) continue;
    for (double g : t.grad()) s += g * g;
  }
  return std::sqrt(s);
}

struct TrainResult {
  std::vector<MetricsRecord> metrics;
  std::size_t best_epoch = 0;
  double best_val_accuracy = -1.0;
  EvalResult test;
  checkpoint::Records best_checkpoint;  // trainable parameters + PETL buffers
};

/// Trains the model's trainable parameters with AdamW and per-step cosine
/// annealing. Keeps the best-validation checkpoint, restores it and reports
/// test metrics from it. `on_record` sees every metrics row as it is produced.
inline TrainResult train(Model& model, const TaskData& task, const TrainConfig& cfg,
                         const std::function<void(const MetricsRecord&)>& on_record = {}) {
  cfg.validate();
  if (task.train.size() == 0) throw ConfigError("train: empty training split");
  ParamStore& store = model.params();
  AdamW opt({cfg.weight_decay, cfg.beta1, cfg.beta2, 1e-8});
  const std::size_t n = task.train.size();
  const std::size_t steps_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t total_steps = steps_per_epoch * cfg.epochs;
  const std::size_t trainable = store.count_trainable();
  std::mt19937_64 rng(cfg.seed ^ 0x5eed5eedull);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  const auto t0 = std::chrono::steady_clock::now();
  auto wall = [&] {
    if (!cfg.record_wall_time) return 0.0;
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  };
  TrainResult result;
  auto emit = [&](MetricsRecord r) {
    if (on_record) on_record(r);
    result.metrics.push_back(std::move(r));
  };

  std::size_t step = 0;
  Tape tape;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    const double epoch_lr = cosine_lr(step, total_steps, cfg.lr);
    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t start = 0; start < n; start += cfg.batch_size) {
      const std::size_t bs = std::min(cfg.batch_size, n - start);
      Dataset b = task.train.subset(std::span(order).subspan(start, bs));
      const double lr = cosine_lr(step, total_steps, cfg.lr);
      tape.clear();
      Tensor loss;
      std::size_t batch_correct = 0;
      {
        TapeScope scope(tape);
        Tensor logits = model.logits(b.x, true);
        loss = ops::cross_entropy(logits, b.y);
        const std::size_t c = logits.dim(1);
        for (std::size_t i = 0; i < bs; ++i) {
          auto row = logits.data().subspan(i * c, c);
          batch_correct +=
              static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin()) == b.y[i];
        }
      }
      if (!std::isfinite(loss.item())) {
        char buf[256];
        std::snprintf(buf, sizeof(buf),
                      "non-finite loss at epoch %zu step %zu (lr=%.6g, last grad-norm=%.6g)",
                      epoch, step, lr, grad_norm(store));
        throw NumericError(buf);
      }
      store.zero_grad();
      if (loss.requires_grad()) tape.backward(loss);
      opt.step(store, lr);
      loss_sum += loss.item() * static_cast<double>(bs);
      correct += batch_correct;
      ++step;
    }
    tape.clear();
    emit({epoch, "train", loss_sum / static_cast<double>(n),
          static_cast<double>(correct) / static_cast<double>(n), epoch_lr, trainable, wall()});
    const EvalResult val = evaluate(model, task.val);
    emit({epoch, "val", val.loss, val.accuracy, epoch_lr, trainable, wall()});
    if (val.accuracy > result.best_val_accuracy) {
      result.best_val_accuracy = val.accuracy;
      result.best_epoch = epoch;
      result.best_checkpoint = checkpoint::trainable_records(store);
    }
  }
  model.load_matching(result.best_checkpoint);
  result.test = evaluate(model, task.test);
  emit({result.best_epoch, "test", result.test.loss, result.test.accuracy, 0.0, trainable, wall()});
  return result;
}

struct ProbeResult {
  std::string id;
  std::size_t index = 0;
  bool has_gradient = true;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
};

struct GradcheckResult {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::size_t no_gradient = 0;
  std::vector<ProbeResult> probes;

  bool passed(double tol) const { return checked > 0 && max_rel_error < tol; }
};

struct GradcheckOptions {
  std::size_t n_probes = 200;
  std::uint64_t seed = 0;
  double h = 1e-6;
  // Denominator floor of the relative error |a - n| / max(|a|, |n|, floor);
  // must sit above the central-difference roundoff eps * |loss| / h.
  double floor = 1e-4;
  std::vector<std::string> extra_ids;  // probed at index 0 even if frozen
  double corrupt = 0.0;                // test hook: analytic *= (1 + corrupt)
};

inline double relative_error(double a, double n, double floor) {
  return std::fabs(a - n) / std::max({std::fabs(a), std::fabs(n), floor});
}

/// Compares autodiff gradients of the eval-mode cross-entropy loss with central
/// differences on randomly chosen trainable coordinates. Frozen coordinates
/// named in `extra_ids` are reported as having no gradient.
inline GradcheckResult gradcheck(Model& model, const Dataset& batch, const GradcheckOptions& opt = {}) {
  ParamStore& store = model.params();
  auto loss_value = [&] {
    NoGradScope ng;
    return ops::cross_entropy(model.logits(batch.x, false), batch.y).item();
  };
  store.zero_grad();
  {
    Tape tape;
    Tensor loss;
    {
      TapeScope scope(tape);
      loss = ops::cross_entropy(model.logits(batch.x, false), batch.y);
    }
    tape.backward(loss);
  }

  std::vector<std::pair<std::string, std::size_t>> coords;
  {
    std::vector<std::string> ids(store.trainable_ids().begin(), store.trainable_ids().end());
    std::vector<std::size_t> cum;
    std::size_t total = 0;
    for (const auto& id : ids) cum.push_back(total += store.at(id).numel());
    std::mt19937_64 rng(opt.seed);
    if (total > 0) {
      std::uniform_int_distribution<std::size_t> pick(0, total - 1);
      for (std::size_t i = 0; i < opt.n_probes; ++i) {
        const std::size_t flat = pick(rng);
        const auto it = std::upper_bound(cum.begin(), cum.end(), flat);
        const std::size_t which = static_cast<std::size_t>(it - cum.begin());
        const std::size_t base = which == 0 ? 0 : cum[which - 1];
        coords.emplace_back(ids[which], flat - base);
      }
    }
    for (const auto& id : opt.extra_ids) coords.emplace_back(id, 0);
  }

  GradcheckResult res;
  for (const auto& [id, idx] : coords) {
    Tensor& p = store.at(id);
    ProbeResult pr{id, idx};
    if (!store.is_trainable(id) || !p.has_grad()) {
      pr.has_gradient = false;
      ++res.no_gradient;
      res.probes.push_back(pr);
      continue;
    }
    pr.analytic = p.grad()[idx] * (1.0 + opt.corrupt);
    const double orig = p[idx];
    p[idx] = orig + opt.h;
    const double up = loss_value();
    p[idx] = orig - opt.h;
    const double down = loss_value();
    p[idx] = orig;
    pr.numeric = (up - down) / (2.0 * opt.h);
    pr.rel_error = relative_error(pr.analytic, pr.numeric, opt.floor);
    res.max_rel_error = std::max(res.max_rel_error, pr.rel_error);
    ++res.checked;
    res.probes.push_back(pr);
  }
  return res;
}

/// Draws every trainable tensor from N(0, std) so that gradient checks are
/// not run at a zero-initialized (degenerate) point.
inline void perturb_trainable(ParamStore& store, double std, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, std);
  for (const auto& id : store.trainable_ids())
    for (double& v : store.at(id).data()) v += dist(rng);
}

}  // namespace petl::harness
