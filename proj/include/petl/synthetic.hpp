#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "petl/checkpoint.hpp"
#include "petl/tensor.hpp"

namespace petl::harness {

/// Pattern families. Bands: stationary horizontal bands whose position and
/// tone count depend on the class. Chirps: a single tone sweeping through
/// the middle of the spectrogram with a class-dependent slope.
enum class PatternFamily { Bands, Chirps };

inline std::string to_string(PatternFamily f) { return f == PatternFamily::Bands ? "bands" : "chirps"; }

struct SyntheticTaskSpec {
  std::size_t n_classes = 8;
  std::size_t samples_per_class = 60;
  std::size_t freq_bins = 32;
  std::size_t time_bins = 32;
  PatternFamily family = PatternFamily::Chirps;
  double noise_std = 0.3;
  std::uint64_t seed = 1;

  void validate() const {
    if (n_classes < 2) throw ConfigError("task: need at least two classes");
    if (samples_per_class < 7)
      throw ConfigError("task: need at least 7 samples per class for a 70/15/15 split");
    if (freq_bins < 8 || time_bins < 2) throw ConfigError("task: spectrogram too small");
    if (noise_std < 0) throw ConfigError("task: noise_std must be >= 0");
  }
};

/// Spectrograms [n x F x T] with one integer label per item.
struct Dataset {
  Tensor x;
  std::vector<std::size_t> y;

  std::size_t size() const { return y.size(); }
  std::size_t item_size() const { return x.numel() / std::max<std::size_t>(y.size(), 1); }

  Dataset subset(std::span<const std::size_t> idx) const {
    const std::size_t per = item_size();
    Shape s = x.shape();
    s[0] = idx.size();
    std::vector<double> data(idx.size() * per);
    std::vector<std::size_t> labels(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) {
      std::copy_n(x.data().data() + idx[i] * per, per, data.data() + i * per);
      labels[i] = y[idx[i]];
    }
    return {Tensor::from(std::move(s), std::move(data)), std::move(labels)};
  }

  std::vector<std::size_t> class_counts(std::size_t n_classes) const {
    std::vector<std::size_t> c(n_classes, 0);
    for (auto l : y) ++c.at(l);
    return c;
  }
};

struct TaskData {
  Dataset train, val, test;
  std::size_t n_classes = 0;
};

namespace detail {

inline void render(const SyntheticTaskSpec& spec, std::size_t cls, std::mt19937_64& rng,
                   double* out) {
  const std::size_t F = spec.freq_bins, T = spec.time_bins, C = spec.n_classes;
  const double Fd = static_cast<double>(F), Td = static_cast<double>(T);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  std::normal_distribution<double> noise(0.0, 1.0);
  const double frac = static_cast<double>(cls) / static_cast<double>(C - 1);
  const double amp = 1.0 + 0.2 * unit(rng);
  const double shift = spec.family == PatternFamily::Bands ? 0.5 * unit(rng) : unit(rng);
  auto bump = [](double f, double c) { return std::exp(-0.5 * (f - c) * (f - c)); };
  for (std::size_t t = 0; t < T; ++t) {
    double centers[2];
    std::size_t tones = 1;
    if (spec.family == PatternFamily::Bands) {
      // Band position spreads over the frequency axis; odd classes add a second tone.
      centers[0] = 3.0 + frac * (Fd - 6.0) + shift;
      if (cls % 2 == 1) {
        centers[1] = std::fmod(centers[0] + Fd / 3.0, Fd - 2.0) + 1.0;
        tones = 2;
      }
    } else {
      const double slope = 0.75 * (2.0 * frac - 1.0);
      centers[0] = Fd / 2.0 + slope * (static_cast<double>(t) - Td / 2.0) + shift;
    }
    for (std::size_t f = 0; f < F; ++f) {
      double v = 0.0;
      for (std::size_t i = 0; i < tones; ++i) v += bump(static_cast<double>(f), centers[i]);
      out[f * T + t] = amp * v;
    }
  }
  if (spec.noise_std > 0)
    for (std::size_t i = 0; i < F * T; ++i) out[i] += spec.noise_std * noise(rng);
}

}  // namespace detail

/// Deterministic under `spec.seed`. Every class contributes exactly
/// floor(0.70 n) train, floor(0.15 n) validation and the remaining test items.
inline TaskData gen_synthetic_task(const SyntheticTaskSpec& spec) {
  spec.validate();
  const std::size_t n = spec.samples_per_class, C = spec.n_classes;
  const std::size_t per = spec.freq_bins * spec.time_bins;
  const std::size_t n_train = n * 70 / 100, n_val = n * 15 / 100, n_test = n - n_train - n_val;
  std::mt19937_64 rng(spec.seed);
  std::vector<double> all(C * n * per);
  // Class-interleaved generation order: sample j of every class, then j+1.
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t c = 0; c < C; ++c) detail::render(spec, c, rng, all.data() + (c * n + j) * per);

  auto build = [&](std::size_t begin, std::size_t count) {
    std::vector<double> data(C * count * per);
    std::vector<std::size_t> labels(C * count);
    for (std::size_t j = 0; j < count; ++j)
      for (std::size_t c = 0; c < C; ++c) {
        std::copy_n(all.data() + (c * n + begin + j) * per, per, data.data() + (j * C + c) * per);
        labels[j * C + c] = c;
      }
    return Dataset{Tensor::from({C * count, spec.freq_bins, spec.time_bins}, std::move(data)),
                   std::move(labels)};
  };
  return {build(0, n_train), build(n_train, n_val), build(n_train + n_val, n_test), C};
}

/// Exactly `shots` training items per class, drawn without replacement under
/// `seed`. Validation and test splits are untouched.
inline TaskData few_shot_subsample(const TaskData& task, std::size_t shots, std::uint64_t seed) {
  std::vector<std::vector<std::size_t>> by_class(task.n_classes);
  for (std::size_t i = 0; i < task.train.size(); ++i) by_class.at(task.train.y[i]).push_back(i);
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> picked;
  for (std::size_t c = 0; c < task.n_classes; ++c) {
    auto& idx = by_class[c];
    if (idx.size() < shots)
      throw ConfigError("few-shot: class " + std::to_string(c) + " has " +
                        std::to_string(idx.size()) + " training items, " +
                        std::to_string(shots) + " requested");
    std::shuffle(idx.begin(), idx.end(), rng);
    picked.insert(picked.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(shots));
  }
  std::sort(picked.begin(), picked.end());
  TaskData out = task;
  out.train = task.train.subset(picked);
  return out;
}

/// Stratified k-fold split. Item j of class c goes to fold (j + offset_c) mod k,
/// where offset_c rotates with the running item count so fold sizes stay balanced.
inline std::vector<std::pair<Dataset, Dataset>> kfold_split(const Dataset& data, std::size_t k,
                                                            std::size_t n_classes) {
  if (k < 2) throw ConfigError("kfold: k must be >= 2");
  const auto counts = data.class_counts(n_classes);
  for (std::size_t c = 0; c < n_classes; ++c)
    if (counts[c] > 0 && counts[c] < k)
      throw ConfigError("kfold: k=" + std::to_string(k) + " exceeds the " +
                        std::to_string(counts[c]) + " items of class " + std::to_string(c));
  std::vector<std::size_t> offset(n_classes, 0), seen(n_classes, 0);
  std::size_t running = 0;
  for (std::size_t c = 0; c < n_classes; ++c) {
    offset[c] = running % k;
    running += counts[c];
  }
  std::vector<std::size_t> fold_of(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    const std::size_t c = data.y[i];
    fold_of[i] = (seen[c]++ + offset[c]) % k;
  }
  std::vector<std::pair<Dataset, Dataset>> out;
  for (std::size_t f = 0; f < k; ++f) {
    std::vector<std::size_t> train, test;
    for (std::size_t i = 0; i < data.size(); ++i) (fold_of[i] == f ? test : train).push_back(i);
    out.emplace_back(data.subset(train), data.subset(test));
  }
  return out;
}

/// Nearest-centroid classifier on raw pixels: accuracy on `eval` with
/// centroids fitted on `fit`.
inline double nearest_centroid_accuracy(const Dataset& fit, const Dataset& eval, std::size_t n_classes) {
  const std::size_t per = fit.item_size();
  std::vector<double> centroid(n_classes * per, 0.0);
  const auto counts = fit.class_counts(n_classes);
  for (std::size_t i = 0; i < fit.size(); ++i)
    for (std::size_t j = 0; j < per; ++j) centroid[fit.y[i] * per + j] += fit.x[i * per + j];
  for (std::size_t c = 0; c < n_classes; ++c)
    for (std::size_t j = 0; j < per; ++j)
      centroid[c * per + j] /= static_cast<double>(std::max<std::size_t>(counts[c], 1));
  std::size_t correct = 0;
  for (std::size_t i = 0; i < eval.size(); ++i) {
    std::size_t best = 0;
    double best_d = INFINITY;
    for (std::size_t c = 0; c < n_classes; ++c) {
      double dist = 0.0;
      for (std::size_t j = 0; j < per; ++j) {
        const double e = eval.x[i * per + j] - centroid[c * per + j];
        dist += e * e;
      }
      if (dist < best_d) {
        best_d = dist;
        best = c;
      }
    }
    correct += best == eval.y[i];
  }
  return static_cast<double>(correct) / static_cast<double>(eval.size());
}

/// Dataset cache in the checkpoint record format.
inline checkpoint::Records to_records(const TaskData& t) {
  checkpoint::Records r;
  auto put = [&](const std::string& name, const Dataset& d) {
    r.emplace(name + ".x", d.x.detach());
    std::vector<double> y(d.y.begin(), d.y.end());
    r.emplace(name + ".y", Tensor::from({d.y.size()}, std::move(y)));
  };
  put("train", t.train);
  put("val", t.val);
  put("test", t.test);
  r.emplace("n_classes", Tensor::scalar(static_cast<double>(t.n_classes)));
  return r;
}

inline TaskData from_records(const checkpoint::Records& r) {
  auto get = [&](const std::string& name) {
    const Tensor& y = r.at(name + ".y");
    std::vector<std::size_t> labels(y.numel());
    for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = static_cast<std::size_t>(y[i]);
    return Dataset{r.at(name + ".x").clone(), std::move(labels)};
  };
  return {get("train"), get("val"), get("test"), static_cast<std::size_t>(r.at("n_classes").item())};
}

}  // namespace petl::harness
