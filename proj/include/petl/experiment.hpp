#pragma once

#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <mutex>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"
#include "petl/accounting.hpp"
#include "petl/checkpoint.hpp"
#include "petl/model.hpp"
#include "petl/synthetic.hpp"
#include "petl/train.hpp"

namespace petl::experiment {

namespace fs = std::filesystem;
using nlohmann::json;

inline constexpr const char* kOutputRootEnv = "PETL_OUTPUT_ROOT";

/// Everything one command needs. Populated from a flat JSON object; see
/// `known_keys()` for the schema.
struct ExperimentConfig {
  BackboneConfig backbone = BackboneConfig::desk();
  PetlMethod method = method::Conformer{6, 8};
  harness::TrainConfig train;
  harness::SyntheticTaskSpec task;
  std::size_t pretrain_epochs = 10;
  double pretrain_lr = 0.001;
  std::uint64_t pretrain_seed = 7;
  fs::path output_dir;
  std::vector<std::uint64_t> seeds{0, 1, 2};
  std::vector<std::size_t> shots{2, 8, 32};
  std::vector<std::size_t> k_list{1, 3, 8, 15, 31};
  std::size_t sweep_shots = 8;
  std::vector<std::size_t> targets;  // empty: default grid scaled to the backbone
  std::vector<std::string> budget_methods{"lora", "bottleneck", "conformer"};
  std::size_t jobs = 1;
  std::size_t probes = 200;
  std::size_t gradcheck_batch = 4;
  double gradcheck_tol = 1e-4;
  double gradcheck_corrupt = 0.0;
  bool full_scale = false;

  void validate() const {
    backbone.validate();
    petl::validate(method);
    train.validate();
    task.validate();
    if (task.freq_bins != backbone.patch.freq_bins || task.time_bins != backbone.patch.time_bins)
      throw ConfigError("config: task spectrogram size does not match the backbone patch grid");
    if (task.n_classes != backbone.n_classes)
      throw ConfigError("config: task classes do not match the classifier head");
    if (jobs < 1) throw ConfigError("config: jobs must be >= 1");
    if (seeds.empty()) throw ConfigError("config: seeds must not be empty");
  }
};

inline const std::set<std::string>& known_keys() {
  static const std::set<std::string> keys{
      "method", "r", "k", "p", "s", "alpha", "adapter_config", "adapter_mode", "lora_targets",
      "d", "layers", "heads", "ff_ratio", "patch_h", "patch_w",
      "lr", "weight_decay", "epochs", "batch_size", "seed", "record_wall_time",
      "n_classes", "samples_per_class", "freq_bins", "time_bins", "family", "noise_std",
      "task_seed", "pretrain_epochs", "pretrain_lr", "pretrain_seed", "output_dir",
      "seeds", "shots", "k_list", "sweep_shots", "targets", "budget_methods", "jobs",
      "probes", "gradcheck_batch", "gradcheck_tol", "gradcheck_corrupt", "full_scale"};
  return keys;
}

/// Desk-scale default hyperparameters of each method family.
inline PetlMethod default_method(const std::string& name) {
  if (name == "full") return method::FullFineTune{};
  if (name == "linear") return method::LinearProbe{};
  if (name == "bitfit") return method::BitFit{};
  if (name == "lora") return method::Lora{4};
  if (name == "spt") return method::PromptShallow{64};
  if (name == "dpt") return method::PromptDeep{16};
  if (name == "prefix") return method::Prefix{16};
  if (name == "bottleneck") return method::Bottleneck{8};
  if (name == "conformer") return method::Conformer{6, 8};
  throw ConfigError("unknown method '" + name +
                    "' (expected full, linear, bitfit, lora, spt, dpt, prefix, bottleneck, conformer)");
}

inline bool is_prompt_family(const PetlMethod& m) {
  return std::holds_alternative<method::PromptShallow>(m) ||
         std::holds_alternative<method::PromptDeep>(m) || std::holds_alternative<method::Prefix>(m);
}

/// Initial learning rate per family: 0.01 for prompt/prefix tuning, 0.005 otherwise.
inline double default_lr(const PetlMethod& m) { return is_prompt_family(m) ? 0.01 : 0.005; }

namespace detail {

template <class T>
T get_as(const json& j, const std::string& key) {
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError("config key '" + key + "': " + e.what());
  }
}

inline PetlMethod method_from_json(const json& j, bool full_scale) {
  PetlMethod m = default_method(j.contains("method") ? get_as<std::string>(j, "method") : "conformer");
  // Full-scale audits default to the reference hyperparameters.
  if (full_scale) {
    const auto name = method_name(m);
    if (name == "lora") m = method::Lora{};
    if (name == "spt") m = method::PromptShallow{};
    if (name == "dpt") m = method::PromptDeep{};
    if (name == "prefix") m = method::Prefix{};
    if (name == "bottleneck") m = method::Bottleneck{};
    if (name == "conformer") m = method::Conformer{};
  }
  std::visit(
      [&](auto& v) {
        if constexpr (requires { v.r; })
          if (j.contains("r")) v.r = get_as<std::size_t>(j, "r");
        if constexpr (requires { v.p; })
          if (j.contains("p")) v.p = get_as<std::size_t>(j, "p");
        if constexpr (requires { v.k; })
          if (j.contains("k")) v.k = get_as<std::size_t>(j, "k");
        if constexpr (requires { v.s; }) {
          if (j.contains("s")) v.s = get_as<double>(j, "s");
          if (j.contains("alpha")) v.alpha = get_as<double>(j, "alpha");
          if (j.contains("lora_targets")) {
            const auto t = get_as<std::string>(j, "lora_targets");
            if (t != "qv" && t != "q" && t != "v")
              throw ConfigError("lora_targets must be one of qv, q, v");
            v.target_q = t.find('q') != std::string::npos;
            v.target_v = t.find('v') != std::string::npos;
          }
        }
        if constexpr (requires { v.config; }) {
          if (j.contains("adapter_config")) {
            const auto c = get_as<std::string>(j, "adapter_config");
            if (c != "pfeiffer" && c != "houlsby")
              throw ConfigError("adapter_config must be pfeiffer or houlsby");
            v.config = c == "pfeiffer" ? AdapterConfig::Pfeiffer : AdapterConfig::Houlsby;
          }
          if (j.contains("adapter_mode")) {
            const auto c = get_as<std::string>(j, "adapter_mode");
            if (c != "parallel" && c != "sequential")
              throw ConfigError("adapter_mode must be parallel or sequential");
            v.mode = c == "parallel" ? AdapterMode::Parallel : AdapterMode::Sequential;
          }
        }
      },
      m);
  for (const char* key : {"r", "p", "k", "s", "alpha", "lora_targets", "adapter_config", "adapter_mode"}) {
    if (!j.contains(key)) continue;
    const bool ok = std::visit(
        [&](const auto& v) {
          const std::string k = key;
          if (k == "r") return requires { v.r; };
          if (k == "p") return requires { v.p; };
          if (k == "k") return requires { v.k; };
          if (k == "s" || k == "alpha" || k == "lora_targets") return requires { v.s; };
          return requires { v.config; };
        },
        m);
    if (!ok) throw ConfigError("config key '" + std::string(key) + "' does not apply to method " + method_name(m));
  }
  return m;
}

}  // namespace detail

/// Parses a flat JSON object. Unknown keys are rejected. Keys that are absent
/// keep their defaults; the learning rate defaults per method family.
inline ExperimentConfig from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  for (const auto& [key, value] : j.items())
    if (!known_keys().contains(key)) throw ConfigError("unknown config key '" + key + "'");
  using detail::get_as;
  ExperimentConfig c;
  if (j.contains("full_scale")) c.full_scale = get_as<bool>(j, "full_scale");
  if (c.full_scale) c.backbone = BackboneConfig::full_scale();
  auto& b = c.backbone;
  if (j.contains("d")) b.d = get_as<std::size_t>(j, "d");
  if (j.contains("layers")) b.layers = get_as<std::size_t>(j, "layers");
  if (j.contains("heads")) b.heads = get_as<std::size_t>(j, "heads");
  if (j.contains("ff_ratio")) b.ff_ratio = get_as<std::size_t>(j, "ff_ratio");
  if (j.contains("patch_h")) b.patch.patch_h = get_as<std::size_t>(j, "patch_h");
  if (j.contains("patch_w")) b.patch.patch_w = get_as<std::size_t>(j, "patch_w");
  c.method = detail::method_from_json(j, c.full_scale);

  auto& t = c.task;
  if (!c.full_scale) {
    t.freq_bins = b.patch.freq_bins;
    t.time_bins = b.patch.time_bins;
  }
  if (j.contains("n_classes")) t.n_classes = get_as<std::size_t>(j, "n_classes");
  if (j.contains("samples_per_class")) t.samples_per_class = get_as<std::size_t>(j, "samples_per_class");
  if (j.contains("freq_bins")) t.freq_bins = get_as<std::size_t>(j, "freq_bins");
  if (j.contains("time_bins")) t.time_bins = get_as<std::size_t>(j, "time_bins");
  if (j.contains("noise_std")) t.noise_std = get_as<double>(j, "noise_std");
  if (j.contains("task_seed")) t.seed = get_as<std::uint64_t>(j, "task_seed");
  if (j.contains("family")) {
    const auto f = get_as<std::string>(j, "family");
    if (f != "bands" && f != "chirps") throw ConfigError("family must be bands or chirps");
    t.family = f == "bands" ? harness::PatternFamily::Bands : harness::PatternFamily::Chirps;
  }
  if (!c.full_scale) {
    b.patch.freq_bins = t.freq_bins;
    b.patch.time_bins = t.time_bins;
    b.n_classes = t.n_classes;
  } else {
    t.freq_bins = b.patch.freq_bins;
    t.time_bins = b.patch.time_bins;
    t.n_classes = b.n_classes;
  }

  auto& tr = c.train;
  tr.lr = j.contains("lr") ? get_as<double>(j, "lr") : default_lr(c.method);
  if (j.contains("weight_decay")) tr.weight_decay = get_as<double>(j, "weight_decay");
  if (j.contains("epochs")) tr.epochs = get_as<std::size_t>(j, "epochs");
  if (j.contains("batch_size")) tr.batch_size = get_as<std::size_t>(j, "batch_size");
  if (j.contains("seed")) tr.seed = get_as<std::uint64_t>(j, "seed");
  if (j.contains("record_wall_time")) tr.record_wall_time = get_as<bool>(j, "record_wall_time");

  if (j.contains("pretrain_epochs")) c.pretrain_epochs = get_as<std::size_t>(j, "pretrain_epochs");
  if (j.contains("pretrain_lr")) c.pretrain_lr = get_as<double>(j, "pretrain_lr");
  if (j.contains("pretrain_seed")) c.pretrain_seed = get_as<std::uint64_t>(j, "pretrain_seed");
  if (j.contains("output_dir")) c.output_dir = get_as<std::string>(j, "output_dir");
  if (j.contains("seeds")) c.seeds = get_as<std::vector<std::uint64_t>>(j, "seeds");
  if (j.contains("shots")) c.shots = get_as<std::vector<std::size_t>>(j, "shots");
  if (j.contains("k_list")) c.k_list = get_as<std::vector<std::size_t>>(j, "k_list");
  if (j.contains("sweep_shots")) c.sweep_shots = get_as<std::size_t>(j, "sweep_shots");
  if (j.contains("targets")) c.targets = get_as<std::vector<std::size_t>>(j, "targets");
  if (j.contains("budget_methods")) c.budget_methods = get_as<std::vector<std::string>>(j, "budget_methods");
  if (j.contains("jobs")) c.jobs = get_as<std::size_t>(j, "jobs");
  if (j.contains("probes")) c.probes = get_as<std::size_t>(j, "probes");
  if (j.contains("gradcheck_batch")) c.gradcheck_batch = get_as<std::size_t>(j, "gradcheck_batch");
  if (j.contains("gradcheck_tol")) c.gradcheck_tol = get_as<double>(j, "gradcheck_tol");
  if (j.contains("gradcheck_corrupt")) c.gradcheck_corrupt = get_as<double>(j, "gradcheck_corrupt");
  if (c.output_dir.empty()) {
    const char* root = std::getenv(kOutputRootEnv);
    c.output_dir = root && *root ? fs::path(root) : fs::path("petl_runs");
  }
  c.validate();
  return c;
}

inline json load_json_file(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config file " + path.string());
  try {
    return json::parse(is);
  } catch (const json::parse_error& e) {
    throw ConfigError("config file " + path.string() + ": " + e.what());
  }
}

/// Resolved configuration as a flat JSON object accepted by from_json.
inline json to_json(const ExperimentConfig& c) {
  json j;
  j["method"] = method_name(c.method);
  std::visit(
      [&](const auto& v) {
        if constexpr (requires { v.r; }) j["r"] = v.r;
        if constexpr (requires { v.p; }) j["p"] = v.p;
        if constexpr (requires { v.k; }) j["k"] = v.k;
        if constexpr (requires { v.s; }) {
          j["s"] = v.s;
          j["alpha"] = v.alpha;
          j["lora_targets"] = std::string(v.target_q ? "q" : "") + (v.target_v ? "v" : "");
        }
        if constexpr (requires { v.config; }) {
          j["adapter_config"] = to_string(v.config);
          j["adapter_mode"] = to_string(v.mode);
        }
      },
      c.method);
  j["full_scale"] = c.full_scale;
  j["d"] = c.backbone.d;
  j["layers"] = c.backbone.layers;
  j["heads"] = c.backbone.heads;
  j["ff_ratio"] = c.backbone.ff_ratio;
  j["patch_h"] = c.backbone.patch.patch_h;
  j["patch_w"] = c.backbone.patch.patch_w;
  j["lr"] = c.train.lr;
  j["weight_decay"] = c.train.weight_decay;
  j["epochs"] = c.train.epochs;
  j["batch_size"] = c.train.batch_size;
  j["seed"] = c.train.seed;
  j["record_wall_time"] = c.train.record_wall_time;
  j["n_classes"] = c.task.n_classes;
  j["samples_per_class"] = c.task.samples_per_class;
  j["freq_bins"] = c.task.freq_bins;
  j["time_bins"] = c.task.time_bins;
  j["family"] = harness::to_string(c.task.family);
  j["noise_std"] = c.task.noise_std;
  j["task_seed"] = c.task.seed;
  j["pretrain_epochs"] = c.pretrain_epochs;
  j["pretrain_lr"] = c.pretrain_lr;
  j["pretrain_seed"] = c.pretrain_seed;
  j["output_dir"] = c.output_dir.string();
  j["seeds"] = c.seeds;
  j["shots"] = c.shots;
  j["k_list"] = c.k_list;
  j["sweep_shots"] = c.sweep_shots;
  j["targets"] = c.targets;
  j["budget_methods"] = c.budget_methods;
  j["jobs"] = c.jobs;
  j["probes"] = c.probes;
  j["gradcheck_batch"] = c.gradcheck_batch;
  j["gradcheck_tol"] = c.gradcheck_tol;
  j["gradcheck_corrupt"] = c.gradcheck_corrupt;
  return j;
}

inline ExperimentConfig with_method(ExperimentConfig c, const PetlMethod& m) {
  c.method = m;
  c.train.lr = default_lr(m);
  return c;
}

// ---------------------------------------------------------------------------
// Pretrain -> adapt pipeline

/// Source task: same extents and class count as the transfer task, band family.
inline harness::SyntheticTaskSpec pretrain_task_spec(const ExperimentConfig& c) {
  harness::SyntheticTaskSpec s = c.task;
  s.family = harness::PatternFamily::Bands;
  s.seed = c.task.seed ^ 0xba4d5ull;
  return s;
}

/// Full fine-tuning of a fresh backbone on the band family. With zero epochs
/// the randomly initialized backbone is returned.
inline checkpoint::Records pretrain_backbone(const ExperimentConfig& c) {
  Model model(c.backbone, method::FullFineTune{}, c.pretrain_seed);
  if (c.pretrain_epochs > 0) {
    harness::TrainConfig tc = c.train;
    tc.lr = c.pretrain_lr;
    tc.epochs = c.pretrain_epochs;
    tc.seed = c.pretrain_seed;
    tc.record_wall_time = false;
    harness::train(model, harness::gen_synthetic_task(pretrain_task_spec(c)), tc);
  }
  return checkpoint::backbone_records(model.params());
}

/// Pretrained backbone stored under `dir`, keyed by everything that affects it.
inline checkpoint::Records cached_pretrain(const ExperimentConfig& c, const fs::path& dir) {
  const json all = to_json(c);
  std::string material;
  for (const char* k : {"d", "layers", "heads", "ff_ratio", "patch_h", "patch_w", "n_classes",
                        "samples_per_class", "freq_bins", "time_bins", "noise_std", "task_seed",
                        "pretrain_epochs", "pretrain_lr", "pretrain_seed", "batch_size",
                        "weight_decay"})
    material += std::string(k) + "=" + all.at(k).dump() + ";";
  char name[64];
  std::snprintf(name, sizeof(name), "backbone-%016llx.ckpt",
                static_cast<unsigned long long>(petl::detail::fnv1a(material)));
  const fs::path path = dir / name;
  if (fs::exists(path)) {
    auto loaded = checkpoint::load(path);
    if (loaded.kind != checkpoint::Kind::Backbone)
      throw ConfigError(path.string() + " is not a backbone checkpoint");
    return std::move(loaded.records);
  }
  auto records = pretrain_backbone(c);
  fs::create_directories(dir);
  const fs::path tmp = path.string() + ".tmp";
  checkpoint::save(tmp, records, checkpoint::Kind::Backbone);
  fs::rename(tmp, path);
  return records;
}

struct RunOutcome {
  harness::TrainResult result;
  accounting::ParamReport report;
  std::uint64_t frozen_hash_before = 0;
  std::uint64_t frozen_hash_after = 0;
};

/// Builds the method on a pretrained backbone and trains it on `task`.
inline RunOutcome run_transfer(const ExperimentConfig& c, const checkpoint::Records& backbone,
                               const harness::TaskData& task,
                               const std::function<void(const harness::MetricsRecord&)>& on_record = {}) {
  Model model(c.backbone, c.method, c.train.seed);
  model.load_backbone(backbone);
  RunOutcome out;
  out.report = accounting::count_trainable(model.params(), model.plan(), c.backbone);
  out.frozen_hash_before = frozen_hash(model.params());
  out.result = harness::train(model, task, c.train, on_record);
  out.frozen_hash_after = frozen_hash(model.params());
  return out;
}

/// Runs `n` independent jobs on at most `jobs` threads. Exceptions are
/// rethrown after all workers stop; the first one by index wins.
inline void parallel_for(std::size_t n, std::size_t jobs, const std::function<void(std::size_t)>& fn) {
  jobs = std::max<std::size_t>(1, std::min(jobs, n));
  std::vector<std::exception_ptr> errors(n);
  if (jobs == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < jobs; ++w)
    pool.emplace_back([&] {
      for (std::size_t i; (i = next.fetch_add(1)) < n;) {
        try {
          fn(i);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    });
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

// ---------------------------------------------------------------------------
// CSV outputs. Every file starts with a "# schema=<name>/<version>" line.

struct CsvSchema {
  const char* name;
  const char* header;
};

inline constexpr CsvSchema kMetricsCsv{"petl-metrics/1", "epoch,split,loss,accuracy,lr,trainable_params,wall_time"};
inline constexpr CsvSchema kKernelCsv{"petl-sweep-kernel/1", "k,mode,shots,seed,params,accuracy"};
inline constexpr CsvSchema kBudgetCsv{"petl-sweep-budget/1", "target,method,hyperparam,params,seed,accuracy"};
inline constexpr CsvSchema kFewshotCsv{"petl-fewshot/1", "shots,seed,trainable_params,accuracy"};
inline constexpr CsvSchema kFewshotSummaryCsv{"petl-fewshot-summary/1", "shots,n_seeds,mean_accuracy,std_accuracy"};
inline constexpr CsvSchema kTransferCsv{"petl-transfer/1", "method,seed,trainable_params,best_epoch,test_accuracy"};

inline void write_csv_header(std::ostream& os, const CsvSchema& s) {
  os << "# schema=" << s.name << '\n' << s.header << '\n';
}

/// Checks the schema line, the header and that every row has the header's
/// column count with no empty cells. Returns the data rows.
inline std::vector<std::vector<std::string>> read_csv(const fs::path& path, const CsvSchema& s) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open " + path.string());
  std::string line;
  if (!std::getline(is, line) || line != std::string("# schema=") + s.name)
    throw ConfigError(path.string() + ": missing or wrong schema line");
  if (!std::getline(is, line) || line != s.header)
    throw ConfigError(path.string() + ": unexpected header '" + line + "'");
  const auto n_cols = static_cast<std::size_t>(std::count(line.begin(), line.end(), ',')) + 1;
  std::vector<std::vector<std::string>> rows;
  while (std::getline(is, line)) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    if (cells.size() != n_cols)
      throw ConfigError(path.string() + ": row with " + std::to_string(cells.size()) + " cells");
    for (const auto& cell : cells)
      if (cell.empty()) throw ConfigError(path.string() + ": empty cell");
    rows.push_back(std::move(cells));
  }
  return rows;
}

inline std::string fmt(double v, int precision = 6) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", precision, v);
  return buf;
}

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation over seeds; 0 for one seed
};

inline MeanStd mean_std(const std::vector<double>& v) {
  MeanStd r;
  if (v.empty()) return r;
  for (double x : v) r.mean += x;
  r.mean /= static_cast<double>(v.size());
  if (v.size() > 1) {
    double ss = 0.0;
    for (double x : v) ss += (x - r.mean) * (x - r.mean);
    r.std = std::sqrt(ss / static_cast<double>(v.size() - 1));
  }
  return r;
}

// ---------------------------------------------------------------------------
// Commands. Each writes only inside c.output_dir.

struct TrainOutput {
  RunOutcome outcome;
  fs::path metrics_path;
};

/// metrics.csv, config.json, report.json and petl.ckpt (trainable tensors only).
inline TrainOutput cmd_train(const ExperimentConfig& c, std::ostream& log = std::cout) {
  fs::create_directories(c.output_dir);
  const auto backbone = cached_pretrain(c, c.output_dir);
  const auto task = harness::gen_synthetic_task(c.task);
  TrainOutput out;
  out.metrics_path = c.output_dir / "metrics.csv";
  std::ofstream metrics(out.metrics_path, std::ios::binary);
  harness::write_metrics_header(metrics);
  out.outcome = run_transfer(c, backbone, task, [&](const harness::MetricsRecord& r) {
    harness::write_metrics_row(metrics, r);
    metrics.flush();
    if (r.split != "train")
      log << "epoch " << r.epoch << ' ' << r.split << " loss " << fmt(r.loss, 4) << " acc "
          << fmt(r.accuracy, 4) << '\n';
  });
  std::ofstream(c.output_dir / "config.json") << to_json(c).dump(2) << '\n';
  std::ofstream(c.output_dir / "report.json") << accounting::to_json(out.outcome.report).dump(2) << '\n';
  checkpoint::save(c.output_dir / "petl.ckpt", out.outcome.result.best_checkpoint, checkpoint::Kind::Petl);
  if (out.outcome.frozen_hash_before != out.outcome.frozen_hash_after)
    throw NumericError("frozen parameters changed during training");
  log << "test accuracy " << fmt(out.outcome.result.test.accuracy, 4) << " (best epoch "
      << out.outcome.result.best_epoch << ")\n";
  return out;
}

struct KernelRow {
  std::size_t k = 0;
  std::string mode;
  std::size_t shots = 0;
  std::uint64_t seed = 0;
  std::size_t params = 0;
  double accuracy = 0.0;
};

/// Conformer adapter over c.k_list, in full-data and few-shot modes, one row
/// per (k, mode, seed).
inline std::vector<KernelRow> cmd_sweep_kernel(const ExperimentConfig& c, std::ostream& log = std::cout) {
  const auto* base = std::get_if<method::Conformer>(&c.method);
  method::Conformer conf = base ? *base : std::get<method::Conformer>(default_method("conformer"));
  fs::create_directories(c.output_dir);
  const auto backbone = cached_pretrain(c, c.output_dir);
  const auto task = harness::gen_synthetic_task(c.task);
  std::vector<KernelRow> rows;
  for (std::size_t k : c.k_list)
    for (const char* mode : {"full", "fewshot"})
      for (auto seed : c.seeds) rows.push_back({k, mode, std::string(mode) == "full" ? 0 : c.sweep_shots, seed});
  parallel_for(rows.size(), c.jobs, [&](std::size_t i) {
    KernelRow& row = rows[i];
    method::Conformer m = conf;
    m.k = row.k;
    ExperimentConfig rc = c;
    rc.method = m;
    rc.train.seed = row.seed;
    const auto data = row.shots ? harness::few_shot_subsample(task, row.shots, row.seed) : task;
    auto out = run_transfer(rc, backbone, data);
    row.params = out.report.trainable_params;
    row.accuracy = out.result.test.accuracy;
  });
  std::ofstream os(c.output_dir / "sweep_kernel.csv", std::ios::binary);
  write_csv_header(os, kKernelCsv);
  for (const auto& r : rows) {
    os << r.k << ',' << r.mode << ',' << r.shots << ',' << r.seed << ',' << r.params << ','
       << fmt(r.accuracy) << '\n';
    log << "k=" << r.k << ' ' << r.mode << " seed " << r.seed << " params " << r.params << " acc "
        << fmt(r.accuracy, 4) << '\n';
  }
  return rows;
}

/// Log-spaced 50K..1M grid (6 points) scaled by the backbone's d*L relative
/// to the 768/12 reference.
inline std::vector<std::size_t> default_budget_targets(const BackboneConfig& cfg) {
  const double scale = static_cast<double>(cfg.d * cfg.layers) / (768.0 * 12.0);
  std::vector<std::size_t> out;
  for (int i = 0; i < 6; ++i) {
    const double full = 50000.0 * std::pow(20.0, i / 5.0);
    out.push_back(static_cast<std::size_t>(std::llround(full * scale)));
  }
  return out;
}

struct BudgetRow {
  std::size_t target = 0;
  std::string method;
  std::size_t hyperparam = 0;
  std::size_t params = 0;
  std::uint64_t seed = 0;
  double accuracy = 0.0;
};

/// For each method family and target: solve for the largest r (or p) within
/// budget and train it. Infeasible (method, target) pairs are skipped with a warning.
inline std::vector<BudgetRow> cmd_sweep_budget(const ExperimentConfig& c, std::ostream& log = std::cout) {
  const auto targets = c.targets.empty() ? default_budget_targets(c.backbone) : c.targets;
  fs::create_directories(c.output_dir);
  std::vector<BudgetRow> rows;
  std::vector<PetlMethod> methods;
  for (const auto& name : c.budget_methods) {
    const PetlMethod family = default_method(name);
    for (std::size_t target : targets) {
      std::size_t h = 0;
      try {
        h = accounting::solve_budget(family, target, c.backbone);
      } catch (const ConfigError& e) {
        log << "warning: skipping " << name << " at target " << target << ": " << e.what() << '\n';
        continue;
      }
      const PetlMethod m = accounting::with_hyperparameter(family, h);
      for (auto seed : c.seeds) {
        rows.push_back({target, name, h, accounting::closed_form(m, c.backbone), seed});
        methods.push_back(m);
      }
    }
  }
  const auto backbone = cached_pretrain(c, c.output_dir);
  const auto task = harness::gen_synthetic_task(c.task);
  parallel_for(rows.size(), c.jobs, [&](std::size_t i) {
    ExperimentConfig rc = with_method(c, methods[i]);
    rc.train.seed = rows[i].seed;
    auto out = run_transfer(rc, backbone, task);
    if (out.report.trainable_params != rows[i].params)
      throw ContractError("census disagrees with closed form for " + describe(methods[i]));
    rows[i].accuracy = out.result.test.accuracy;
  });
  std::ofstream os(c.output_dir / "sweep_budget.csv", std::ios::binary);
  write_csv_header(os, kBudgetCsv);
  for (const auto& r : rows) {
    os << r.target << ',' << r.method << ',' << r.hyperparam << ',' << r.params << ',' << r.seed
       << ',' << fmt(r.accuracy) << '\n';
    log << r.method << " target " << r.target << " -> " << r.hyperparam << " (" << r.params
        << " params) seed " << r.seed << " acc " << fmt(r.accuracy, 4) << '\n';
  }
  return rows;
}

struct FewshotRow {
  std::size_t shots = 0;
  std::uint64_t seed = 0;
  std::size_t trainable_params = 0;
  double accuracy = 0.0;
};

struct FewshotSummary {
  std::size_t shots = 0;
  std::size_t n = 0;
  MeanStd acc;
};

inline std::vector<FewshotSummary> summarize(const std::vector<FewshotRow>& rows) {
  std::map<std::size_t, std::vector<double>> by_shots;
  for (const auto& r : rows) by_shots[r.shots].push_back(r.accuracy);
  std::vector<FewshotSummary> out;
  for (const auto& [shots, accs] : by_shots) out.push_back({shots, accs.size(), mean_std(accs)});
  return out;
}

/// One run per (shots, seed): the seed selects the training subset and the
/// module initialization. Writes fewshot.csv and fewshot_summary.csv.
inline std::vector<FewshotRow> cmd_fewshot(const ExperimentConfig& c, std::ostream& log = std::cout) {
  fs::create_directories(c.output_dir);
  const auto backbone = cached_pretrain(c, c.output_dir);
  const auto task = harness::gen_synthetic_task(c.task);
  std::vector<FewshotRow> rows;
  for (auto shots : c.shots)
    for (auto seed : c.seeds) rows.push_back({shots, seed});
  for (const auto& r : rows) harness::few_shot_subsample(task, r.shots, r.seed);  // fail early
  parallel_for(rows.size(), c.jobs, [&](std::size_t i) {
    ExperimentConfig rc = c;
    rc.train.seed = rows[i].seed;
    auto out = run_transfer(rc, backbone, harness::few_shot_subsample(task, rows[i].shots, rows[i].seed));
    rows[i].trainable_params = out.report.trainable_params;
    rows[i].accuracy = out.result.test.accuracy;
  });
  std::ofstream os(c.output_dir / "fewshot.csv", std::ios::binary);
  write_csv_header(os, kFewshotCsv);
  for (const auto& r : rows)
    os << r.shots << ',' << r.seed << ',' << r.trainable_params << ',' << fmt(r.accuracy) << '\n';
  std::ofstream ss(c.output_dir / "fewshot_summary.csv", std::ios::binary);
  write_csv_header(ss, kFewshotSummaryCsv);
  for (const auto& s : summarize(rows)) {
    ss << s.shots << ',' << s.n << ',' << fmt(s.acc.mean) << ',' << fmt(s.acc.std) << '\n';
    log << "shots " << s.shots << ": " << fmt(100 * s.acc.mean, 2) << " +- " << fmt(100 * s.acc.std, 2)
        << " % over " << s.n << " seeds\n";
  }
  return rows;
}

/// Parameter census; at full scale this never allocates tensors.
inline accounting::ParamReport cmd_count(const ExperimentConfig& c) {
  return accounting::count_trainable(build_plan(c.method, c.backbone), c.backbone);
}

struct GradcheckOutcome {
  std::string method;
  harness::GradcheckResult result;
  bool passed = false;
};

/// Gradient check of one method at a perturbed (non-degenerate) point of a
/// randomly initialized desk model.
inline GradcheckOutcome gradcheck_method(const ExperimentConfig& c, const PetlMethod& m) {
  Model model(c.backbone, m, c.train.seed);
  harness::perturb_trainable(model.params(), 0.05, c.train.seed + 17);
  const auto task = harness::gen_synthetic_task(c.task);
  std::vector<std::size_t> idx(std::min(c.gradcheck_batch, task.train.size()));
  std::iota(idx.begin(), idx.end(), 0);
  harness::GradcheckOptions opt;
  opt.n_probes = c.probes;
  opt.seed = c.train.seed;
  opt.corrupt = c.gradcheck_corrupt;
  GradcheckOutcome out{describe(m), harness::gradcheck(model, task.train.subset(idx), opt)};
  out.passed = out.result.passed(c.gradcheck_tol);
  return out;
}

inline std::vector<PetlMethod> all_desk_methods() {
  std::vector<PetlMethod> out;
  for (const char* n : {"full", "linear", "bitfit", "lora", "spt", "dpt", "prefix", "bottleneck", "conformer"})
    out.push_back(default_method(n));
  return out;
}

/// The transfer methods compared against linear probing.
inline std::vector<std::string> petl_method_names() {
  return {"bitfit", "lora", "spt", "dpt", "prefix", "bottleneck", "conformer"};
}

}  // namespace petl::experiment
