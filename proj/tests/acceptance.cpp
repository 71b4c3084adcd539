#include <sys/wait.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "petl/experiment.hpp"
#include "test_util.hpp"

using namespace petl;
namespace ex = petl::experiment;
namespace fs = std::filesystem;
using petl::testing::finite_difference;
using petl::testing::max_abs_diff;
using petl::testing::probe;
using petl::testing::rand_tensor;

namespace {

struct Verdict {
  bool pass = true;
  std::ostringstream detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail << " [failed: " << what << "]";
    }
  }
};

int failures = 0;

void report(int id, const char* name, const std::function<void(Verdict&)>& body) {
  Verdict v;
  const auto t0 = std::chrono::steady_clock::now();
  try {
    body(v);
  } catch (const std::exception& e) {
    v.pass = false;
    v.detail << " [exception: " << e.what() << "]";
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (!v.pass) ++failures;
  std::printf("%s %d %s:%s (%.1fs)\n", v.pass ? "PASS" : "FAIL", id, name, v.detail.str().c_str(), secs);
  std::fflush(stdout);
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

int run_cli(const std::string& args, const fs::path& log) {
  const std::string cmd = "\"" + std::string(PETL_CLI_PATH) + "\" " + args + " > \"" + log.string() + "\" 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::size_t count(const PetlMethod& m) {
  ex::ExperimentConfig c;
  c.backbone = BackboneConfig::full_scale();
  c.method = m;
  return ex::cmd_count(c).trainable_params;
}

double mean(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

std::string pct(double x) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.3f", x);
  return buf;
}

std::vector<double> direct_conv(const Tensor& x, const Tensor& w, const Tensor& b, std::size_t n, std::size_t c,
                                std::size_t k) {
  std::vector<double> y(n * c);
  const int left = static_cast<int>((k - 1) / 2);
  for (std::size_t t = 0; t < n; ++t)
    for (std::size_t ch = 0; ch < c; ++ch) {
      double acc = b[ch];
      for (std::size_t j = 0; j < k; ++j) {
        const int src = static_cast<int>(t) + static_cast<int>(j) - left;
        if (src >= 0 && src < static_cast<int>(n)) acc += w[ch * k + j] * x[static_cast<std::size_t>(src) * c + ch];
      }
      y[t * c + ch] = acc;
    }
  return y;
}

}  // namespace

int main() {
  const fs::path work = fs::temp_directory_path() / "petl_acceptance";
  fs::remove_all(work);
  fs::create_directories(work);

  report(1, "parameter budgets at full scale", [](Verdict& v) {
    struct Row {
      const char* name;
      PetlMethod m;
      std::size_t exact;
      std::size_t published_k;
    };
    const Row rows[] = {
        {"lora r6", method::Lora{.r = 6}, 221184, 221},
        {"spt 300", method::PromptShallow{300}, 230400, 230},
        {"dpt 25", method::PromptDeep{25}, 230400, 230},
        {"prefix 24", method::Prefix{24}, 221184, 221},
        {"bitfit", method::BitFit{}, 101376, 102},
        {"bottleneck r12", method::Bottleneck{.r = 12}, 248976, 249},
        {"houlsby r12", method::Bottleneck{.r = 12, .config = AdapterConfig::Houlsby}, 497952, 498},
    };
    for (const auto& r : rows) {
      const std::size_t n = count(r.m);
      v.require(n == r.exact, std::string(r.name) + " = " + std::to_string(n));
      const double diff = std::fabs(static_cast<double>(n) / 1000.0 - static_cast<double>(r.published_k));
      v.require(diff < 1.0, std::string(r.name) + " not within rounding of " + std::to_string(r.published_k) + "K");
    }
    const std::size_t k1 = count(method::Conformer{.r = 8, .k = 1});
    for (std::size_t k = 1; k <= 31; ++k)
      v.require(count(method::Conformer{.r = 8, .k = k}) == k1 + 12 * 8 * (k - 1), "conformer affine in k");
    const std::size_t delta = count(method::Conformer{.r = 8, .k = 31}) - k1;
    v.require(delta == 2880, "k31 - k1 delta");
    v.detail << " seven budgets exact; conformer k31-k1 delta " << delta
             << "; conformer r8 k31 = " << count(method::Conformer{.r = 8, .k = 31}) << " (published 271K flagged, not asserted)";
  });

  report(2, "percent of full", [](Verdict& v) {
    ex::ExperimentConfig c;
    c.backbone = BackboneConfig::full_scale();
    auto at = [&](const PetlMethod& m) {
      c.method = m;
      return ex::cmd_count(c).percent_of_full;
    };
    const double bp = at(method::Bottleneck{.r = 12});
    const double bh = at(method::Bottleneck{.r = 12, .config = AdapterConfig::Houlsby});
    const double cp = at(method::Conformer{.r = 8, .k = 8});
    const double ch = at(method::Conformer{.r = 8, .k = 8, .config = AdapterConfig::Houlsby});
    const double c31 = at(method::Conformer{.r = 8, .k = 31});
    v.require(accounting::sig2(bp) == "0.29", "bottleneck pfeiffer " + accounting::sig2(bp));
    v.require(accounting::sig2(cp) == "0.29", "conformer pfeiffer " + accounting::sig2(cp));
    for (double h : {bh, ch}) {
      const auto s = accounting::sig2(h);
      v.require(s == "0.58" || s == "0.59", "houlsby " + s);
    }
    v.detail << " bottleneck " << accounting::sig2(bp) << "/" << accounting::sig2(bh) << "%, conformer k8 "
             << accounting::sig2(cp) << "/" << accounting::sig2(ch) << "%, conformer k31 (informational) "
             << accounting::sig2(c31) << "%";
  });

  report(3, "no-op initialization", [](Verdict& v) {
    const auto cfg = BackboneConfig::desk();
    std::mt19937_64 rng(3);
    const Tensor x = rand_tensor({4, cfg.patch.freq_bins, cfg.patch.time_bins}, rng);
    auto logits = [&](Model& m) {
      NoGradScope ng;
      return m.logits(x, false);
    };
    Model frozen(cfg, method::LinearProbe{}, 11);
    const Tensor base = logits(frozen);
    const PetlMethod methods[] = {
        method::Lora{.r = 4},
        method::Bottleneck{.r = 8},
        method::Bottleneck{.r = 8, .config = AdapterConfig::Houlsby, .mode = AdapterMode::Sequential},
        method::Conformer{.r = 6, .k = 8},
        method::Conformer{.r = 6, .k = 8, .config = AdapterConfig::Houlsby},
    };
    double worst = 0.0;
    for (const auto& m : methods) {
      Model injected(cfg, m, 11);
      const double d = max_abs_diff(logits(injected), base);
      worst = std::max(worst, d);
      v.require(d < 1e-12, describe(m));
    }
    v.detail << " max |dlogits| " << worst << " over " << std::size(methods) << " plans";
  });

  report(4, "gradient correctness", [](Verdict& v) {
    ex::ExperimentConfig c;
    c.probes = 200;
    c.gradcheck_tol = 1e-4;
    double worst = 0.0;
    std::size_t fewest = SIZE_MAX;
    for (const auto& m : ex::all_desk_methods()) {
      const auto out = ex::gradcheck_method(c, m);
      worst = std::max(worst, out.result.max_rel_error);
      fewest = std::min(fewest, out.result.checked);
      v.require(out.passed, out.method);
      v.require(out.result.checked >= 200, out.method + " probes");
    }
    std::mt19937_64 rng(4);
    using Op = Tensor (*)(const Tensor&);
    const std::pair<const char*, Op> unary[] = {
        {"relu", ops::relu}, {"sigmoid", ops::sigmoid}, {"swish", ops::swish}, {"gelu", ops::gelu}, {"glu", ops::glu}};
    double elem = 0.0;
    for (auto [name, op] : unary) {
      Tensor t = rand_tensor({4, 6}, rng, true);
      for (double& val : t.data())
        if (std::fabs(val) < 1e-3) val = 0.5;
      const auto r = finite_difference({t}, [op](const std::vector<Tensor>& in) { return probe(op(in[0])); });
      elem = std::max(elem, r.max_rel);
      v.require(r.max_rel < 1e-6, name);
    }
    v.detail << " 9 variants, >= " << fewest << " coordinates each, max rel " << worst
             << "; elementwise max rel " << elem;
  });

  report(5, "oracle equivalences", [](Verdict& v) {
    std::mt19937_64 rng(5);
    double conv = 0.0;
    for (std::size_t n = 1; n <= 8; ++n)
      for (std::size_t c = 1; c <= 4; ++c)
        for (std::size_t k = 1; k <= 7; ++k) {
          Tensor x = rand_tensor({n, c}, rng), w = rand_tensor({c, k}, rng), b = rand_tensor({c}, rng);
          const auto ref = direct_conv(x, w, b, n, c, k);
          const Tensor y = ops::depthwise_conv1d(x, w, b);
          for (std::size_t i = 0; i < ref.size(); ++i) conv = std::max(conv, std::fabs(y[i] - ref[i]));
        }
    v.require(conv < 1e-12, "depthwise conv grid");

    double lora = 0.0;
    for (int trial = 0; trial < 5; ++trial) {
      Tensor x = rand_tensor({2, 9, 16}, rng), w = rand_tensor({16, 16}, rng), b = rand_tensor({16}, rng);
      LoraState l{rand_tensor({16, 4}, rng), rand_tensor({4, 16}, rng), 8.0};
      lora = std::max(lora, max_abs_diff(lora_qv_forward(x, w, b, l), ops::linear(x, lora_merge(w, l.a, l.b, l.s), b)));
    }
    v.require(lora < 1e-10, "lora merge");

    double hand = 0.0;
    auto check = [&](double got, double want) { hand = std::max(hand, std::fabs(got - want)); };
    check(ops::glu(Tensor::from({1, 2}, {2.0, 0.0}))[0], 1.0);
    check(ops::glu(Tensor::from({1, 2}, {-3.0, std::log(3.0)}))[0], -3.0 * 0.75);
    check(ops::swish(Tensor::from({1}, {0.0}))[0], 0.0);
    check(ops::swish(Tensor::from({1}, {std::log(3.0)}))[0], std::log(3.0) * 0.75);
    const double eps = 1e-5;
    const Tensor ln = ops::layer_norm(Tensor::from({1, 2}, {1.0, 3.0}), Tensor::full({2}, 1.0), Tensor::zeros({2}), eps);
    check(ln[0], -1.0 / std::sqrt(1.0 + eps));
    check(ln[1], 1.0 / std::sqrt(1.0 + eps));
    const Tensor ln2 = ops::layer_norm(Tensor::from({1, 4}, {0.0, 0.0, 4.0, 4.0}), Tensor::full({4}, 2.0),
                                       Tensor::full({4}, 0.5), eps);
    check(ln2[0], 0.5 - 2.0 * 2.0 / std::sqrt(4.0 + eps));
    check(ln2[3], 0.5 + 2.0 * 2.0 / std::sqrt(4.0 + eps));
    v.require(hand < 1e-12, "hand formulas");
    v.detail << " conv grid max " << conv << ", lora merge max " << lora << ", hand cases max " << hand;
  });

  // Shared by criteria 6 and 7.
  std::map<std::string, std::vector<double>> acc;
  std::vector<std::string> frozen_violations;
  std::size_t frozen_runs = 0;
  ex::ExperimentConfig base;
  base.output_dir = work / "transfer";

  report(6, "desk-scale transfer ordering", [&](Verdict& v) {
    fs::create_directories(base.output_dir);
    const auto backbone = ex::cached_pretrain(base, base.output_dir);
    const auto task = harness::gen_synthetic_task(base.task);
    std::vector<std::string> names{"linear"};
    for (const auto& n : ex::petl_method_names()) names.push_back(n);
    for (const auto& name : names) {
      ex::ExperimentConfig rc = ex::with_method(base, ex::default_method(name));
      for (std::uint64_t seed : base.seeds) {
        rc.train.seed = seed;
        const auto out = ex::run_transfer(rc, backbone, task);
        acc[name].push_back(out.result.test.accuracy);
        ++frozen_runs;
        if (out.frozen_hash_before != out.frozen_hash_after) frozen_violations.push_back(name);
      }
    }
    const double lin = mean(acc["linear"]);
    v.detail << " mean test acc:";
    for (const auto& name : names) v.detail << ' ' << name << '=' << pct(mean(acc[name]));
    for (const auto& name : ex::petl_method_names())
      v.require(mean(acc[name]) > lin, "(a) " + name + " vs linear");
    const double margin = mean(acc["conformer"]) - mean(acc["bottleneck"]);
    v.require(margin >= 0.0, "(b) conformer vs bottleneck");
    v.detail << "; conformer-bottleneck margin " << pct(margin);

    ex::ExperimentConfig fc = ex::with_method(base, ex::default_method("conformer"));
    const auto rows = ex::cmd_fewshot(fc, std::cerr);
    const auto summary = ex::summarize(rows);
    v.detail << "; conformer few-shot";
    double prev = -1.0;
    for (const auto& s : summary) {
      v.detail << ' ' << s.shots << "-shot=" << pct(s.acc.mean);
      v.require(s.acc.mean >= prev, "(c) few-shot non-decreasing at " + std::to_string(s.shots));
      prev = s.acc.mean;
    }
  });

  report(7, "freeze integrity", [&](Verdict& v) {
    const auto backbone = ex::cached_pretrain(base, base.output_dir);
    auto task_spec = base.task;
    task_spec.samples_per_class = 12;
    const auto task = harness::gen_synthetic_task(task_spec);
    const PetlMethod extra[] = {
        method::Lora{.r = 4, .target_v = false},
        method::Bottleneck{.r = 8, .config = AdapterConfig::Houlsby, .mode = AdapterMode::Sequential},
        method::Conformer{.r = 6, .k = 31, .config = AdapterConfig::Houlsby},
    };
    for (const auto& m : extra) {
      ex::ExperimentConfig rc = ex::with_method(base, m);
      rc.train.epochs = 2;
      const auto out = ex::run_transfer(rc, backbone, task);
      ++frozen_runs;
      if (out.frozen_hash_before != out.frozen_hash_after) frozen_violations.push_back(describe(m));
    }
    for (const auto& name : frozen_violations) v.require(false, name);
    v.require(frozen_runs >= 3, "no runs recorded");
    v.detail << " frozen hash unchanged across " << frozen_runs - frozen_violations.size() << "/" << frozen_runs
             << " runs";
  });

  report(8, "determinism", [&](Verdict& v) {
    const std::string args = "train --method conformer --epochs 3 --pretrain-epochs 1 --seed 4 --output-dir ";
    const fs::path a = work / "det_a", b = work / "det_b";
    v.require(run_cli(args + "\"" + a.string() + "\"", work / "det_a.log") == 0, "first run");
    v.require(run_cli(args + "\"" + b.string() + "\"", work / "det_b.log") == 0, "second run");
    const std::string ma = slurp(a / "metrics.csv"), mb = slurp(b / "metrics.csv");
    v.require(!ma.empty() && ma == mb, "metrics.csv differs");
    v.detail << " metrics.csv " << ma.size() << " bytes, identical=" << (ma == mb ? "yes" : "no");
  });

  report(9, "sweep protocols", [&](Verdict& v) {
    const std::string reduced = " --epochs 4 --pretrain-epochs 2 --seeds 0";
    const fs::path kdir = work / "sweep_kernel", bdir = work / "sweep_budget";
    v.require(run_cli("sweep-kernel --k-list 1,3,8,15,31" + reduced + " --output-dir \"" + kdir.string() + "\"",
                      work / "kernel.log") == 0,
              "sweep-kernel exit");
    const auto krows = ex::read_csv(kdir / "sweep_kernel.csv", ex::kKernelCsv);
    std::set<std::string> ks;
    for (const auto& r : krows) ks.insert(r[0]);
    v.require(ks == std::set<std::string>{"1", "3", "8", "15", "31"}, "kernel set");
    v.require(krows.size() == 10, "kernel rows");

    v.require(run_cli("sweep-budget --budget-methods lora,bottleneck,conformer" + reduced + " --output-dir \"" +
                          bdir.string() + "\"",
                      work / "budget.log") == 0,
              "sweep-budget exit");
    const auto brows = ex::read_csv(bdir / "sweep_budget.csv", ex::kBudgetCsv);
    std::map<std::string, std::set<std::string>> targets;
    for (const auto& r : brows) {
      targets[r[1]].insert(r[0]);
      v.require(std::stoull(r[3]) <= std::stoull(r[0]), "params <= target for " + r[1]);
    }
    v.require(targets.size() >= 3, "methods");
    for (const auto& [m, t] : targets) v.require(t.size() >= 5, m + " targets");
    v.detail << " kernel rows " << krows.size() << ", budget rows " << brows.size() << " over " << targets.size()
             << " methods (reduced epochs)";
  });

  std::printf("%d of 9 criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
