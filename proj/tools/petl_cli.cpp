// petl: parameter audits, training runs, gradient checks and ablation sweeps.
//
//   petl count --method lora --r 6 --full-scale
//   petl train --method conformer --epochs 30 --output-dir runs/conf
//   petl gradcheck --all
//   petl sweep-kernel | sweep-budget | fewshot [--jobs N]
//
// Exit codes: 0 success, 1 configuration error, 2 numeric failure.

#include <cstdlib>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "petl/experiment.hpp"

namespace {

using petl::experiment::json;

constexpr int kExitOk = 0;
constexpr int kExitConfig = 1;
constexpr int kExitNumeric = 2;

/// Registers the flat config keys as --flags on `cmd`. Every flag that is
/// given lands in `overrides` under its config key.
void add_config_options(CLI::App* cmd, json& overrides, std::string& config_file) {
  cmd->add_option("-c,--config", config_file, "JSON config file (flat schema)");
  auto str = [&](const char* flag, const char* key, const char* help) {
    cmd->add_option_function<std::string>(flag, [&overrides, key](const std::string& v) { overrides[key] = v; }, help);
  };
  auto num = [&](const char* flag, const char* key, const char* help) {
    cmd->add_option_function<std::size_t>(flag, [&overrides, key](const std::size_t& v) { overrides[key] = v; }, help);
  };
  auto real = [&](const char* flag, const char* key, const char* help) {
    cmd->add_option_function<double>(flag, [&overrides, key](const double& v) { overrides[key] = v; }, help);
  };
  auto list = [&](const char* flag, const char* key, const char* help) {
    cmd->add_option_function<std::vector<std::size_t>>(
           flag, [&overrides, key](const std::vector<std::size_t>& v) { overrides[key] = v; }, help)
        ->delimiter(',');
  };
  str("--method", "method", "full|linear|bitfit|lora|spt|dpt|prefix|bottleneck|conformer");
  num("--r", "r", "rank (LoRA) or bottleneck dimension (adapters)");
  num("--k", "k", "conformer depthwise kernel size");
  num("--p", "p", "prompt or prefix length");
  real("--s", "s", "LoRA scale");
  real("--alpha", "alpha", "LoRA alpha (recorded)");
  str("--lora-targets", "lora_targets", "qv|q|v");
  str("--adapter-config", "adapter_config", "pfeiffer|houlsby");
  str("--adapter-mode", "adapter_mode", "parallel|sequential");
  cmd->add_flag_callback("--houlsby", [&overrides] { overrides["adapter_config"] = "houlsby"; },
                         "shorthand for --adapter-config houlsby");
  cmd->add_flag_callback("--sequential", [&overrides] { overrides["adapter_mode"] = "sequential"; },
                         "shorthand for --adapter-mode sequential");
  cmd->add_flag_callback("--full-scale", [&overrides] { overrides["full_scale"] = true; },
                         "768/12/12 encoder over 128x640 inputs (count only)");
  num("--d", "d", "model width");
  num("--layers", "layers", "encoder layers");
  num("--heads", "heads", "attention heads");
  num("--ff-ratio", "ff_ratio", "feed-forward expansion");
  num("--patch-h", "patch_h", "patch height (frequency)");
  num("--patch-w", "patch_w", "patch width (time)");
  real("--lr", "lr", "initial learning rate (default 0.005, prompt/prefix 0.01)");
  real("--weight-decay", "weight_decay", "decoupled weight decay");
  num("--epochs", "epochs", "training epochs");
  num("--batch-size", "batch_size", "minibatch size");
  num("--seed", "seed", "training seed");
  cmd->add_flag_callback("--record-wall-time", [&overrides] { overrides["record_wall_time"] = true; },
                         "fill the wall_time column (makes metrics.csv run-dependent)");
  num("--n-classes", "n_classes", "synthetic task classes");
  num("--samples-per-class", "samples_per_class", "synthetic items per class");
  num("--freq-bins", "freq_bins", "spectrogram frequency bins");
  num("--time-bins", "time_bins", "spectrogram time frames");
  str("--family", "family", "bands|chirps");
  real("--noise-std", "noise_std", "additive Gaussian noise");
  num("--task-seed", "task_seed", "synthetic task seed");
  num("--pretrain-epochs", "pretrain_epochs", "backbone pretraining epochs (0: random backbone)");
  real("--pretrain-lr", "pretrain_lr", "backbone pretraining learning rate");
  num("--pretrain-seed", "pretrain_seed", "backbone pretraining seed");
  str("--output-dir", "output_dir", "run directory (default $PETL_OUTPUT_ROOT or ./petl_runs)");
  num("--jobs", "jobs", "concurrent runs in sweeps");
  cmd->add_option_function<std::vector<std::size_t>>(
         "--seeds", [&overrides](const std::vector<std::size_t>& v) { overrides["seeds"] = v; },
         "comma-separated seeds")
      ->delimiter(',');
  list("--shots", "shots", "comma-separated shots per class");
  list("--k-list", "k_list", "comma-separated kernel sizes");
  num("--sweep-shots", "sweep_shots", "shots per class in few-shot kernel sweeps");
  list("--targets", "targets", "comma-separated parameter budgets");
  cmd->add_option_function<std::vector<std::string>>(
         "--budget-methods",
         [&overrides](const std::vector<std::string>& v) { overrides["budget_methods"] = v; },
         "comma-separated method families")
      ->delimiter(',');
  num("--probes", "probes", "gradcheck coordinates per method");
  real("--tol", "gradcheck_tol", "gradcheck relative-error tolerance");
  real("--corrupt", "gradcheck_corrupt", "test hook: scale analytic gradients by (1 + x)");
}

petl::experiment::ExperimentConfig resolve(const std::string& config_file, const json& overrides,
                                           const std::string& command) {
  json j = config_file.empty() ? json::object() : petl::experiment::load_json_file(config_file);
  for (const auto& [k, v] : overrides.items()) j[k] = v;
  if (!j.contains("output_dir")) {
    const char* root = std::getenv(petl::experiment::kOutputRootEnv);
    j["output_dir"] = ((root && *root) ? std::string(root) : std::string("petl_runs")) + "/" + command;
  }
  return petl::experiment::from_json(j);
}

int run_gradcheck(const petl::experiment::ExperimentConfig& c, bool all) {
  std::vector<petl::PetlMethod> methods = all ? petl::experiment::all_desk_methods()
                                              : std::vector<petl::PetlMethod>{c.method};
  bool ok = true;
  for (const auto& m : methods) {
    const auto out = petl::experiment::gradcheck_method(c, m);
    std::printf("%-5s %-44s max_rel_err=%.3e probes=%zu\n", out.passed ? "PASS" : "FAIL",
                out.method.c_str(), out.result.max_rel_error, out.result.checked);
    ok = ok && out.passed;
  }
  return ok ? kExitOk : kExitNumeric;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Parameter-efficient transfer learning toolkit"};
  app.require_subcommand(1);
  json overrides = json::object();
  std::string config_file;

  auto* count = app.add_subcommand("count", "print the trainable-parameter census of a method");
  auto* train = app.add_subcommand("train", "pretrain (cached) and adapt one method; writes metrics.csv");
  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference check of autodiff gradients");
  auto* sweep_kernel = app.add_subcommand("sweep-kernel", "conformer kernel-size sweep (full and few-shot)");
  auto* sweep_budget = app.add_subcommand("sweep-budget", "trainable-parameter budget sweep");
  auto* fewshot = app.add_subcommand("fewshot", "few-shot transfer over shots x seeds");
  bool as_json = false, per_module = false, all = false;
  for (auto* cmd : {count, train, gradcheck, sweep_kernel, sweep_budget, fewshot})
    add_config_options(cmd, overrides, config_file);
  count->add_flag("--json", as_json, "print the report as JSON");
  count->add_flag("--per-module", per_module, "include the per-module breakdown");
  gradcheck->add_flag("--all", all, "check all nine method variants");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kExitOk : kExitConfig;
  }

  try {
    auto* cmd = app.get_subcommands().front();
    const auto c = resolve(config_file, overrides, cmd->get_name());
    if (c.full_scale && cmd != count)
      throw petl::ConfigError("--full-scale builds the reference encoder for counting only");
    if (cmd == count) {
      const auto report = petl::experiment::cmd_count(c);
      if (as_json)
        std::cout << petl::accounting::to_json(report).dump(2) << '\n';
      else
        petl::accounting::print_table(std::cout, report, per_module);
      return kExitOk;
    }
    if (cmd == gradcheck) return run_gradcheck(c, all);
    if (cmd == train) petl::experiment::cmd_train(c);
    if (cmd == sweep_kernel) petl::experiment::cmd_sweep_kernel(c);
    if (cmd == sweep_budget) petl::experiment::cmd_sweep_budget(c);
    if (cmd == fewshot) petl::experiment::cmd_fewshot(c);
    std::cout << "outputs in " << c.output_dir.string() << '\n';
    return kExitOk;
  } catch (const petl::NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitConfig;
  }
}
