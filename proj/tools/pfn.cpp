// Command-line front end: train, eval, inspect, gen-data, gradcheck.

#include "pfn/config.hpp"
#include "pfn/evaluate.hpp"
#include "pfn/grad_suite.hpp"
#include "pfn/synth.hpp"
#include "pfn/train.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

using namespace pfn;
namespace fs = std::filesystem;

namespace {

struct Overrides {
  std::string config_file;
  std::vector<std::string> sets;

  void add_to(CLI::App* app) {
    app->add_option("-c,--config", config_file, "key = value file; its settings override every flag")
        ->check(CLI::ExistingFile);
    app->add_option("--set", sets, "override one option, e.g. --set model.scales=3 (repeatable)");
  }

  void apply_sets(TrainConfig& cfg) const {
    for (const std::string& kv : sets) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
      set_option(cfg, kv.substr(0, eq), kv.substr(eq + 1));
    }
  }

  void apply_file(TrainConfig& cfg) const {
    if (!config_file.empty()) apply_config_file(cfg, config_file);
  }

  // Task named by the config file or --set, if any; recipe defaults depend on it.
  std::optional<Task> task() const {
    TrainConfig probe;
    probe.task = Task::Depth;
    apply_sets(probe);
    apply_file(probe);
    if (probe.task != Task::Depth) return probe.task;
    TrainConfig other;
    other.task = Task::Segmentation;
    apply_sets(other);
    apply_file(other);
    if (other.task != Task::Segmentation) return other.task;
    return std::nullopt;
  }
};

fs::path run_root() {
  const char* env = std::getenv("PFN_RUN_ROOT");
  return env && *env ? fs::path(env) : fs::path("runs");
}

Task parse_task(const std::string& s) {
  if (s == "depth") return Task::Depth;
  if (s == "segmentation") return Task::Segmentation;
  throw ConfigError("unknown task '" + s + "'");
}

int cmd_train(const std::string& task_flag, const Overrides& ov, const std::optional<int>& iters,
              const std::optional<double>& lr, const std::optional<std::uint64_t>& seed,
              const std::optional<int>& scenes, const std::string& pose, const std::string& run_dir,
              const std::string& name, const std::string& resume, int log_every, bool print_config) {
  std::optional<Trainer> trainer;
  TrainConfig cfg;
  if (!resume.empty()) {
    cfg = read_checkpoint_config(resume);
    if (iters) cfg.max_iter = *iters;
    trainer.emplace(cfg);
    trainer->load_checkpoint(resume);
  } else {
    cfg = TrainConfig::defaults(ov.task().value_or(parse_task(task_flag)));
    if (iters) cfg.max_iter = *iters;
    if (lr) cfg.lr = *lr;
    if (seed) cfg.seed = *seed;
    if (scenes) cfg.data.scenes = *scenes;
    if (!pose.empty()) set_option(cfg, "pose_source", pose);
    ov.apply_sets(cfg);
    ov.apply_file(cfg);
    cfg.validate();
  }
  if (print_config) {
    std::cout << to_json_string(cfg) << "\n";
    return 0;
  }
  const fs::path dir = !run_dir.empty() ? fs::path(run_dir)
                                        : run_root() / (name.empty() ? to_string(cfg.task) + "-" + config_hash(cfg).substr(0, 8)
                                                                     : name);
  if (!trainer) trainer.emplace(cfg);
  std::printf("run directory %s\n", dir.string().c_str());
  std::printf("%zu training and %zu held-out triplets, %d steps from iteration %d\n", trainer->data().train.size(),
              trainer->data().held_out.size(), cfg.max_iter, trainer->iteration());
  const TrainSummary s = trainer->run(dir, [&](const StepLog& l) {
    if (log_every > 0 && (l.step % log_every == 0 || l.step == cfg.max_iter)) {
      if (cfg.task == Task::Depth) {
        std::printf("step %5d  loss %.5f  photometric %.5f  mask %.3f  |g| %.3f\n", l.step, l.loss, l.photometric,
                    l.automask_fraction, l.grad_norm);
      } else {
        std::printf("step %5d  loss %.5f  accuracy %.4f  lr %.2e  |g| %.3f\n", l.step, l.loss, l.pixel_accuracy,
                    l.lr, l.grad_norm);
      }
      std::fflush(stdout);
    }
  });
  std::printf("done: %d steps, final loss %.6f, clipped %.1f%% of steps, %.1f s\n", s.steps, s.final_loss,
              100.0 * s.clip_fraction, s.seconds);
  return 0;
}

int cmd_eval(const std::string& checkpoint, const std::string& data_dir, const std::string& split, bool no_median,
             bool no_temporal, double cap, const std::string& out, const Overrides& ov) {
  const TrainConfig stored = read_checkpoint_config(checkpoint);
  std::optional<PfnConfig> expected;
  if (!ov.config_file.empty() || !ov.sets.empty()) {
    TrainConfig want = TrainConfig::defaults(stored.task);
    ov.apply_sets(want);
    ov.apply_file(want);
    expected = want.model;
  }
  std::vector<FrameTriplet> frames;
  if (!data_dir.empty()) {
    frames = load_triplets(data_dir);
  } else {
    TripletData d = load_data(stored.data);
    if (split == "train") frames = std::move(d.train);
    else if (split == "held_out") frames = std::move(d.held_out);
    else throw ConfigError("--split must be train or held_out");
  }
  EvalOptions opts;
  opts.median_scaling = !no_median;
  opts.temporal = !no_temporal;
  opts.cap = cap;
  const EvalRun run = evaluate_checkpoint(checkpoint, frames, opts, expected);
  const fs::path dir = out.empty() ? fs::path(checkpoint) / "eval" : fs::path(out);
  write_eval_report(dir, run, opts);
  std::printf("%zu frames, task %s%s\n", frames.size(), to_string(stored.task).c_str(),
              stored.task == Task::Depth ? (opts.median_scaling ? ", median scaling" : ", absolute scale") : "");
  std::cout << eval_summary(run);
  std::printf("report written to %s\n", dir.string().c_str());
  return 0;
}

int cmd_inspect(const Overrides& ov, bool as_json) {
  TrainConfig cfg;
  ov.apply_sets(cfg);
  ov.apply_file(cfg);
  std::cout << (as_json ? inspect_json(cfg.model) + "\n" : inspect_table(cfg.model));
  return 0;
}

int cmd_gen_data(const std::string& out, std::size_t count, std::uint64_t seed, const Overrides& ov) {
  TrainConfig cfg;
  ov.apply_sets(cfg);
  ov.apply_file(cfg);
  cfg.data.synth.validate();
  const SyntheticDataset ds(cfg.data.synth, count, seed);
  std::vector<FrameTriplet> triplets(ds.begin(), ds.end());
  export_triplets(out, triplets);
  std::printf("wrote %zu triplets (%dx%d) to %s\n", triplets.size(), cfg.data.synth.height, cfg.data.synth.width,
              out.c_str());
  return 0;
}

int cmd_gradcheck() {
  int failed = 0;
  double total = 0;
  std::printf("%-28s %12s %10s %8s\n", "check", "max rel err", "tolerance", "seconds");
  const auto entries = run_gradient_suite([&](const GradSuiteEntry& e) {
    std::printf("%-28s %12.3e %10.0e %8.2f  %s\n", e.name.c_str(), e.result.max_rel_error, e.tolerance, e.seconds,
                e.passed() ? "ok" : ("FAIL " + e.result.worst).c_str());
    std::fflush(stdout);
    failed += !e.passed();
    total += e.seconds;
  });
  std::printf("%zu checks, %d failed, %.1f s\n", entries.size(), failed, total);
  return failed ? 1 : 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Fractal pyramid networks: training, evaluation and inspection"};
  app.require_subcommand(1);

  std::string task = "depth", pose, run_dir, name, resume;
  std::optional<int> iters, scenes;
  std::optional<double> lr;
  std::optional<std::uint64_t> seed;
  int log_every = 10;
  bool print_config = false, list_options = false;
  Overrides train_ov;
  CLI::App* train = app.add_subcommand("train", "train a model; writes a run directory");
  train->add_option("--task", task, "depth or segmentation")->capture_default_str();
  train->add_option("--iters", iters, "step budget (max_iter)");
  train->add_option("--lr", lr, "base learning rate");
  train->add_option("--seed", seed, "initialisation and data-order seed");
  train->add_option("--scenes", scenes, "synthetic training scenes");
  train->add_option("--pose", pose, "learned or ground_truth (depth only)");
  train->add_option("--run-dir", run_dir, "output directory (default $PFN_RUN_ROOT/<name>, root defaults to ./runs)");
  train->add_option("--name", name, "run name under the run root");
  train->add_option("--resume", resume, "continue from a checkpoint with its stored config; --iters may raise the budget")
      ->check(CLI::ExistingDirectory);
  train->add_option("--log-every", log_every, "print every N steps, 0 for silence")->capture_default_str();
  train->add_flag("--print-config", print_config, "print the resolved config as JSON and exit");
  train->add_flag("--list-options", list_options, "print every settable key with its default and exit");
  train_ov.add_to(train);

  std::string checkpoint, data_dir, split = "held_out", out;
  bool no_median = false, no_temporal = false;
  double cap = 80.0;
  Overrides eval_ov;
  CLI::App* eval = app.add_subcommand("eval", "score a checkpoint on synthetic or exported triplets");
  eval->add_option("--checkpoint", checkpoint, "checkpoint directory")->required()->check(CLI::ExistingDirectory);
  eval->add_option("--data", data_dir, "exported triplet directory (default: regenerate from the checkpoint config)");
  eval->add_option("--split", split, "train or held_out, for regenerated data")->capture_default_str();
  eval->add_flag("--no-median-scaling", no_median, "score depth at absolute scale");
  eval->add_flag("--no-temporal", no_temporal, "skip TAC/TRC");
  eval->add_option("--cap", cap, "depth cap")->capture_default_str();
  eval->add_option("--out", out, "report directory (default <checkpoint>/eval)");
  eval_ov.add_to(eval);
  eval->footer("--config/--set describe the expected model; a checkpoint that differs is rejected.");

  bool as_json = false;
  Overrides inspect_ov;
  CLI::App* inspect = app.add_subcommand("inspect", "graph statistics for a model config");
  inspect->add_flag("--json", as_json, "emit JSON");
  inspect_ov.add_to(inspect);

  std::string gen_out;
  std::size_t count = 16;
  std::uint64_t gen_seed = 1;
  Overrides gen_ov;
  CLI::App* gen = app.add_subcommand("gen-data", "render synthetic triplets to disk");
  gen->add_option("--out", gen_out, "output directory")->required();
  gen->add_option("--count", count, "number of triplets")->capture_default_str();
  gen->add_option("--seed", gen_seed, "dataset seed")->capture_default_str();
  gen_ov.add_to(gen);

  CLI::App* grad = app.add_subcommand("gradcheck", "finite-difference check of every op and a small network");

  CLI11_PARSE(app, argc, argv);
  try {
    if (train->parsed()) {
      if (list_options) {
        std::cout << describe_options(TrainConfig::defaults(parse_task(task)));
        return 0;
      }
      return cmd_train(task, train_ov, iters, lr, seed, scenes, pose, run_dir, name, resume, log_every, print_config);
    }
    if (eval->parsed()) return cmd_eval(checkpoint, data_dir, split, no_median, no_temporal, cap, out, eval_ov);
    if (inspect->parsed()) return cmd_inspect(inspect_ov, as_json);
    if (gen->parsed()) return cmd_gen_data(gen_out, count, gen_seed, gen_ov);
    if (grad->parsed()) return cmd_gradcheck();
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
