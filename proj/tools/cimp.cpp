// cimp: staged and end-to-end class-incremental runs.
//
//   cimp gen-data       --config desk.toml
//   cimp train-initial  --config desk.toml --seeds 1,2
//   cimp synthesize     --config desk.toml --task 2
//   cimp increment      --config desk.toml --task 2
//   cimp evaluate       --config desk.toml --task 2 | --checkpoint PATH
//   cimp run            --config desk.toml --strategy finetune --seeds 1
//   cimp compare        --out cmp runs/full runs/finetune

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "cimp/allocator.hpp"
#include "cimp/config.hpp"
#include "cimp/engine.hpp"
#include "cimp/error.hpp"
#include "cimp/report.hpp"

namespace fs = std::filesystem;
using namespace cimp;

namespace {

enum Exit : int {
  kOk = 0,
  kOther = 1,
  kConfig = 2,
  kData = 3,
  kNumeric = 4,
  kDependency = 5,
};

int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Config:
      return kConfig;
    case ErrorKind::Dataset:
    case ErrorKind::Label:
    case ErrorKind::Format:
      return kData;
    case ErrorKind::Numeric:
    case ErrorKind::DegenerateNorm:
      return kNumeric;
    case ErrorKind::Dependency:
    case ErrorKind::MissingPrototype:
    case ErrorKind::ReplayCoverage:
      return kDependency;
    default:
      return kOther;
  }
}

struct CommonFlags {
  std::string config;
  std::string profile;
  std::string strategy;
  std::string ablate;
  std::string seeds;
  std::string out;
};

void add_common(CLI::App* cmd, CommonFlags& f) {
  cmd->add_option("--config", f.config, "TOML experiment config")->check(CLI::ExistingFile);
  cmd->add_option("--profile", f.profile, "hyper-parameter profile (paper-supp-t2, sane, paper-3.1)");
  cmd->add_option("--strategy", f.strategy, "full, finetune, distill-only or oracle");
  cmd->add_option("--ablate", f.ablate, "comma list of no-contrastive, no-margin, noise-init");
  cmd->add_option("--seeds", f.seeds, "comma-separated master seeds");
  cmd->add_option("--out", f.out, "run directory");
}

ExperimentConfig resolve(const CommonFlags& f) {
  ConfigOverrides o;
  if (!f.profile.empty()) o.profile = f.profile;
  if (!f.strategy.empty()) o.strategy = parse_strategy(f.strategy);
  if (!f.ablate.empty()) o.ablation = Ablation::parse(f.ablate);
  if (!f.seeds.empty()) o.seeds = parse_seed_list(f.seeds);
  if (!f.out.empty()) o.out = fs::path(f.out);
  return f.config.empty() ? default_config(o) : load_config(f.config, o);
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::trunc);
  require(static_cast<bool>(f), ErrorKind::Io, "cannot write " + path.string());
  f << j.dump(2) << '\n';
}

nlohmann::json read_json(const fs::path& path) {
  std::ifstream f(path);
  require(static_cast<bool>(f), ErrorKind::Dependency, "missing " + path.string());
  try {
    return nlohmann::json::parse(f);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Format, path.string() + ": " + e.what());
  }
}

fs::path seed_dir(const ExperimentConfig& cfg, std::uint64_t seed) {
  return cfg.out / ("seed_" + std::to_string(seed));
}

// Staged commands add their draws to whatever earlier commands recorded.
void merge_seed_ledger(const fs::path& dir, const SeedLedger& ledger) {
  nlohmann::json derived = nlohmann::json::object();
  if (fs::exists(dir / "seeds.json")) derived = read_json(dir / "seeds.json").value("derived", derived);
  for (const auto& [k, v] : ledger.entries) derived[k] = v;
  write_json(dir / "seeds.json", {{"master", ledger.master}, {"derived", derived}});
}

std::mutex g_print;

void say(const std::string& line) {
  std::lock_guard lock(g_print);
  std::cout << line << std::endl;
}

// Runs `fn` once per seed; independent seeds run concurrently up to the
// thread budget. The first failure is rethrown after every worker joins.
template <class Fn>
void for_each_seed(const ExperimentConfig& cfg, Fn fn) {
  const auto& seeds = cfg.seeds;
  const int workers = engine_threads(std::min(static_cast<int>(seeds.size()), std::max(1, cfg.engine.threads)));
  std::atomic<std::size_t> next{0};
  std::exception_ptr first;
  std::mutex err_mu;
  auto work = [&] {
    for (std::size_t i = next++; i < seeds.size(); i = next++) {
      try {
        fn(seeds[i]);
      } catch (...) {
        std::lock_guard lock(err_mu);
        if (!first) first = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  for (int w = 1; w < workers; ++w) pool.emplace_back(work);
  work();
  for (auto& t : pool) t.join();
  if (first) std::rethrow_exception(first);
}

// Everything a command needs about the data, built once per invocation.
struct Context {
  ExperimentConfig cfg;
  DatasetManifest manifest;
  DataView data;
  TaskSchedule schedule;

  explicit Context(ExperimentConfig c) : cfg(std::move(c)) {
    manifest = materialize_data(cfg.data);
    data = make_data_view(manifest, cfg.data.split);
    schedule = build_schedule(manifest, cfg.schedule);
    write_json(cfg.out / "config.json", cfg.to_json());
    std::ofstream(cfg.out / "config.toml", std::ios::trunc) << cfg.to_toml();
  }
  Context(const Context&) = delete;

  EngineConfig engine(std::uint64_t seed) const {
    EngineConfig e = engine_for(cfg, manifest, seed);
    // Seeds already fan out across the budget; each run gets what is left.
    e.threads = std::max(1, engine_threads(cfg.engine.threads) / static_cast<int>(cfg.seeds.size()));
    return e;
  }
  RunOutput output(std::uint64_t seed) const {
    return RunOutput{seed_dir(cfg, seed), cfg.write_impressions, cfg.write_step_metrics};
  }
  // 1-based task number as given on the command line.
  std::size_t task_index(int task, int first) const {
    require(task >= first && task <= static_cast<int>(schedule.tasks.size()), ErrorKind::Config,
            "--task: expected " + std::to_string(first) + ".." + std::to_string(schedule.tasks.size()) + ", got " +
                std::to_string(task));
    return static_cast<std::size_t>(task - 1);
  }
};

nlohmann::json eval_json(const TaskMetrics& m) {
  nlohmann::json j = to_json(m);
  for (const char* k : {"epoch_losses", "train_accuracy", "replay_quota"}) j.erase(k);
  return j;
}

std::string percent(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.1f%%", 100.0 * v);
  return buf;
}

int cmd_gen_data(const CommonFlags& flags) {
  const ExperimentConfig cfg = resolve(flags);
  const DatasetManifest m = materialize_data(cfg.data);
  const fs::path path = write_manifest(m, cfg.out / "data", cfg.data.format);
  write_json(cfg.out / "data" / "corpus.json", {{"corpus_sha256", corpus_hash(m)}, {"rows", m.rows.size()}});
  say("wrote " + path.string() + " (" + std::to_string(m.rows.size()) + " images)");
  return kOk;
}

int cmd_train_initial(const CommonFlags& flags) {
  const Context ctx(resolve(flags));
  for_each_seed(ctx.cfg, [&](std::uint64_t seed) {
    const EngineConfig e = ctx.engine(seed);
    const RunOutput out = ctx.output(seed);
    fs::create_directories(out.dir);
    fs::remove(out.dir / "metrics.jsonl");
    fs::remove(out.dir / "seeds.json");
    write_json(out.dir / "config.json", e.to_json());
    const ExperimentState s = run_initial_task(ctx.data, ctx.schedule, e, out);
    merge_seed_ledger(out.dir, s.seeds);
    say("seed " + std::to_string(seed) + ": task 1 accuracy " + percent(s.metrics.back().average_accuracy));
  });
  return kOk;
}

int cmd_synthesize(const CommonFlags& flags, int task) {
  const Context ctx(resolve(flags));
  const std::size_t t = ctx.task_index(task, 2);
  for_each_seed(ctx.cfg, [&](std::uint64_t seed) {
    const EngineConfig e = ctx.engine(seed);
    require(uses_replay(e), ErrorKind::Config,
            "strategy " + std::string(to_string(e.strategy)) + " does not synthesize impressions");
    const fs::path dir = seed_dir(ctx.cfg, seed);
    ExperimentState s = load_experiment_state(dir, static_cast<int>(t), seed);
    const int quota = task_replay_quota(e, ctx.data, ctx.schedule, t);
    const SynthesisConfig sc = task_synthesis_config(e, ctx.data, t);
    const std::uint64_t synth_seed = s.seeds.draw("synthesis", static_cast<std::uint64_t>(task));
    const ClassImpressionSet set = synthesize(s.model, s.means, s.model.seen_classes, quota, sc, synth_seed);
    const fs::path target = dir / "impressions" / ("task_" + std::to_string(task));
    fs::remove_all(target);
    save_impressions(set, target, PreviewOptions{ctx.data.norm.mean, ctx.data.norm.std, 8});
    merge_seed_ledger(dir, s.seeds);
    say("seed " + std::to_string(seed) + ": " + std::to_string(set.classes.size()) + " classes x " +
        std::to_string(quota) + " impressions -> " + target.string());
  });
  return kOk;
}

int cmd_increment(const CommonFlags& flags, int task) {
  const Context ctx(resolve(flags));
  const std::size_t t = ctx.task_index(task, 2);
  for_each_seed(ctx.cfg, [&](std::uint64_t seed) {
    const EngineConfig e = ctx.engine(seed);
    const RunOutput out = ctx.output(seed);
    ExperimentState s = load_experiment_state(out.dir, static_cast<int>(t), seed);
    std::optional<ClassImpressionSet> stored;
    const fs::path imp = out.dir / "impressions" / ("task_" + std::to_string(task));
    if (uses_replay(e) && fs::exists(imp / "manifest.json")) stored = load_impressions(imp);
    run_incremental_task(s, ctx.data, ctx.schedule, t, e, out, nullptr, stored ? &*stored : nullptr);
    merge_seed_ledger(out.dir, s.seeds);
    say("seed " + std::to_string(seed) + ": task " + std::to_string(task) + " accuracy " +
        percent(s.metrics.back().average_accuracy) + (stored ? " (stored impressions)" : ""));
  });
  return kOk;
}

// The task a checkpoint belongs to: the one whose seen classes it holds.
std::size_t infer_task(const TaskSchedule& schedule, const ModelState& model) {
  std::vector<int> seen = model.seen_classes;
  std::sort(seen.begin(), seen.end());
  for (std::size_t t = 0; t < schedule.tasks.size(); ++t) {
    std::vector<int> c = schedule.classes_through(t);
    std::sort(c.begin(), c.end());
    if (c == seen) return t;
  }
  fail(ErrorKind::Label, "checkpoint classes do not match any prefix of the schedule");
}

int cmd_evaluate(const CommonFlags& flags, int task, const std::string& checkpoint) {
  const Context ctx(resolve(flags));
  require(task > 0 || !checkpoint.empty(), ErrorKind::Config, "evaluate: give --task or --checkpoint");
  require(task == 0 || checkpoint.empty(), ErrorKind::Config, "evaluate: --task and --checkpoint are exclusive");
  auto report = [&](const ModelState& model, const fs::path& dest) {
    const std::size_t t = infer_task(ctx.schedule, model);
    TaskMetrics m = evaluate(model, ctx.data, ctx.schedule, t);
    m.checkpoint_hash = fingerprint(model);
    write_json(dest, eval_json(m));
    say("task " + std::to_string(t + 1) + ": accuracy " + percent(m.average_accuracy) + " over " +
        std::to_string(m.seen_classes.size()) + " classes -> " + dest.string());
  };
  if (!checkpoint.empty()) {
    require(fs::exists(checkpoint), ErrorKind::Dependency, "missing " + checkpoint);
    report(load_checkpoint(checkpoint), ctx.cfg.out / ("eval_" + fs::path(checkpoint).stem().string() + ".json"));
    return kOk;
  }
  ctx.task_index(task, 1);
  for_each_seed(ctx.cfg, [&](std::uint64_t seed) {
    const fs::path dir = seed_dir(ctx.cfg, seed);
    const fs::path ckpt = dir / ("task_" + std::to_string(task)) / "checkpoint.cimp";
    require(fs::exists(ckpt), ErrorKind::Dependency,
            "missing " + ckpt.string() + ": run task " + std::to_string(task) + " first");
    report(load_checkpoint(ckpt), dir / ("eval_task_" + std::to_string(task) + ".json"));
  });
  return kOk;
}

int cmd_run(const CommonFlags& flags) {
  const Context ctx(resolve(flags));
  std::vector<MetricsReport> runs(ctx.cfg.seeds.size());
  for_each_seed(ctx.cfg, [&](std::uint64_t seed) {
    const auto i = static_cast<std::size_t>(std::find(ctx.cfg.seeds.begin(), ctx.cfg.seeds.end(), seed) -
                                            ctx.cfg.seeds.begin());
    RunCache cache;
    runs[i] = run_schedule(ctx.data, ctx.schedule, ctx.engine(seed), ctx.output(seed), &cache);
    say("seed " + std::to_string(seed) + ": final accuracy " + percent(runs[i].final_average_accuracy()) +
        ", forgetting " + percent(runs[i].forgetting()));
  });
  emit_report(runs, ctx.cfg.out);
  std::cout << summary_text(runs);
  return kOk;
}

// Rebuilds the per-seed reports of a finished run from its report.json.
CurveSet load_curves(const fs::path& dir) {
  const nlohmann::json j = read_json(dir / "report.json");
  require(j.value("schema_version", 0) == kReportSchemaVersion, ErrorKind::Format,
          (dir / "report.json").string() + ": unsupported schema version");
  CurveSet set;
  for (const auto& r : j.at("runs")) {
    MetricsReport m;
    m.strategy = parse_strategy(j.at("strategy").get<std::string>());
    m.ablation = Ablation::parse(j.value("ablation", std::string()));
    m.seed = r.at("seed").get<std::uint64_t>();
    for (const auto& t : r.at("tasks")) m.tasks.push_back(task_metrics_from_json(t));
    set.runs.push_back(std::move(m));
  }
  require(!set.runs.empty(), ErrorKind::Format, (dir / "report.json").string() + ": no runs");
  set.label = j.at("strategy").get<std::string>();
  if (set.runs.front().ablation.any()) set.label += " " + set.runs.front().ablation.to_string();
  return set;
}

int cmd_compare(const std::vector<std::string>& dirs, const std::string& out) {
  std::vector<CurveSet> sets;
  nlohmann::json table = nlohmann::json::array();
  for (const auto& d : dirs) {
    sets.push_back(load_curves(d));
    table.push_back({{"label", sets.back().label},
                     {"run_dir", d},
                     {"final_average_accuracy", mean_final_accuracy(sets.back().runs)},
                     {"forgetting", mean_forgetting(sets.back().runs)}});
    say(sets.back().label + ": final " + percent(mean_final_accuracy(sets.back().runs)) + ", forgetting " +
        percent(mean_forgetting(sets.back().runs)));
  }
  fs::create_directories(out);
  plot_average_accuracy(sets, fs::path(out) / "comparison.png");
  write_json(fs::path(out) / "comparison.json", table);
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  retain_heap_memory();
  CLI::App app{"class-incremental learning with synthesized class impressions"};
  app.require_subcommand(1);

  CommonFlags flags;
  int task = 0;
  std::string checkpoint;
  std::vector<std::string> compare_dirs;
  std::string compare_out = "comparison";

  auto* gen = app.add_subcommand("gen-data", "write the configured dataset as images plus manifest.csv");
  auto* init = app.add_subcommand("train-initial", "train task 1 and record class means");
  auto* synth = app.add_subcommand("synthesize", "synthesize impressions of the old classes for a task");
  auto* inc = app.add_subcommand("increment", "run one incremental task (uses stored impressions when present)");
  auto* eval = app.add_subcommand("evaluate", "test accuracy of a checkpoint over its seen classes");
  auto* run = app.add_subcommand("run", "run the whole schedule for every seed and write the report");
  auto* cmp = app.add_subcommand("compare", "plot average accuracy of several finished runs");
  for (auto* c : {gen, init, synth, inc, eval, run}) add_common(c, flags);
  for (auto* c : {synth, inc}) c->add_option("--task", task, "1-based task number")->required();
  eval->add_option("--task", task, "1-based task number");
  eval->add_option("--checkpoint", checkpoint, "checkpoint file to evaluate");
  cmp->add_option("dirs", compare_dirs, "run directories holding report.json")->required();
  cmp->add_option("--out", compare_out, "output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }

  try {
    if (*gen) return cmd_gen_data(flags);
    if (*init) return cmd_train_initial(flags);
    if (*synth) return cmd_synthesize(flags, task);
    if (*inc) return cmd_increment(flags, task);
    if (*eval) return cmd_evaluate(flags, task, checkpoint);
    if (*run) return cmd_run(flags);
    if (*cmp) return cmd_compare(compare_dirs, compare_out);
  } catch (const Error& e) {
    std::cerr << e.what() << '\n';
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kOther;
  }
  return kOther;
}
