#include <doctest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>

#include <nlohmann/json.hpp>

#include "cimp/engine.hpp"
#include "cimp/error.hpp"
#include "check.hpp"

using namespace cimp;
using namespace cimp::testing;

namespace {

ErrorKind kind_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.kind();
  }
  FAIL("expected an error");
  return ErrorKind::Contract;
}

struct Fixture {
  DatasetManifest manifest;
  DataView view;
  TaskSchedule schedule;
  EngineConfig cfg;
};

// 8x8 desk data and a tiny network; a full four-task run takes seconds.
Fixture small_fixture(std::uint64_t seed = 1, int per_class = 30) {
  Fixture f;
  DeskSpec ds;
  ds.per_class = per_class;
  ds.height = ds.width = 8;
  ds.seed = seed;
  f.manifest = make_desk_dataset(ds);
  f.view = make_data_view(f.manifest, SplitSpec{0.7, 0.2, 0.1, seed});
  f.schedule = build_schedule(f.manifest, {});
  f.cfg.arch = tiny_arch(8);
  f.cfg.phases = make_profile("sane");
  for (auto& p : f.cfg.phases) {
    p.optim.epochs = 3;
    p.optim.batch_size = 16;
    if (p.synthesis) {
      p.synthesis->steps = 4;
      p.synthesis->batch_size = 16;
      p.synthesis->init_jitter_sigma = 0.1;
    }
  }
  f.cfg.seed = seed;
  return f;
}

std::filesystem::path scratch(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("cimp_test_engine_" + name);
  std::filesystem::remove_all(p);
  return p;
}

ClassImpressionSet fake_impressions(std::vector<int> classes, int count, const ArchDescriptor& arch) {
  ClassImpressionSet s;
  s.quota_per_class = count;
  for (int c : classes) s.classes.push_back({c, random_tensor(arch.input_shape(count), 100 + c), {}});
  return s;
}

}  // namespace

TEST_CASE("strategy, ablation and profile parsing") {
  for (const char* s : {"full", "finetune", "distill-only", "oracle"}) CHECK(to_string(parse_strategy(s)) == s);
  CHECK(kind_of([] { parse_strategy("lwf"); }) == ErrorKind::Config);

  const Ablation a = Ablation::parse("no-margin,noise-init");
  CHECK(!a.no_contrastive);
  CHECK(a.no_margin);
  CHECK(a.noise_init);
  CHECK(a.to_string() == "no-margin,noise-init");
  CHECK(!Ablation::parse("").any());
  CHECK(kind_of([] { Ablation::parse("no-dist"); }) == ErrorKind::Config);

  const auto t2 = make_profile("paper-supp-t2");
  REQUIRE(t2.size() == 4);
  CHECK(!t2[0].synthesis);
  CHECK(t2[0].loss.alpha_dist == 0.0);
  const double bn[] = {0.2, 1.0, 5.0}, tv[] = {0.001, 0.01, 0.01}, total[] = {0.01, 0.1, 0.001};
  const double lr[] = {0.25, 0.05, 0.005}, beta2[] = {0.09, 0.9, 0.009}, margin[] = {0.7, 0.3, 0.3};
  for (int p = 1; p < 4; ++p) {
    const auto& s = *t2[p].synthesis;
    CHECK(s.alpha_bn == bn[p - 1]);
    CHECK(s.alpha_tv == tv[p - 1]);
    CHECK(s.alpha_l2 == tv[p - 1]);
    CHECK(s.alpha_reg_total == total[p - 1]);
    CHECK(s.lr == lr[p - 1]);
    CHECK(s.beta2 == beta2[p - 1]);
    CHECK(s.batch_size == 40);
    CHECK(t2[p].loss.margin == margin[p - 1]);
    CHECK(t2[p].loss.alpha_dist == 5.0);
    CHECK(t2[p].loss.alpha_margin == 1.0);
    CHECK(t2[p].loss.distill_temperature == 2.0);
    CHECK(t2[p].centroid_momentum == 0.99);
    CHECK(t2[p].optim.lr == 0.01);
    CHECK(t2[p].optim.epochs == 30);
    CHECK(t2[p].optim.batch_size == 40);
  }
  for (const auto& p : make_profile("sane"))
    if (p.synthesis) {
      CHECK(p.synthesis->beta2 == 0.999);
      CHECK(p.synthesis->lr == 0.01);
    }
  for (const auto& p : make_profile("paper-3.1"))
    if (p.synthesis) CHECK(p.synthesis->lr == 0.01);
  CHECK(kind_of([] { make_profile("fast"); }) == ErrorKind::Config);
}

TEST_CASE("engine thread cap") {
  ::unsetenv("CI_ENGINE_THREADS");
  CHECK(engine_threads(3) == 3);
  ::setenv("CI_ENGINE_THREADS", "2", 1);
  CHECK(engine_threads(3) == 2);
  ::setenv("CI_ENGINE_THREADS", "8", 1);
  CHECK(engine_threads(3) == 3);
  ::setenv("CI_ENGINE_THREADS", "0", 1);
  CHECK(engine_threads(3) == 1);
  ::setenv("CI_ENGINE_THREADS", "many", 1);
  CHECK(kind_of([] { engine_threads(1); }) == ErrorKind::Config);
  ::unsetenv("CI_ENGINE_THREADS");
}

TEST_CASE("pseudo labels") {
  const ModelState m = perturbed_model(tiny_arch(), {3, 7, 9}, 4);
  const int D = m.feature_dim();

  SUBCASE("prototype match and rescaling") {
    for (int k = 0; k < 3; ++k) {
      Matrix f = m.class_embeddings.row(k);
      CHECK(pseudo_label_features(m, f).labels == std::vector<int>{m.seen_classes[static_cast<std::size_t>(k)]});
      CHECK(pseudo_label_features(m, Matrix(f * 37.5)).labels ==
            std::vector<int>{m.seen_classes[static_cast<std::size_t>(k)]});
    }
  }
  SUBCASE("nearest-cosine oracle") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      const Matrix f = random_matrix(12, D, seed);
      const PseudoLabels p = pseudo_label_features(m, f);
      for (int i = 0; i < f.rows(); ++i) {
        int best = 0;
        double best_cos = -2.0;
        std::vector<double> cos(3);
        for (int k = 0; k < 3; ++k) {
          double dot = 0.0, nf = 0.0, nt = 0.0;
          for (int d = 0; d < D; ++d) {
            dot += f(i, d) * m.class_embeddings(k, d);
            nf += f(i, d) * f(i, d);
            nt += m.class_embeddings(k, d) * m.class_embeddings(k, d);
          }
          cos[static_cast<std::size_t>(k)] = dot / std::sqrt(nf * nt);
          if (cos[static_cast<std::size_t>(k)] > best_cos) {
            best_cos = cos[static_cast<std::size_t>(k)];
            best = k;
          }
        }
        CHECK(p.labels[static_cast<std::size_t>(i)] == m.seen_classes[static_cast<std::size_t>(best)]);
        double z = 0.0;
        for (double c : cos) z += std::exp(m.eta * (c - best_cos));
        CHECK(std::abs(p.confidence[static_cast<std::size_t>(i)] - 1.0 / z) <= 1e-12);
      }
    }
  }
  SUBCASE("image entry point") {
    const Tensor x = random_tensor(tiny_arch().input_shape(5), 9);
    CHECK(pseudo_label(m, x).labels == pseudo_label_features(m, forward_features(m, x)).labels);
  }
}

TEST_CASE("training stream") {
  // 200 rows of new class 2 plus a few rows of classes 0 and 1.
  DatasetManifest dm;
  dm.height = dm.width = 8;
  dm.channels = 1;
  for (int i = 0; i < 220; ++i) {
    const int c = i < 200 ? 2 : i % 2;
    dm.rows.push_back({"r" + std::to_string(i), "", c, i % 10});
    for (int p = 0; p < 64; ++p) dm.pixels.push_back(static_cast<float>((i * 7 + p) % 256) / 255.0f);
  }
  DataView view;
  view.manifest = &dm;
  std::vector<int> new_rows;
  for (int i = 0; i < 200; ++i) new_rows.push_back(i);
  view.split.train = new_rows;
  const std::vector<int> new_classes{2}, old{0, 1};
  CHECK(match_new_quota(view, new_classes) == 200);

  const auto imp = fake_impressions(old, 200, tiny_arch());
  const TrainingStream s = assemble_training_stream(view, new_rows, &imp, old, 200, 40);
  CHECK(s.items.size() == 600);
  CHECK(s.composition() == std::map<int, int>{{0, 200}, {1, 200}, {2, 200}});

  const auto e1 = s.epoch(5), e2 = s.epoch(5), e3 = s.epoch(6);
  std::map<int, int> counts;
  bool same = true, differ = false;
  for (std::size_t b = 0; b < e1.size(); ++b) {
    for (std::size_t i = 0; i < e1[b].size(); ++i) {
      ++counts[e1[b][i].label];
      same = same && e1[b][i].index == e2[b][i].index && e1[b][i].synthesized == e2[b][i].synthesized;
      differ = differ || e1[b][i].index != e3[b][i].index;
    }
  }
  CHECK(e1.size() == 15);
  CHECK(counts == s.composition());
  CHECK(same);
  CHECK(differ);

  SUBCASE("multi-class quota rounds up") {
    view.split.train = {0, 1, 2, 200, 202, 204};  // classes 2,2,2,0,0,0
    const std::vector<int> two{0, 2};
    CHECK(match_new_quota(view, two) == 3);
    view.split.train = {0, 1, 2, 200, 202, 201};  // 3, 2, 1
    const std::vector<int> three{0, 1, 2};
    CHECK(match_new_quota(view, three) == 2);
  }
  SUBCASE("coverage errors") {
    const std::vector<int> more{0, 1, 3};
    CHECK(kind_of([&] { assemble_training_stream(view, new_rows, &imp, more, 200, 40); }) ==
          ErrorKind::ReplayCoverage);
    CHECK(kind_of([&] { assemble_training_stream(view, new_rows, &imp, old, 201, 40); }) ==
          ErrorKind::ReplayCoverage);
  }
  SUBCASE("no replay") {
    const TrainingStream plain = assemble_training_stream(view, new_rows, nullptr, old, 0, 40);
    CHECK(plain.composition() == std::map<int, int>{{2, 200}});
  }
  SUBCASE("single-item tail merges") {
    TrainingStream t;
    t.batch_size = 4;
    for (int i = 0; i < 9; ++i) t.items.push_back({false, i, 0});
    const auto batches = t.epoch(1);
    CHECK(batches.size() == 2);
    CHECK(batches.back().size() == 5);
  }
}

TEST_CASE("initial task separates two classes") {
  Fixture f = small_fixture(2, 40);
  f.cfg.phases[0].optim.epochs = 30;
  const ExperimentState a = run_initial_task(f.view, f.schedule, f.cfg);
  REQUIRE(a.metrics.size() == 1);
  CHECK(a.metrics[0].train_accuracy >= 0.95);
  CHECK(a.means.class_ids() == std::vector<int>{0, 1});
  CHECK(a.model.seen_classes == std::vector<int>{0, 1});
  CHECK(a.completed_tasks == 1);

  const ExperimentState b = run_initial_task(f.view, f.schedule, f.cfg);
  CHECK(fingerprint(a.model) == fingerprint(b.model));
  CHECK(a.metrics[0].checkpoint_hash == fingerprint(a.model));
}

TEST_CASE("full schedule contracts") {
  Fixture f = small_fixture(3);
  const auto dir = scratch("full");
  const MetricsReport r = run_schedule(f.view, f.schedule, f.cfg, RunOutput{dir});
  REQUIRE(r.tasks.size() == 4);

  SUBCASE("lower-triangular accuracy matrix and seen classes") {
    const auto A = r.accuracy_matrix();
    for (std::size_t t = 0; t < A.size(); ++t) CHECK(A[t].size() == t + 1);
    for (std::size_t t = 0; t < 4; ++t) {
      CHECK(r.tasks[t].seen_classes == f.schedule.classes_through(t));
      CHECK(r.tasks[t].class_accuracy.size() == r.tasks[t].seen_classes.size());
    }
  }
  SUBCASE("frozen model equals the previous checkpoint and never changes") {
    for (std::size_t t = 1; t < 4; ++t) {
      CHECK(r.tasks[t].frozen_hash_before == r.tasks[t - 1].checkpoint_hash);
      CHECK(r.tasks[t].frozen_hash_after == r.tasks[t].frozen_hash_before);
    }
  }
  SUBCASE("metrics conservation") {
    for (const auto& t : r.tasks) {
      double weighted = 0.0;
      int n = 0;
      for (const auto& [c, acc] : t.class_accuracy) {
        weighted += acc * t.class_test_counts.at(c);
        n += t.class_test_counts.at(c);
      }
      CHECK(std::abs(t.average_accuracy - weighted / n) <= 1e-12);
      double via_tasks = 0.0;
      for (std::size_t tau = 0; tau < t.task_accuracy.size(); ++tau) {
        int nt = 0;
        for (int c : f.schedule.tasks[tau].new_class_ids) nt += t.class_test_counts.at(c);
        via_tasks += t.task_accuracy[tau] * nt;
      }
      CHECK(std::abs(t.average_accuracy - via_tasks / n) <= 1e-12);
    }
  }
  SUBCASE("forgetting oracle") {
    double total = 0.0;
    for (int c : f.schedule.classes_through(2)) {
      double best = 0.0;
      for (std::size_t t = 0; t < 3; ++t)
        if (r.tasks[t].class_accuracy.count(c) != 0) best = std::max(best, r.tasks[t].class_accuracy.at(c));
      total += best - r.tasks[3].class_accuracy.at(c);
    }
    CHECK(std::abs(r.forgetting() - total / 4.0) <= 1e-12);
  }
  SUBCASE("replay balance") {
    for (std::size_t t = 1; t < 4; ++t) {
      const int expected = match_new_quota(f.view, f.schedule.tasks[t].new_class_ids);
      CHECK(r.tasks[t].replay_quota == expected);
      REQUIRE(r.tasks[t].synthesis.has_value());
      CHECK(r.tasks[t].synthesis->images == expected * static_cast<int>(t + 1));
    }
  }
  SUBCASE("run directory") {
    CHECK(std::filesystem::exists(dir / "config.json"));
    CHECK(std::filesystem::exists(dir / "impressions" / "task_2" / "manifest.json"));
    for (int t = 1; t <= 4; ++t) {
      const auto ck = dir / ("task_" + std::to_string(t)) / "checkpoint.cimp";
      REQUIRE(std::filesystem::exists(ck));
      CHECK(fingerprint(load_checkpoint(ck)) == r.tasks[static_cast<std::size_t>(t - 1)].checkpoint_hash);
    }
    std::ifstream in(dir / "metrics.jsonl");
    std::string line;
    int steps = 0;
    while (std::getline(in, line)) {
      const auto j = nlohmann::json::parse(line);
      if (j.at("type") != "step") continue;
      ++steps;
      for (const char* k : {"step", "cnce", "dist", "margin", "contras", "total"}) CHECK(j.contains(k));
    }
    CHECK(steps > 0);
  }
  std::filesystem::remove_all(dir);
}

TEST_CASE("determinism and caching") {
  Fixture f = small_fixture(4);
  const MetricsReport a = run_schedule(f.view, f.schedule, f.cfg);
  RunCache cache;
  const MetricsReport b = run_schedule(f.view, f.schedule, f.cfg, {}, &cache);
  const MetricsReport c = run_schedule(f.view, f.schedule, f.cfg, {}, &cache);
  for (std::size_t t = 0; t < a.tasks.size(); ++t) {
    CHECK(a.tasks[t].checkpoint_hash == b.tasks[t].checkpoint_hash);
    CHECK(a.tasks[t].checkpoint_hash == c.tasks[t].checkpoint_hash);
    CHECK(a.tasks[t].average_accuracy == c.tasks[t].average_accuracy);
  }

  SUBCASE("threads do not change results") {
    Fixture g = small_fixture(4);
    g.cfg.threads = 2;
    const MetricsReport d = run_schedule(g.view, g.schedule, g.cfg);
    CHECK(d.tasks.back().checkpoint_hash == a.tasks.back().checkpoint_hash);
  }
}

TEST_CASE("reduction to finetuning is bitwise") {
  Fixture f = small_fixture(5);
  f.cfg.strategy = Strategy::Finetune;
  const MetricsReport ft = run_schedule(f.view, f.schedule, f.cfg);

  f.cfg.strategy = Strategy::Full;
  f.cfg.replay = false;
  for (auto& p : f.cfg.phases) p.loss.alpha_dist = p.loss.alpha_margin = p.loss.alpha_contras = 0.0;
  const MetricsReport full = run_schedule(f.view, f.schedule, f.cfg);
  for (std::size_t t = 0; t < ft.tasks.size(); ++t) CHECK(ft.tasks[t].checkpoint_hash == full.tasks[t].checkpoint_hash);

  // Any active auxiliary term breaks the identity.
  f.cfg.phases[1].loss.alpha_dist = 5.0;
  const MetricsReport dist = run_schedule(f.view, f.schedule, f.cfg);
  CHECK(dist.tasks[1].checkpoint_hash != ft.tasks[1].checkpoint_hash);
}

TEST_CASE("other strategies") {
  Fixture f = small_fixture(6);
  for (Strategy s : {Strategy::DistillOnly, Strategy::Oracle}) {
    f.cfg.strategy = s;
    const MetricsReport r = run_schedule(f.view, f.schedule, f.cfg);
    CHECK(r.tasks.size() == 4);
    for (const auto& t : r.tasks) {
      CHECK(t.replay_quota == 0);
      CHECK(!t.synthesis);
    }
  }
  f.cfg.strategy = Strategy::Full;
  f.cfg.ablation = Ablation::parse("no-contrastive,no-margin");
  const MetricsReport r = run_schedule(f.view, f.schedule, f.cfg);
  for (const auto& t : r.tasks)
    for (const auto& e : t.epoch_losses) {
      CHECK(e.contras == 0.0);
      CHECK(e.margin == 0.0);
    }
}

TEST_CASE("task ordering and evaluation scope") {
  Fixture f = small_fixture(7);
  ExperimentState s = run_initial_task(f.view, f.schedule, f.cfg);
  CHECK(kind_of([&] { run_incremental_task(s, f.view, f.schedule, 2, f.cfg); }) == ErrorKind::Dependency);

  const TaskMetrics e = evaluate(s.model, f.view, f.schedule, 0);
  CHECK(e.seen_classes == std::vector<int>{0, 1});
  CHECK(e.class_accuracy.size() == 2);
  CHECK(kind_of([&] { evaluate(s.model, f.view, f.schedule, 1); }) == ErrorKind::Label);

  run_incremental_task(s, f.view, f.schedule, 1, f.cfg);
  CHECK(s.model.seen_classes == std::vector<int>{0, 1, 2});
  CHECK(s.means.class_ids() == std::vector<int>{0, 1, 2});
}

TEST_CASE("desk dataset is learnable offline") {
  DeskSpec ds;
  ds.per_class = 100;
  ds.seed = 11;
  const DatasetManifest m = make_desk_dataset(ds);
  const DataView view = make_data_view(m, SplitSpec{0.7, 0.2, 0.1, 11});
  ScheduleSpec one;
  one.explicit_tasks = std::vector<std::vector<int>>{{0, 1, 2, 3, 4}};
  const TaskSchedule schedule = build_schedule(m, one);
  EngineConfig cfg;
  cfg.arch.stem_width = 8;
  cfg.arch.block_widths = {8, 16, 32};
  cfg.seed = 11;
  const ExperimentState s = run_initial_task(view, schedule, cfg);
  CHECK(s.metrics[0].average_accuracy >= 0.95);
}
