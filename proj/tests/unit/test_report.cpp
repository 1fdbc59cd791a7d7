#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <iterator>
#include <set>
#include <string>

#include <nlohmann/json.hpp>

#include "cimp/error.hpp"
#include "cimp/image_io.hpp"
#include "cimp/report.hpp"
#include "check.hpp"

using namespace cimp;
using namespace cimp::testing;

namespace {

std::string slurp(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

MetricsReport tiny_run(Strategy strategy, std::uint64_t seed) {
  DeskSpec ds;
  ds.per_class = 20;
  ds.height = ds.width = 8;
  const DatasetManifest m = make_desk_dataset(ds);
  const DataView view = make_data_view(m, {});
  const TaskSchedule schedule = build_schedule(m, {});
  EngineConfig cfg;
  cfg.arch = tiny_arch(8);
  cfg.phases = make_profile("sane");
  for (auto& p : cfg.phases) {
    p.optim.epochs = 2;
    p.optim.batch_size = 16;
    if (p.synthesis) {
      p.synthesis->steps = 3;
      p.synthesis->batch_size = 16;
      p.synthesis->init_jitter_sigma = 0.1;
    }
  }
  cfg.strategy = strategy;
  cfg.seed = seed;
  return run_schedule(view, schedule, cfg);
}

// Hand-made run: one class per task, the given per-class accuracies after
// each task and `n` test samples per class.
MetricsReport handmade(const std::vector<std::vector<double>>& acc_after, int n, std::uint64_t seed) {
  MetricsReport r;
  r.seed = seed;
  for (std::size_t t = 0; t < acc_after.size(); ++t) r.schedule.tasks.push_back({static_cast<int>(t) + 1, {static_cast<int>(t)}});
  for (std::size_t t = 0; t < acc_after.size(); ++t) {
    TaskMetrics m;
    m.task = static_cast<int>(t) + 1;
    m.new_classes = {static_cast<int>(t)};
    double sum = 0.0;
    for (std::size_t c = 0; c <= t; ++c) {
      m.seen_classes.push_back(static_cast<int>(c));
      m.class_accuracy[static_cast<int>(c)] = acc_after[t][c];
      m.class_test_counts[static_cast<int>(c)] = n;
      m.task_accuracy.push_back(acc_after[t][c]);
      sum += acc_after[t][c];
    }
    m.average_accuracy = sum / static_cast<double>(t + 1);
    m.checkpoint_hash = std::string(64, 'a');
    r.tasks.push_back(m);
  }
  return r;
}

}  // namespace

TEST_CASE("report layout") {
  const std::vector<MetricsReport> runs = {tiny_run(Strategy::Full, 1), tiny_run(Strategy::Full, 2)};
  const nlohmann::json j = report_json(runs);
  CHECK(j.at("schema_version") == kReportSchemaVersion);
  CHECK(j.at("strategy") == "full");
  CHECK(j.at("ablation") == "");
  CHECK(j.at("schedule") == nlohmann::json::parse("[[0,1],[2],[3],[4]]"));
  REQUIRE(j.at("runs").size() == 2);
  CHECK(j.at("mean").at("seeds") == 2);
  std::set<std::string> keys;
  for (const auto& [k, v] : j.items()) keys.insert(k);
  CHECK(keys == std::set<std::string>{"schema_version", "strategy", "ablation", "schedule", "runs", "mean"});
  for (const auto& run : j.at("runs")) {
    const auto& a = run.at("accuracy_matrix");
    REQUIRE(a.size() == 4);
    for (std::size_t t = 0; t < 4; ++t) CHECK(a[t].size() == t + 1);
    for (const auto& task : run.at("tasks")) {
      CHECK_FALSE(task.contains("epoch_losses"));
      CHECK(task.at("checkpoint_sha256").get<std::string>().size() == 64);
    }
  }
}

TEST_CASE("averages recomputed from the per-class fields match the report") {
  const std::vector<MetricsReport> runs = {tiny_run(Strategy::Full, 3), tiny_run(Strategy::Full, 4)};
  const nlohmann::json j = report_json(runs);
  const auto schedule = j.at("schedule");
  double mean_final = 0.0;
  for (const auto& run : j.at("runs")) {
    const auto& tasks = run.at("tasks");
    for (std::size_t t = 0; t < tasks.size(); ++t) {
      const auto& task = tasks[t];
      double hits = 0.0;
      double total = 0.0;
      for (const auto& [k, acc] : task.at("class_accuracy").items()) {
        const double n = task.at("class_test_counts").at(k).get<double>();
        hits += acc.get<double>() * n;
        total += n;
      }
      CHECK(task.at("average_accuracy").get<double>() == doctest::Approx(hits / total).epsilon(1e-12));
      for (std::size_t tau = 0; tau <= t; ++tau) {
        double h = 0.0;
        double n = 0.0;
        for (int c : schedule[tau]) {
          const auto key = std::to_string(c);
          h += task.at("class_accuracy").at(key).get<double>() * task.at("class_test_counts").at(key).get<double>();
          n += task.at("class_test_counts").at(key).get<double>();
        }
        CHECK(run.at("accuracy_matrix")[t][tau].get<double>() == doctest::Approx(h / n).epsilon(1e-12));
      }
    }
    CHECK(run.at("final_average_accuracy") == tasks.back().at("average_accuracy"));
    mean_final += run.at("final_average_accuracy").get<double>() / 2.0;
  }
  CHECK(j.at("mean").at("final_average_accuracy").get<double>() == doctest::Approx(mean_final).epsilon(1e-12));
}

TEST_CASE("seed means on hand-made runs") {
  const MetricsReport a = handmade({{1.0}, {0.5, 1.0}, {0.25, 0.75, 0.5}}, 10, 1);
  const MetricsReport b = handmade({{0.5}, {0.5, 0.5}, {0.75, 0.25, 1.0}}, 10, 2);
  const nlohmann::json j = report_json({a, b});
  const auto& m = j.at("mean").at("accuracy_matrix");
  CHECK(m[0][0] == 0.75);
  CHECK(m[1][0] == 0.5);
  CHECK(m[1][1] == 0.75);
  CHECK(m[2][0] == 0.5);
  CHECK(m[2][1] == 0.5);
  CHECK(m[2][2] == 0.75);
  // Final accuracy: (0.25+0.75+0.5)/3 and (0.75+0.25+1)/3.
  CHECK(mean_final_accuracy({a, b}) == doctest::Approx((0.5 + 2.0 / 3.0) / 2.0).epsilon(1e-15));
  // Forgetting of a: class 0 drops 1.0 -> 0.25, class 1 drops 1.0 -> 0.75.
  // b: class 0 peaks at 0.5 then ends at 0.75 (-0.25), class 1 drops 0.5 -> 0.25.
  CHECK(a.forgetting() == doctest::Approx(0.5));
  CHECK(b.forgetting() == doctest::Approx(0.0));
  CHECK(j.at("mean").at("forgetting").get<double>() == doctest::Approx(0.25));

  const std::string text = summary_text({a, b});
  CHECK(text.find("task 3") != std::string::npos);
  CHECK_THROWS_AS(report_json({}), Error);
  MetricsReport shorter = handmade({{1.0}, {0.5, 1.0}}, 10, 3);
  CHECK_THROWS_AS(report_json({a, shorter}), Error);
}

TEST_CASE("same seed gives byte-identical artifacts") {
  const auto dir = std::filesystem::temp_directory_path() / "cimp_test_report";
  std::filesystem::remove_all(dir);
  emit_report({tiny_run(Strategy::Finetune, 5)}, dir / "a");
  emit_report({tiny_run(Strategy::Finetune, 5)}, dir / "b");
  for (const char* f : {"report.json", "summary.txt", "accuracy.png", "task_accuracy.png"}) {
    CAPTURE(f);
    const std::string x = slurp(dir / "a" / f);
    CHECK_FALSE(x.empty());
    CHECK(x == slurp(dir / "b" / f));
  }
  CHECK(nlohmann::json::parse(slurp(dir / "a" / "report.json")) == report_json({tiny_run(Strategy::Finetune, 5)}));
  const RawImage img = read_image(dir / "a" / "accuracy.png");
  CHECK(img.width == 640);
  CHECK(img.height == 400);
  CHECK(img.channels == 3);
  std::filesystem::remove_all(dir);
}

TEST_CASE("comparison plot draws every curve set") {
  const MetricsReport a = handmade({{1.0}, {0.5, 1.0}, {0.25, 0.75, 0.5}}, 10, 1);
  const MetricsReport b = handmade({{0.5}, {0.5, 0.5}, {0.75, 0.25, 1.0}}, 10, 1);
  const auto dir = std::filesystem::temp_directory_path() / "cimp_test_plot";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  plot_average_accuracy({{"one", {a}}}, dir / "one.png");
  plot_average_accuracy({{"one", {a}}, {"two", {b}}}, dir / "two.png");
  const RawImage one = read_image(dir / "one.png");
  const RawImage two = read_image(dir / "two.png");
  REQUIRE(one.pixels.size() == two.pixels.size());
  CHECK(one.pixels != two.pixels);
  std::filesystem::remove_all(dir);
}
