#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "cimp/engine.hpp"

namespace cimp {

inline constexpr int kReportSchemaVersion = 1;

/// One report over the runs of a single strategy (one entry per seed). The
/// schema is documented in docs/report-schema.md.
nlohmann::json report_json(const std::vector<MetricsReport>& runs);

/// Plain-text accuracy tables and the headline numbers.
std::string summary_text(const std::vector<MetricsReport>& runs);

/// A labelled series for the comparison plot: mean average accuracy after
/// each task over the runs.
struct CurveSet {
  std::string label;
  std::vector<MetricsReport> runs;
};

/// Average accuracy vs task, one line per curve set.
void plot_average_accuracy(const std::vector<CurveSet>& sets, const std::filesystem::path& png);
/// A[t][tau] vs t, one line per task tau (seed-averaged).
void plot_task_accuracy(const std::vector<MetricsReport>& runs, const std::filesystem::path& png);

/// report.json, summary.txt, accuracy.png and task_accuracy.png in `dir`.
void emit_report(const std::vector<MetricsReport>& runs, const std::filesystem::path& dir);

/// Seed-averaged final accuracy and forgetting.
double mean_final_accuracy(const std::vector<MetricsReport>& runs);
double mean_forgetting(const std::vector<MetricsReport>& runs);

}  // namespace cimp
