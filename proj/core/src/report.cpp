#include "cimp/report.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include "cimp/error.hpp"
#include "cimp/image_io.hpp"

namespace cimp {
namespace {

// 5x7 bitmap glyphs, one row per byte, low five bits used.
const std::map<char, std::array<std::uint8_t, 7>>& font() {
  static const std::map<char, std::array<std::uint8_t, 7>> glyphs = {
      {'0', {0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E}}, {'1', {0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E}},
      {'2', {0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F}}, {'3', {0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E}},
      {'4', {0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02}}, {'5', {0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E}},
      {'6', {0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E}}, {'7', {0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08}},
      {'8', {0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E}}, {'9', {0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C}},
      {'A', {0x0E, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11}}, {'B', {0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E}},
      {'C', {0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E}}, {'D', {0x1C, 0x12, 0x11, 0x11, 0x11, 0x12, 0x1C}},
      {'E', {0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F}}, {'F', {0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10}},
      {'G', {0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F}}, {'H', {0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11}},
      {'I', {0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E}}, {'J', {0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C}},
      {'K', {0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11}}, {'L', {0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F}},
      {'M', {0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11}}, {'N', {0x11, 0x11, 0x19, 0x15, 0x13, 0x11, 0x11}},
      {'O', {0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E}}, {'P', {0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10}},
      {'Q', {0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D}}, {'R', {0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11}},
      {'S', {0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E}}, {'T', {0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04}},
      {'U', {0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E}}, {'V', {0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04}},
      {'W', {0x11, 0x11, 0x11, 0x15, 0x15, 0x15, 0x0A}}, {'X', {0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11}},
      {'Y', {0x11, 0x11, 0x11, 0x0A, 0x04, 0x04, 0x04}}, {'Z', {0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F}},
      {'-', {0x00, 0x00, 0x00, 0x1F, 0x00, 0x00, 0x00}}, {'.', {0x00, 0x00, 0x00, 0x00, 0x00, 0x0C, 0x0C}},
      {'%', {0x18, 0x19, 0x02, 0x04, 0x08, 0x13, 0x03}}, {':', {0x00, 0x0C, 0x0C, 0x00, 0x0C, 0x0C, 0x00}},
      {',', {0x00, 0x00, 0x00, 0x00, 0x0C, 0x04, 0x08}}, {'(', {0x02, 0x04, 0x08, 0x08, 0x08, 0x04, 0x02}},
      {')', {0x08, 0x04, 0x02, 0x02, 0x02, 0x04, 0x08}}, {'=', {0x00, 0x00, 0x1F, 0x00, 0x1F, 0x00, 0x00}},
      {'/', {0x00, 0x01, 0x02, 0x04, 0x08, 0x10, 0x00}}, {'+', {0x00, 0x04, 0x04, 0x1F, 0x04, 0x04, 0x00}},
  };
  return glyphs;
}

using Rgb = std::array<float, 3>;

constexpr Rgb kBlack{0.0f, 0.0f, 0.0f};
constexpr Rgb kGrid{0.85f, 0.85f, 0.85f};
constexpr std::array<Rgb, 8> kPalette{{{0.12f, 0.47f, 0.71f},
                                       {0.84f, 0.15f, 0.16f},
                                       {0.17f, 0.63f, 0.17f},
                                       {1.00f, 0.50f, 0.05f},
                                       {0.58f, 0.40f, 0.74f},
                                       {0.55f, 0.34f, 0.29f},
                                       {0.89f, 0.47f, 0.76f},
                                       {0.50f, 0.50f, 0.50f}}};

class Canvas {
 public:
  Canvas(int w, int h) : w_(w), h_(h), px_(static_cast<std::size_t>(w) * h * 3, 1.0f) {}

  void set(int x, int y, const Rgb& c) {
    if (x < 0 || y < 0 || x >= w_ || y >= h_) return;
    const std::size_t i = (static_cast<std::size_t>(y) * w_ + x) * 3;
    std::copy(c.begin(), c.end(), px_.begin() + static_cast<std::ptrdiff_t>(i));
  }

  void rect(int x0, int y0, int x1, int y1, const Rgb& c) {
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x) set(x, y, c);
  }

  void line(int x0, int y0, int x1, int y1, const Rgb& c, int thick = 1) {
    const int dx = std::abs(x1 - x0), dy = -std::abs(y1 - y0);
    const int sx = x0 < x1 ? 1 : -1, sy = y0 < y1 ? 1 : -1;
    int err = dx + dy;
    const int r = thick / 2;
    while (true) {
      rect(x0 - r, y0 - r, x0 + (thick - 1 - r), y0 + (thick - 1 - r), c);
      if (x0 == x1 && y0 == y1) break;
      const int e2 = 2 * err;
      if (e2 >= dy) {
        err += dy;
        x0 += sx;
      }
      if (e2 <= dx) {
        err += dx;
        y0 += sy;
      }
    }
  }

  void text(int x, int y, std::string_view s, const Rgb& c) {
    for (char ch : s) {
      const auto it = font().find(static_cast<char>(std::toupper(static_cast<unsigned char>(ch))));
      if (it != font().end()) {
        for (int row = 0; row < 7; ++row)
          for (int col = 0; col < 5; ++col)
            if ((it->second[static_cast<std::size_t>(row)] >> (4 - col)) & 1) set(x + col, y + row, c);
      }
      x += 6;
    }
  }

  void save(const std::filesystem::path& path) const {
    write_png(path, RawImage{h_, w_, 3, px_});
  }

 private:
  int w_;
  int h_;
  std::vector<float> px_;
};

struct Series {
  std::string label;
  std::vector<double> values;  // percent; NaN skips a point
};

void line_plot(const std::vector<Series>& series, int tasks, std::string_view title, const std::filesystem::path& png) {
  constexpr int W = 640, H = 400, L = 56, R = 180, T = 30, B = 44;
  Canvas c(W, H);
  const int x0 = L, x1 = W - R, y0 = T, y1 = H - B;
  auto px = [&](int t) { return tasks <= 1 ? (x0 + x1) / 2 : x0 + (x1 - x0) * t / (tasks - 1); };
  auto py = [&](double v) { return y1 - static_cast<int>(std::lround((y1 - y0) * std::clamp(v, 0.0, 100.0) / 100.0)); };

  for (int v = 0; v <= 100; v += 20) {
    c.line(x0, py(v), x1, py(v), kGrid);
    const std::string lab = std::to_string(v);
    c.text(x0 - 8 - 6 * static_cast<int>(lab.size()), py(v) - 3, lab, kBlack);
  }
  for (int t = 0; t < tasks; ++t) {
    c.line(px(t), y1, px(t), y1 + 4, kBlack);
    c.text(px(t) - 2, y1 + 8, std::to_string(t + 1), kBlack);
  }
  c.line(x0, y0, x0, y1, kBlack);
  c.line(x0, y1, x1, y1, kBlack);
  c.text((x0 + x1) / 2 - 12, H - 16, "TASK", kBlack);
  c.text(8, 10, "ACCURACY %", kBlack);
  c.text(x0 + 90, 10, title, kBlack);

  for (std::size_t s = 0; s < series.size(); ++s) {
    const Rgb& col = kPalette[s % kPalette.size()];
    int prev_x = -1, prev_y = -1;
    for (int t = 0; t < static_cast<int>(series[s].values.size()) && t < tasks; ++t) {
      const double v = series[s].values[static_cast<std::size_t>(t)];
      if (std::isnan(v)) {
        prev_x = -1;
        continue;
      }
      const int x = px(t), y = py(v);
      if (prev_x >= 0) c.line(prev_x, prev_y, x, y, col, 2);
      c.rect(x - 3, y - 3, x + 3, y + 3, col);
      prev_x = x;
      prev_y = y;
    }
    const int ly = T + 6 + 14 * static_cast<int>(s);
    c.rect(x1 + 14, ly, x1 + 24, ly + 6, col);
    c.text(x1 + 30, ly, series[s].label.substr(0, 24), kBlack);
  }
  std::filesystem::create_directories(png.parent_path().empty() ? "." : png.parent_path());
  c.save(png);
}

std::vector<std::vector<double>> mean_matrix(const std::vector<MetricsReport>& runs) {
  std::vector<std::vector<double>> m = runs.front().accuracy_matrix();
  for (std::size_t r = 1; r < runs.size(); ++r) {
    const auto a = runs[r].accuracy_matrix();
    require(a.size() == m.size(), ErrorKind::Contract, "runs have different task counts");
    for (std::size_t t = 0; t < m.size(); ++t)
      for (std::size_t tau = 0; tau < m[t].size(); ++tau) m[t][tau] += a[t][tau];
  }
  for (auto& row : m)
    for (double& v : row) v /= static_cast<double>(runs.size());
  return m;
}

std::vector<double> mean_average_curve(const std::vector<MetricsReport>& runs) {
  std::vector<double> out(runs.front().tasks.size(), 0.0);
  for (const auto& r : runs)
    for (std::size_t t = 0; t < out.size(); ++t) out[t] += r.tasks.at(t).average_accuracy;
  for (double& v : out) v /= static_cast<double>(runs.size());
  return out;
}

void require_runs(const std::vector<MetricsReport>& runs) {
  require(!runs.empty(), ErrorKind::Contract, "report needs at least one run");
  for (const auto& r : runs) require(!r.tasks.empty(), ErrorKind::Contract, "run has no completed tasks");
}

}  // namespace

double mean_final_accuracy(const std::vector<MetricsReport>& runs) {
  require_runs(runs);
  double s = 0.0;
  for (const auto& r : runs) s += r.final_average_accuracy();
  return s / static_cast<double>(runs.size());
}

double mean_forgetting(const std::vector<MetricsReport>& runs) {
  require_runs(runs);
  double s = 0.0;
  for (const auto& r : runs) s += r.forgetting();
  return s / static_cast<double>(runs.size());
}

nlohmann::json report_json(const std::vector<MetricsReport>& runs) {
  require_runs(runs);
  const MetricsReport& first = runs.front();
  nlohmann::json schedule = nlohmann::json::array();
  for (const auto& t : first.schedule.tasks) schedule.push_back(t.new_class_ids);

  nlohmann::json runs_j = nlohmann::json::array();
  for (const auto& r : runs) {
    nlohmann::json tasks = nlohmann::json::array();
    for (const auto& t : r.tasks) {
      nlohmann::json tj = to_json(t);
      tj.erase("epoch_losses");  // kept in metrics.jsonl
      tasks.push_back(std::move(tj));
    }
    runs_j.push_back({{"seed", r.seed},
                      {"accuracy_matrix", r.accuracy_matrix()},
                      {"final_average_accuracy", r.final_average_accuracy()},
                      {"forgetting", r.forgetting()},
                      {"tasks", tasks}});
  }
  return {{"schema_version", kReportSchemaVersion},
          {"strategy", std::string(to_string(first.strategy))},
          {"ablation", first.ablation.to_string()},
          {"schedule", schedule},
          {"runs", runs_j},
          {"mean",
           {{"seeds", static_cast<int>(runs.size())},
            {"accuracy_matrix", mean_matrix(runs)},
            {"final_average_accuracy", mean_final_accuracy(runs)},
            {"forgetting", mean_forgetting(runs)}}}};
}

std::string summary_text(const std::vector<MetricsReport>& runs) {
  require_runs(runs);
  std::ostringstream out;
  char buf[64];
  const auto& first = runs.front();
  out << "strategy: " << to_string(first.strategy);
  if (first.ablation.any()) out << " (" << first.ablation.to_string() << ")";
  out << "\n";
  auto table = [&](const std::vector<std::vector<double>>& a) {
    out << "  after  |";
    for (std::size_t tau = 0; tau < a.size(); ++tau) {
      std::snprintf(buf, sizeof buf, " task %-3zu", tau + 1);
      out << buf;
    }
    out << "\n";
    for (std::size_t t = 0; t < a.size(); ++t) {
      std::snprintf(buf, sizeof buf, "  task %-2zu|", t + 1);
      out << buf;
      for (double v : a[t]) {
        std::snprintf(buf, sizeof buf, " %7.1f%%", 100.0 * v);
        out << buf;
      }
      out << "\n";
    }
  };
  for (const auto& r : runs) {
    out << "\nseed " << r.seed << "\n";
    table(r.accuracy_matrix());
    std::snprintf(buf, sizeof buf, "  final average accuracy %.1f%%, forgetting %.1f%%\n",
                  100.0 * r.final_average_accuracy(), 100.0 * r.forgetting());
    out << buf;
  }
  if (runs.size() > 1) {
    out << "\nmean over " << runs.size() << " seeds\n";
    table(mean_matrix(runs));
  }
  std::snprintf(buf, sizeof buf, "\nfinal average accuracy %.1f%%, forgetting %.1f%%\n",
                100.0 * mean_final_accuracy(runs), 100.0 * mean_forgetting(runs));
  out << buf;
  return out.str();
}

void plot_average_accuracy(const std::vector<CurveSet>& sets, const std::filesystem::path& png) {
  require(!sets.empty(), ErrorKind::Contract, "nothing to plot");
  std::vector<Series> series;
  int tasks = 0;
  for (const auto& s : sets) {
    require_runs(s.runs);
    Series one{s.label, mean_average_curve(s.runs)};
    for (double& v : one.values) v *= 100.0;
    tasks = std::max(tasks, static_cast<int>(one.values.size()));
    series.push_back(std::move(one));
  }
  line_plot(series, tasks, "AVERAGE ACCURACY", png);
}

void plot_task_accuracy(const std::vector<MetricsReport>& runs, const std::filesystem::path& png) {
  require_runs(runs);
  const auto a = mean_matrix(runs);
  const int tasks = static_cast<int>(a.size());
  std::vector<Series> series;
  for (int tau = 0; tau < tasks; ++tau) {
    Series s{"TASK " + std::to_string(tau + 1), std::vector<double>(static_cast<std::size_t>(tasks), NAN)};
    for (int t = tau; t < tasks; ++t)
      s.values[static_cast<std::size_t>(t)] = 100.0 * a[static_cast<std::size_t>(t)][static_cast<std::size_t>(tau)];
    series.push_back(std::move(s));
  }
  line_plot(series, tasks, "PER-TASK ACCURACY", png);
}

void emit_report(const std::vector<MetricsReport>& runs, const std::filesystem::path& dir) {
  require_runs(runs);
  std::filesystem::create_directories(dir);
  {
    std::ofstream f(dir / "report.json", std::ios::trunc);
    require(static_cast<bool>(f), ErrorKind::Io, "cannot write " + (dir / "report.json").string());
    f << report_json(runs).dump(2) << '\n';
  }
  {
    std::ofstream f(dir / "summary.txt", std::ios::trunc);
    f << summary_text(runs);
  }
  std::string label(to_string(runs.front().strategy));
  if (runs.front().ablation.any()) label += " " + runs.front().ablation.to_string();
  plot_average_accuracy({CurveSet{label, runs}}, dir / "accuracy.png");
  plot_task_accuracy(runs, dir / "task_accuracy.png");
}

}  // namespace cimp
