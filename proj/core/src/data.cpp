#include "cimp/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "cimp/archive.hpp"
#include "cimp/error.hpp"
#include "cimp/image_io.hpp"

namespace cimp {
namespace {

constexpr std::string_view kCsvHeader = "sample_id,path,class_id,group_id";

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream in(line);
  while (std::getline(in, field, ',')) out.push_back(field);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

int parse_int(const std::string& text, const std::string& where) {
  try {
    std::size_t used = 0;
    const int v = std::stoi(text, &used);
    if (used == text.size()) return v;
  } catch (const std::exception&) {
  }
  fail(ErrorKind::Dataset, where + ": '" + text + "' is not an integer");
}

std::string trim(std::string s) {
  while (!s.empty() && (s.back() == '\r' || s.back() == ' ')) s.pop_back();
  while (!s.empty() && s.front() == ' ') s.erase(s.begin());
  return s;
}

void set_norm_from_split(DatasetManifest& m, const SplitSpec& spec) {
  const Split s = group_split(m, spec);
  m.norm = compute_norm_stats(m, s.train);
}

float quantize(double v) {
  const long k = std::lround(std::clamp(v, 0.0, 1.0) * 255.0);
  return static_cast<float>(k) / 255.0f;
}

// Binary shape masks in centred coordinates.
bool shape_mask(int cls, double u, double v, double t, double size) {
  const double r = std::hypot(u, v);
  switch (cls % 8) {
    case 0: return std::abs(v) < t && std::abs(u) < size;
    case 1: return std::abs(u) < t && std::abs(v) < size;
    case 2: return std::abs(u - v) / std::sqrt(2.0) < t && std::abs(u + v) < 1.4 * size;
    case 3: return std::abs(r - 0.8 * size) < 0.8 * t;
    case 4: return (std::abs(u) < t && std::abs(v) < 0.8 * size) || (std::abs(v) < t && std::abs(u) < 0.8 * size);
    case 5: {
      const double s = 0.8 * size;
      const double d = std::max(std::abs(u), std::abs(v));
      return d <= s && d > s - t;
    }
    case 6: return std::abs(u + v) / std::sqrt(2.0) < t && std::abs(u - v) < 1.4 * size;
    default: return r < 0.6 * size;
  }
}

}  // namespace

std::span<const float> DatasetManifest::item(std::size_t row) const {
  require(row < rows.size(), ErrorKind::Dataset, "row index out of range");
  return std::span<const float>(pixels).subspan(row * pixels_per_item(), pixels_per_item());
}

int DatasetManifest::num_classes() const {
  int k = 0;
  for (const auto& r : rows) k = std::max(k, r.class_id + 1);
  return k;
}

std::map<int, int> DatasetManifest::class_histogram() const {
  std::map<int, int> h;
  for (const auto& r : rows) ++h[r.class_id];
  return h;
}

std::vector<int> DatasetManifest::rows_of_class(int class_id) const {
  std::vector<int> out;
  for (std::size_t i = 0; i < rows.size(); ++i)
    if (rows[i].class_id == class_id) out.push_back(static_cast<int>(i));
  return out;
}

void DatasetManifest::validate() const {
  require(!rows.empty(), ErrorKind::Dataset, "manifest has no rows");
  require(height > 0 && width > 0 && channels > 0, ErrorKind::Dataset, "manifest geometry is unset");
  require(pixels.size() == rows.size() * pixels_per_item(), ErrorKind::Dataset,
          "pixel buffer does not match rows x geometry");
  std::set<std::string> ids;
  for (const auto& r : rows) {
    require(!r.sample_id.empty(), ErrorKind::Dataset, "empty sample_id");
    require(ids.insert(r.sample_id).second, ErrorKind::Dataset, "duplicate sample_id '" + r.sample_id + "'");
    require(r.class_id >= 0, ErrorKind::Dataset, "negative class id for '" + r.sample_id + "'");
  }
  const auto hist = class_histogram();
  const int k = num_classes();
  for (int c = 0; c < k; ++c) {
    require(hist.count(c) != 0, ErrorKind::Dataset,
            "class ids are not contiguous from 0: class " + std::to_string(c) + " is missing");
  }
  for (float p : pixels) {
    require(std::isfinite(p) && p >= 0.0f && p <= 1.0f, ErrorKind::Dataset, "pixel outside [0, 1]");
  }
}

void SplitSpec::validate() const {
  require(train > 0 && val >= 0 && test > 0, ErrorKind::Config, "split fractions must be positive");
  require(std::abs(train + val + test - 1.0) < 1e-9, ErrorKind::Config, "split fractions must sum to 1");
}

Split group_split(const DatasetManifest& manifest, const SplitSpec& spec) {
  spec.validate();
  std::set<int> group_set;
  for (const auto& r : manifest.rows) group_set.insert(r.group_id);
  std::vector<int> groups(group_set.begin(), group_set.end());
  const int g = static_cast<int>(groups.size());
  const int splits = spec.val > 0 ? 3 : 2;
  require(g >= splits, ErrorKind::Dataset,
          "group split needs at least " + std::to_string(splits) + " groups, found " + std::to_string(g));

  std::mt19937_64 rng(spec.seed);
  std::shuffle(groups.begin(), groups.end(), rng);
  int n_train = static_cast<int>(std::lround(spec.train * g));
  int n_val = spec.val > 0 ? static_cast<int>(std::lround(spec.val * g)) : 0;
  n_train = std::clamp(n_train, 1, g - (splits - 1));
  if (spec.val > 0) n_val = std::clamp(n_val, 1, g - n_train - 1);
  Split s;
  s.train_groups.assign(groups.begin(), groups.begin() + n_train);
  s.val_groups.assign(groups.begin() + n_train, groups.begin() + n_train + n_val);
  s.test_groups.assign(groups.begin() + n_train + n_val, groups.end());
  for (auto* v : {&s.train_groups, &s.val_groups, &s.test_groups}) std::sort(v->begin(), v->end());

  auto in = [](const std::vector<int>& v, int x) { return std::binary_search(v.begin(), v.end(), x); };
  for (std::size_t i = 0; i < manifest.rows.size(); ++i) {
    const int grp = manifest.rows[i].group_id;
    auto& dst = in(s.train_groups, grp) ? s.train : in(s.val_groups, grp) ? s.val : s.test;
    dst.push_back(static_cast<int>(i));
  }
  return s;
}

NormStats compute_norm_stats(const DatasetManifest& m, std::span<const int> rows) {
  require(!rows.empty(), ErrorKind::Dataset, "normalization needs at least one row");
  const int c = m.channels;
  NormStats s{std::vector<double>(c, 0.0), std::vector<double>(c, 0.0)};
  const double per_channel = static_cast<double>(rows.size()) * m.height * m.width;
  for (int r : rows) {
    const auto px = m.item(static_cast<std::size_t>(r));
    for (std::size_t i = 0; i < px.size(); ++i) s.mean[i % c] += px[i];
  }
  for (double& v : s.mean) v /= per_channel;
  for (int r : rows) {
    const auto px = m.item(static_cast<std::size_t>(r));
    for (std::size_t i = 0; i < px.size(); ++i) {
      const double d = px[i] - s.mean[i % c];
      s.std[i % c] += d * d;
    }
  }
  for (double& v : s.std) v = std::sqrt(v / per_channel);
  for (double v : s.std) require(v > 0.0, ErrorKind::Dataset, "a channel is constant over the train split");
  return s;
}

Tensor gather_images(const DatasetManifest& m, std::span<const int> rows, const NormStats& norm) {
  require(static_cast<int>(norm.mean.size()) == m.channels && norm.std.size() == norm.mean.size(),
          ErrorKind::Dataset, "normalization stats do not match the channel count");
  Tensor out({static_cast<int>(rows.size()), m.height, m.width, m.channels});
  const std::size_t per = m.pixels_per_item();
  const std::size_t c = static_cast<std::size_t>(m.channels);
  for (std::size_t n = 0; n < rows.size(); ++n) {
    const auto px = m.item(static_cast<std::size_t>(rows[n]));
    auto dst = out.item(static_cast<int>(n));
    for (std::size_t i = 0; i < per; ++i) dst[i] = (px[i] - norm.mean[i % c]) / norm.std[i % c];
  }
  return out;
}

std::vector<int> gather_labels(const DatasetManifest& m, std::span<const int> rows) {
  std::vector<int> out;
  out.reserve(rows.size());
  for (int r : rows) out.push_back(m.rows.at(static_cast<std::size_t>(r)).class_id);
  return out;
}

DatasetManifest load_manifest(const std::filesystem::path& csv, const SplitSpec& split) {
  std::ifstream in(csv);
  require(static_cast<bool>(in), ErrorKind::Dataset, "cannot open manifest " + csv.string());
  std::string line;
  require(static_cast<bool>(std::getline(in, line)) && trim(line) == kCsvHeader, ErrorKind::Dataset,
          csv.string() + ": header must be '" + std::string(kCsvHeader) + "'");
  const auto base = csv.parent_path();

  DatasetManifest m;
  std::map<std::string, Archive> archives;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    line = trim(line);
    if (line.empty()) continue;
    const std::string where = csv.string() + ":" + std::to_string(line_no);
    const auto f = split_csv_line(line);
    require(f.size() == 4, ErrorKind::Dataset, where + ": expected 4 columns, found " + std::to_string(f.size()));
    ManifestRow row{trim(f[0]), trim(f[1]), parse_int(trim(f[2]), where), parse_int(trim(f[3]), where)};

    RawImage img;
    const auto hash = row.path.find('#');
    if (hash != std::string::npos) {
      const std::string file = row.path.substr(0, hash);
      const int index = parse_int(row.path.substr(hash + 1), where);
      auto it = archives.find(file);
      if (it == archives.end()) {
        require(std::filesystem::exists(base / file), ErrorKind::Dataset, where + ": missing file " + file);
        it = archives.emplace(file, read_archive(base / file, "dataset")).first;
      }
      const Blob& b = it->second.find("images");
      require(b.shape.size() == 4 && index >= 0 && index < b.shape[0], ErrorKind::Dataset,
              where + ": archive index out of range");
      img.height = static_cast<int>(b.shape[1]);
      img.width = static_cast<int>(b.shape[2]);
      img.channels = static_cast<int>(b.shape[3]);
      const std::size_t per = static_cast<std::size_t>(img.height) * img.width * img.channels;
      img.pixels.resize(per);
      for (std::size_t i = 0; i < per; ++i) img.pixels[i] = static_cast<float>(b.values[index * per + i]);
    } else {
      require(std::filesystem::exists(base / row.path), ErrorKind::Dataset, where + ": missing file " + row.path);
      img = read_image(base / row.path);
    }
    if (m.rows.empty()) {
      m.height = img.height;
      m.width = img.width;
      m.channels = img.channels;
    }
    require(img.height == m.height && img.width == m.width && img.channels == m.channels, ErrorKind::Dataset,
            where + ": image geometry differs from the first row");
    m.pixels.insert(m.pixels.end(), img.pixels.begin(), img.pixels.end());
    m.rows.push_back(std::move(row));
  }
  m.validate();
  set_norm_from_split(m, split);
  return m;
}

std::string_view to_string(ImageFormat format) noexcept {
  switch (format) {
    case ImageFormat::Pgm:
      return "pgm";
    case ImageFormat::Archive:
      return "archive";
    default:
      return "png";
  }
}

ImageFormat parse_image_format(std::string_view text) {
  if (text == "png") return ImageFormat::Png;
  if (text == "pgm") return ImageFormat::Pgm;
  if (text == "archive") return ImageFormat::Archive;
  fail(ErrorKind::Config, "unknown image format '" + std::string(text) + "' (png, pgm, archive)");
}

std::filesystem::path write_manifest(const DatasetManifest& m, const std::filesystem::path& dir,
                                     ImageFormat format) {
  m.validate();
  std::filesystem::create_directories(dir);
  std::vector<std::string> paths(m.rows.size());
  if (format == ImageFormat::Archive) {
    Blob b{"images",
           {static_cast<std::int64_t>(m.rows.size()), m.height, m.width, m.channels},
           std::vector<double>(m.pixels.begin(), m.pixels.end())};
    write_archive(dir / "images.cimp", "dataset", nlohmann::json::object(), std::span<const Blob>(&b, 1),
                  BlobDtype::Float32);
    for (std::size_t i = 0; i < paths.size(); ++i) paths[i] = "images.cimp#" + std::to_string(i);
  } else {
    const std::string ext = format == ImageFormat::Png ? ".png" : ".pgm";
    for (std::size_t i = 0; i < m.rows.size(); ++i) {
      paths[i] = "images/" + m.rows[i].sample_id + ext;
      const auto px = m.item(i);
      RawImage img{m.height, m.width, m.channels, {px.begin(), px.end()}};
      if (format == ImageFormat::Png) {
        write_png(dir / paths[i], img);
      } else {
        write_pgm(dir / paths[i], img);
      }
    }
  }
  const auto csv = dir / "manifest.csv";
  std::ofstream out(csv, std::ios::trunc);
  require(static_cast<bool>(out), ErrorKind::Io, "cannot write " + csv.string());
  out << kCsvHeader << '\n';
  for (std::size_t i = 0; i < m.rows.size(); ++i) {
    const auto& r = m.rows[i];
    require(r.sample_id.find(',') == std::string::npos, ErrorKind::Dataset, "sample_id contains a comma");
    out << r.sample_id << ',' << paths[i] << ',' << r.class_id << ',' << r.group_id << '\n';
  }
  return csv;
}

std::string corpus_hash(const DatasetManifest& m) {
  std::string buf = std::to_string(m.height) + "x" + std::to_string(m.width) + "x" + std::to_string(m.channels) + "\n";
  for (const auto& r : m.rows) {
    buf += r.sample_id + "," + std::to_string(r.class_id) + "," + std::to_string(r.group_id) + "\n";
  }
  const std::size_t head = buf.size();
  buf.resize(head + m.pixels.size() * sizeof(float));
  std::memcpy(buf.data() + head, m.pixels.data(), m.pixels.size() * sizeof(float));
  return sha256_hex(std::as_bytes(std::span<const char>(buf.data(), buf.size())));
}

void DeskSpec::validate() const {
  require(classes >= 2 && classes <= 8, ErrorKind::Config, "desk dataset supports 2 to 8 classes");
  require(per_class >= 1, ErrorKind::Config, "desk dataset needs at least one image per class");
  require(groups >= 3, ErrorKind::Config, "desk dataset needs at least 3 groups");
  require(height >= 8 && width >= 8, ErrorKind::Config, "desk images must be at least 8x8");
  require(noise >= 0.0, ErrorKind::Config, "noise must be non-negative");
}

DatasetManifest make_desk_dataset(const DeskSpec& spec) {
  spec.validate();
  DatasetManifest m;
  m.height = spec.height;
  m.width = spec.width;
  m.channels = 1;

  // Per-group style: background level and stroke gain.
  std::mt19937_64 style_rng(spec.seed ^ 0x9E3779B97F4A7C15ull);
  std::uniform_real_distribution<double> bg(0.0, 0.2), gain(0.65, 1.0);
  std::vector<std::pair<double, double>> style(static_cast<std::size_t>(spec.groups));
  for (auto& s : style) s = {bg(style_rng), gain(style_rng)};

  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> shift(-1.5, 1.5), thick(0.8, 1.8), amp(0.7, 1.0);
  std::normal_distribution<double> noise(0.0, 1.0);
  const double half = std::min(spec.height, spec.width) / 2.0;
  std::uniform_real_distribution<double> size(0.55 * half, 0.8 * half);
  const double cy0 = (spec.height - 1) / 2.0, cx0 = (spec.width - 1) / 2.0;

  for (int c = 0; c < spec.classes; ++c) {
    for (int i = 0; i < spec.per_class; ++i) {
      const int group = i % spec.groups;
      char id[32];
      std::snprintf(id, sizeof id, "c%d_%05d", c, i);
      m.rows.push_back({id, "", c, group});
      const double cy = cy0 + shift(rng), cx = cx0 + shift(rng);
      const double t = thick(rng), a = amp(rng), s = size(rng);
      const auto [b, g] = style[static_cast<std::size_t>(group)];
      for (int y = 0; y < spec.height; ++y) {
        for (int x = 0; x < spec.width; ++x) {
          const double ink = shape_mask(c, x - cx, y - cy, t, s) ? a : 0.0;
          m.pixels.push_back(quantize(b + g * ink + spec.noise * noise(rng)));
        }
      }
    }
  }
  set_norm_from_split(m, SplitSpec{});
  return m;
}

std::vector<int> TaskSchedule::classes_through(std::size_t task_index) const {
  require(task_index < tasks.size(), ErrorKind::Contract, "task index out of range");
  std::vector<int> out;
  for (std::size_t t = 0; t <= task_index; ++t)
    out.insert(out.end(), tasks[t].new_class_ids.begin(), tasks[t].new_class_ids.end());
  return out;
}

void TaskSchedule::validate() const {
  require(!tasks.empty(), ErrorKind::Config, "schedule has no tasks");
  require(tasks.front().new_class_ids.size() >= 2, ErrorKind::Config, "the first task needs at least 2 classes");
  std::set<int> seen;
  for (std::size_t t = 0; t < tasks.size(); ++t) {
    require(!tasks[t].new_class_ids.empty(), ErrorKind::Config, "task " + std::to_string(t + 1) + " has no classes");
    for (int id : tasks[t].new_class_ids) {
      require(seen.insert(id).second, ErrorKind::Config,
              "class " + std::to_string(id) + " appears in more than one task");
    }
  }
}

TaskSchedule build_schedule(const DatasetManifest& manifest, const ScheduleSpec& spec) {
  const int k = manifest.num_classes();
  TaskSchedule s;
  if (spec.explicit_tasks) {
    for (std::size_t t = 0; t < spec.explicit_tasks->size(); ++t) {
      s.tasks.push_back({static_cast<int>(t) + 1, (*spec.explicit_tasks)[t]});
      for (int id : s.tasks.back().new_class_ids) {
        require(id >= 0 && id < k, ErrorKind::Dataset,
                "schedule class " + std::to_string(id) + " is not in the dataset");
      }
    }
    s.validate();
    return s;
  }
  require(spec.initial_classes >= 2 && spec.increment >= 1 && spec.tasks >= 1, ErrorKind::Config,
          "schedule needs initial_classes >= 2, increment >= 1, tasks >= 1");
  const int needed = spec.initial_classes + spec.increment * (spec.tasks - 1);
  require(needed <= k, ErrorKind::Dataset,
          "schedule needs " + std::to_string(needed) + " classes, dataset has " + std::to_string(k));
  std::vector<int> order(static_cast<std::size_t>(k));
  std::iota(order.begin(), order.end(), 0);
  if (spec.shuffle_seed) {
    std::mt19937_64 rng(*spec.shuffle_seed);
    std::shuffle(order.begin(), order.end(), rng);
  }
  std::size_t next = 0;
  for (int t = 0; t < spec.tasks; ++t) {
    const int count = t == 0 ? spec.initial_classes : spec.increment;
    Task task{t + 1, {}};
    for (int i = 0; i < count; ++i) task.new_class_ids.push_back(order[next++]);
    s.tasks.push_back(std::move(task));
  }
  s.validate();
  return s;
}

}  // namespace cimp
