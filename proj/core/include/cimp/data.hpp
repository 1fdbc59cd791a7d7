#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cimp/tensor.hpp"

namespace cimp {

struct ManifestRow {
  std::string sample_id;
  /// Relative to the manifest directory. "file.cimp#i" addresses item i of a
  /// raw-tensor archive.
  std::string path;
  int class_id = 0;
  int group_id = 0;
};

/// Per-channel statistics applied lazily when batches are gathered.
struct NormStats {
  std::vector<double> mean;
  std::vector<double> std;
};

/// Rows plus their decoded pixels (float32 in [0, 1], HWC per row).
struct DatasetManifest {
  std::vector<ManifestRow> rows;
  int height = 0;
  int width = 0;
  int channels = 0;
  std::vector<float> pixels;
  NormStats norm;

  std::size_t size() const noexcept { return rows.size(); }
  std::size_t pixels_per_item() const noexcept {
    return static_cast<std::size_t>(height) * width * channels;
  }
  std::span<const float> item(std::size_t row) const;
  int num_classes() const;
  std::map<int, int> class_histogram() const;
  std::vector<int> rows_of_class(int class_id) const;

  /// Dataset error on empty manifests, duplicate ids, non-contiguous class
  /// ids, pixel count mismatch or out-of-range pixels.
  void validate() const;
};

struct SplitSpec {
  double train = 0.7;
  double val = 0.2;
  double test = 0.1;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Row indices per split; each group lands in exactly one split.
struct Split {
  std::vector<int> train;
  std::vector<int> val;
  std::vector<int> test;
  std::vector<int> train_groups;
  std::vector<int> val_groups;
  std::vector<int> test_groups;
};

Split group_split(const DatasetManifest& manifest, const SplitSpec& spec);

/// Two-pass per-channel mean and population std over `rows`.
NormStats compute_norm_stats(const DatasetManifest& manifest, std::span<const int> rows);

/// Normalized N x H x W x C batch of the given rows.
Tensor gather_images(const DatasetManifest& manifest, std::span<const int> rows, const NormStats& norm);
std::vector<int> gather_labels(const DatasetManifest& manifest, std::span<const int> rows);

/// Parses a CSV manifest (sample_id,path,class_id,group_id) and decodes every
/// image. When `split` is given, normalization stats come from its train
/// split; otherwise the manifest is split with the default SplitSpec first.
DatasetManifest load_manifest(const std::filesystem::path& csv, const SplitSpec& split = {});

enum class ImageFormat { Png, Pgm, Archive };
std::string_view to_string(ImageFormat format) noexcept;
ImageFormat parse_image_format(std::string_view text);

/// Writes images plus manifest.csv into `dir`; returns the manifest path.
std::filesystem::path write_manifest(const DatasetManifest& manifest, const std::filesystem::path& dir,
                                     ImageFormat format);

/// SHA-256 over rows, geometry and pixels.
std::string corpus_hash(const DatasetManifest& manifest);

struct DeskSpec {
  int classes = 5;
  int per_class = 300;
  int groups = 10;
  int height = 16;
  int width = 16;
  /// Std of additive pixel noise.
  double noise = 0.08;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Procedural grayscale shapes, one shape family per class; every group
/// has its own brightness and background style and holds samples of every
/// class. Pixels are quantized to k/255.
DatasetManifest make_desk_dataset(const DeskSpec& spec);

struct Task {
  int phase = 1;
  std::vector<int> new_class_ids;
};

struct TaskSchedule {
  std::vector<Task> tasks;

  std::vector<int> classes_through(std::size_t task_index) const;
  void validate() const;
};

struct ScheduleSpec {
  int initial_classes = 2;
  int increment = 1;
  int tasks = 4;
  /// Used verbatim when set.
  std::optional<std::vector<std::vector<int>>> explicit_tasks;
  /// Shuffles the class order before slicing when set.
  std::optional<std::uint64_t> shuffle_seed;
};

TaskSchedule build_schedule(const DatasetManifest& manifest, const ScheduleSpec& spec);

}  // namespace cimp
