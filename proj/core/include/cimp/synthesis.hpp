#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cimp/backbone.hpp"
#include "cimp/tensor.hpp"

namespace cimp {

enum class InitMode { ClassMean, GaussianNoise };

std::string_view to_string(InitMode mode) noexcept;
InitMode parse_init_mode(std::string_view text);

struct PixelRange {
  double lo = 0.0;
  double hi = 1.0;
};

/// Input-optimization settings for one phase.
///
/// objective = CE + alpha_reg_total * (alpha_tv * R_tv + alpha_l2 * R_l2 + alpha_bn * R_bn)
struct SynthesisConfig {
  double alpha_tv = 0.001;
  double alpha_l2 = 0.001;
  double alpha_bn = 0.2;
  double alpha_reg_total = 0.01;
  double lr = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_epsilon = 1e-8;
  int steps = 2000;
  int batch_size = 40;
  InitMode init_mode = InitMode::ClassMean;
  double init_jitter_sigma = 0.0;
  /// Pixels are clamped to this range after every step when set.
  std::optional<PixelRange> pixel_range;
  /// Floor for feature/embedding norms in the CE term; 0 raises instead.
  double norm_epsilon = 0.0;
  /// Classes synthesized concurrently.
  int threads = 1;

  void validate() const;
  nlohmann::json to_json() const;
  static SynthesisConfig from_json(const nlohmann::json& j);
};

/// Squared anisotropic total variation, averaged over the batch.
double tv_l2_reg(const ImageBatch& batch);
Tensor tv_l2_reg_grad(const ImageBatch& batch);

/// Mean squared l2 norm of each image.
double l2_reg(const ImageBatch& batch);
Tensor l2_reg_grad(const ImageBatch& batch);

/// Sum over BN layers of |mean - running_mean|_2 + |var - running_var|_2.
double bn_reg(const BnObservation& obs, const ModelState& model);
/// Subgradient w.r.t. the observation; a zero deviation contributes zero.
BnObservationGrad bn_reg_grad(const BnObservation& obs, const ModelState& model);

struct ObjectiveParts {
  double ce = 0.0;
  double tv = 0.0;
  double l2 = 0.0;
  double bn = 0.0;
};

struct ObjectiveResult {
  double total = 0.0;
  /// Unweighted.
  ObjectiveParts parts;
  std::optional<Tensor> input_grad;
};

/// Evaluates the synthesis objective on an eval-mode pass of the frozen model.
ObjectiveResult synthesis_objective(const ModelState& frozen, const ImageBatch& batch,
                                    std::span<const int> labels, const SynthesisConfig& cfg,
                                    bool want_grad = false);

struct ClassMean {
  /// 1 x H x W x C.
  Tensor image;
  int count = 0;
};

/// Pixelwise arithmetic mean of a non-empty slice of one class.
ClassMean record_class_means(const ImageBatch& slice);

class ClassMeanStore {
 public:
  void put(int class_id, ClassMean mean);
  bool contains(int class_id) const noexcept { return means_.count(class_id) != 0; }
  /// MissingPrototype error if absent.
  const ClassMean& get(int class_id) const;
  std::vector<int> class_ids() const;
  const std::map<int, ClassMean>& entries() const noexcept { return means_; }

  void save(const std::filesystem::path& path) const;
  static ClassMeanStore load(const std::filesystem::path& path);

 private:
  std::map<int, ClassMean> means_;
};

/// One starting image per entry of `class_ids`.
ImageBatch init_batch(const ClassMeanStore& means, std::span<const int> class_ids,
                      const SynthesisConfig& cfg, Shape4 geometry, std::uint64_t seed);

struct TraceRow {
  int step = 0;
  double total = 0.0;
  ObjectiveParts parts;
};

struct SynthesisTrace {
  /// Row s is the objective before update s; the last row is the returned batch.
  std::vector<TraceRow> rows;
  double lr = 0.0;
  int attempts = 1;
};

struct ClassImpressions {
  int class_id = 0;
  ImageBatch images;
  std::vector<SynthesisTrace> traces;
};

struct ClassImpressionSet {
  int quota_per_class = 0;
  SynthesisConfig config;
  /// Ordered by class id.
  std::vector<ClassImpressions> classes;

  const ClassImpressions& get(int class_id) const;
  bool covers(std::span<const int> class_ids) const;
};

/// Optimizes one batch with Adam. Retries once with lr / 10 on a non-finite
/// objective, then raises a Numeric error.
ImageBatch synthesize_batch(const ModelState& frozen, ImageBatch init, std::span<const int> labels,
                            const SynthesisConfig& cfg, SynthesisTrace& trace);

/// Produces exactly `quota_per_class` images for every class in `old_classes`.
/// The frozen model is only read.
ClassImpressionSet synthesize(const ModelState& frozen, const ClassMeanStore& means,
                              std::span<const int> old_classes, int quota_per_class,
                              const SynthesisConfig& cfg, std::uint64_t seed);

struct PreviewOptions {
  /// Per-channel normalization to undo before writing 8-bit previews.
  std::vector<double> mean;
  std::vector<double> std;
  int max_previews = 16;
};

/// One directory per class: images.cimp (float32 blob), preview PNGs,
/// trace.csv and manifest.json, plus a top-level manifest.json.
void save_impressions(const ClassImpressionSet& set, const std::filesystem::path& dir,
                      const PreviewOptions& preview);
ClassImpressionSet load_impressions(const std::filesystem::path& dir);

}  // namespace cimp
