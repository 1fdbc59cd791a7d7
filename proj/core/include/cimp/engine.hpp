#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cimp/backbone.hpp"
#include "cimp/data.hpp"
#include "cimp/losses.hpp"
#include "cimp/synthesis.hpp"

namespace cimp {

enum class Strategy { Full, Finetune, DistillOnly, Oracle };
std::string_view to_string(Strategy s) noexcept;
Strategy parse_strategy(std::string_view text);

struct Ablation {
  bool no_contrastive = false;
  bool no_margin = false;
  bool noise_init = false;

  bool any() const noexcept { return no_contrastive || no_margin || noise_init; }
  std::string to_string() const;
  /// Comma-separated list of no-contrastive, no-margin, noise-init.
  static Ablation parse(std::string_view text);
};

struct OptimizerConfig {
  double lr = 0.01;
  double momentum = 0.9;
  /// Applied to convolution weights only.
  double weight_decay = 5e-4;
  int epochs = 30;
  int batch_size = 40;

  void validate() const;
};

enum class DistillTargets { Both, New, Synthesized };
std::string_view to_string(DistillTargets t) noexcept;
DistillTargets parse_distill_targets(std::string_view text);

struct PhaseConfig {
  /// Unset for phase 1: there is nothing to replay.
  std::optional<SynthesisConfig> synthesis;
  TrainLossConfig loss;
  OptimizerConfig optim;
  double centroid_momentum = 0.99;

  void validate(bool initial) const;
  nlohmann::json to_json() const;
};

/// Per-phase defaults. "paper-supp-t2" follows the supplementary hyper-
/// parameter table verbatim; "sane" keeps its weights but uses beta2 0.999
/// and synthesis lr 0.01 everywhere; "paper-3.1" uses the section 3.1 lr of
/// 0.01 with the tabled betas. Phase i+1 is element i.
std::vector<PhaseConfig> make_profile(std::string_view name);
std::vector<std::string> profile_names();

struct EngineConfig {
  ArchDescriptor arch;
  double eta = 10.0;
  std::vector<PhaseConfig> phases = make_profile("paper-supp-t2");
  Strategy strategy = Strategy::Full;
  Ablation ablation;
  /// Disables synthesis and replay for the Full strategy.
  bool replay = true;
  /// Target-domain centroids from test data of the seen classes instead of
  /// new-task training data. Contaminates evaluation; off by default.
  bool transductive_target = false;
  DistillTargets distill_targets = DistillTargets::Both;
  /// Clamp synthesized pixels to the normalized image of [0, 1].
  bool clamp_pixels = true;
  /// Zero means the quota follows the new-class sample count.
  int replay_quota_override = 0;
  std::uint64_t seed = 0;
  int threads = 1;

  /// Phase config for 0-based task `t`; the last phase repeats when the
  /// schedule is longer than the profile.
  const PhaseConfig& phase(std::size_t t) const;
  void validate() const;
  nlohmann::json to_json() const;
};

/// Data as the engine sees it: a manifest, its group split and the
/// train-split normalization.
struct DataView {
  const DatasetManifest* manifest = nullptr;
  Split split;
  NormStats norm;

  std::vector<int> rows(const std::vector<int>& pool, std::span<const int> class_ids) const;
  std::vector<int> train_rows(std::span<const int> class_ids) const { return rows(split.train, class_ids); }
  std::vector<int> test_rows(std::span<const int> class_ids) const { return rows(split.test, class_ids); }
};

DataView make_data_view(const DatasetManifest& manifest, const SplitSpec& spec);

/// Reproducibility record of every derived seed, keyed by step name.
struct SeedLedger {
  std::uint64_t master = 0;
  std::map<std::string, std::uint64_t> entries;

  std::uint64_t draw(const std::string& tag, std::uint64_t index = 0);
};

struct StepLosses {
  int task = 0;
  int epoch = 0;
  int step = 0;
  double cnce = 0.0;
  double dist = 0.0;
  double margin = 0.0;
  double contras = 0.0;
  double total = 0.0;
  bool contras_skipped = true;
};

struct SynthesisSummary {
  int classes = 0;
  int images = 0;
  double initial_total = 0.0;
  double final_total = 0.0;
  double initial_bn = 0.0;
  double final_bn = 0.0;
  int retries = 0;
};

struct TaskMetrics {
  int task = 0;
  std::vector<int> new_classes;
  std::vector<int> seen_classes;
  /// Accuracy over every seen test sample.
  double average_accuracy = 0.0;
  std::map<int, double> class_accuracy;
  std::map<int, int> class_test_counts;
  /// Entry tau: accuracy on task-tau classes after this task (tau <= task).
  std::vector<double> task_accuracy;
  double train_accuracy = 0.0;
  std::string checkpoint_hash;
  std::string frozen_hash_before;
  std::string frozen_hash_after;
  int replay_quota = 0;
  std::optional<SynthesisSummary> synthesis;
  std::vector<StepLosses> epoch_losses;
};

nlohmann::json to_json(const TaskMetrics& m);
TaskMetrics task_metrics_from_json(const nlohmann::json& j);

struct MetricsReport {
  Strategy strategy = Strategy::Full;
  Ablation ablation;
  std::uint64_t seed = 0;
  TaskSchedule schedule;
  std::vector<TaskMetrics> tasks;

  /// A[t][tau]; rows are ragged, entry defined iff tau <= t.
  std::vector<std::vector<double>> accuracy_matrix() const;
  double final_average_accuracy() const;
  /// Mean over classes seen before the last task of the largest drop from an
  /// earlier task's accuracy to the final accuracy.
  double forgetting() const;
};

struct ExperimentState {
  ModelState model;
  /// f*: the model frozen at the start of the current task.
  std::optional<ModelState> frozen;
  ClassMeanStore means;
  CentroidBank bank;
  std::optional<ClassImpressionSet> impressions;
  SeedLedger seeds;
  std::vector<TaskMetrics> metrics;
  int completed_tasks = 0;
};

/// Optional artifact sink. Empty `dir` writes nothing. Each finished task t
/// leaves task_<t>/{checkpoint.cimp, means.cimp, metrics.json}.
struct RunOutput {
  std::filesystem::path dir;
  bool write_impressions = true;
  bool write_step_metrics = true;
};

/// Memoizes phase-1 states and impression sets within one process so
/// strategies that share a seed do not redo identical work.
class RunCache {
 public:
  const ExperimentState* initial(const std::string& key) const;
  void put_initial(const std::string& key, const ExperimentState& state);
  const ClassImpressionSet* impressions(const std::string& key) const;
  void put_impressions(const std::string& key, const ClassImpressionSet& set);

 private:
  std::map<std::string, std::shared_ptr<const ExperimentState>> initial_;
  std::map<std::string, std::shared_ptr<const ClassImpressionSet>> impressions_;
};

/// Task 1: CNCE-only training from scratch, class means recorded.
ExperimentState run_initial_task(const DataView& data, const TaskSchedule& schedule, const EngineConfig& cfg,
                                 const RunOutput& out = {}, RunCache* cache = nullptr);

struct PseudoLabels {
  std::vector<int> labels;
  std::vector<double> confidence;
};
/// Argmax cosine class and its softmax probability.
PseudoLabels pseudo_label(const ModelState& model, const ImageBatch& unlabeled);
PseudoLabels pseudo_label_features(const ModelState& model, const FeatureBatch& feats);

/// One item of a training stream: a real row or a synthesized image.
struct StreamItem {
  bool synthesized = false;
  /// Manifest row for real items, image index within the class for
  /// synthesized items.
  int index = 0;
  int label = 0;
};

struct TrainingStream {
  std::vector<StreamItem> items;
  int batch_size = 40;

  /// Shuffled batches for one epoch.
  std::vector<std::vector<StreamItem>> epoch(std::uint64_t seed) const;
  std::map<int, int> composition() const;
};

/// New-class rows plus `quota` synthesized images of every old class.
TrainingStream assemble_training_stream(const DataView& data, std::span<const int> new_rows,
                                        const ClassImpressionSet* impressions, std::span<const int> old_classes,
                                        int quota, int batch_size);

/// Quota rule "match-new": the mean training count of the new classes, rounded up.
int match_new_quota(const DataView& data, std::span<const int> new_classes);

/// `preloaded` replaces step (b) when given; it must cover every old class
/// with the task's quota and match the phase synthesis config.
void run_incremental_task(ExperimentState& state, const DataView& data, const TaskSchedule& schedule,
                          std::size_t task_index, const EngineConfig& cfg, const RunOutput& out = {},
                          RunCache* cache = nullptr, const ClassImpressionSet* preloaded = nullptr);

/// Whether the strategy synthesizes impressions and replays them.
bool uses_replay(const EngineConfig& cfg) noexcept;
/// Synthesis settings step (b) of task `task_index` would use.
SynthesisConfig task_synthesis_config(const EngineConfig& cfg, const DataView& data, std::size_t task_index);
/// Replay quota of task `task_index`.
int task_replay_quota(const EngineConfig& cfg, const DataView& data, const TaskSchedule& schedule,
                      std::size_t task_index);

/// Rebuilds the state after `completed` tasks from a run directory:
/// task_<completed>/{checkpoint.cimp, means.cimp, metrics.json}.
ExperimentState load_experiment_state(const std::filesystem::path& run_dir, int completed, std::uint64_t seed);

/// Accuracy of the model on the test split restricted to seen classes.
TaskMetrics evaluate(const ModelState& model, const DataView& data, const TaskSchedule& schedule,
                     std::size_t task_index);

MetricsReport run_schedule(const DataView& data, const TaskSchedule& schedule, const EngineConfig& cfg,
                           const RunOutput& out = {}, RunCache* cache = nullptr);

/// `requested` threads, capped by CI_ENGINE_THREADS when set; at least 1.
int engine_threads(int requested);

}  // namespace cimp
