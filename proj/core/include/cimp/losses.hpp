#pragma once

#include <map>
#include <span>
#include <vector>

#include "cimp/backbone.hpp"
#include "cimp/tensor.hpp"

namespace cimp {

/// Weights and temperatures of the incremental training objective.
struct TrainLossConfig {
  double eta = 10.0;
  double margin = 0.7;
  double tau = 1.0;
  double alpha_dist = 5.0;
  double alpha_margin = 1.0;
  double alpha_contras = 1.0;
  /// Only used by the softened-logit distillation variant.
  double distill_temperature = 2.0;
  bool logit_distillation = false;

  void validate() const;
};

/// A loss value together with its gradients w.r.t. the batch features and
/// the class-embedding matrix. Either gradient may be empty (0x0) when the
/// loss does not depend on it.
struct LossTerm {
  double value = 0.0;
  FeatureBatch dfeatures;
  Matrix dembeddings;
};

/// Mean cross-entropy of cosine logits at the true class.
LossTerm cnce_loss(const FeatureBatch& feats, std::span<const int> labels, const ModelState& model);

/// Hinge on old-class anchors: every new-class embedding must sit at least
/// `margin` further (in cosine) from the anchor than its own class does.
/// Averaged over anchors, summed over new classes.
LossTerm margin_loss(const FeatureBatch& synth_feats, std::span<const int> synth_labels,
                     const ModelState& model, std::span<const int> new_class_ids, double margin);

/// Mean of 1 - cos(f*(x), f(x)). Only dfeatures is populated.
LossTerm distillation_loss(const FeatureBatch& feats, const FeatureBatch& old_feats);

/// Softened-logit knowledge distillation over the classes the old model
/// knows: T^2 * KL(softmax(old/T) || softmax(new/T)), batch mean.
LossTerm logit_distillation_loss(const FeatureBatch& feats, const FeatureBatch& old_feats,
                                 const ModelState& model, const ModelState& old_model,
                                 double temperature);

enum class Domain { Source, Target };

struct Centroid {
  Vector value;
  bool initialized = false;
};

struct ClassCentroids {
  Centroid source;
  Centroid target;
  bool eligible() const noexcept { return source.initialized && target.initialized; }
};

/// Records how one batch moved the centroids, so gradients on the centroids
/// can be chained back to the batch features.
struct CentroidUpdate {
  Domain domain = Domain::Source;
  struct Contribution {
    int class_id = 0;
    /// Batch rows that belong to the class.
    std::vector<int> rows;
    /// d(centroid)/d(feature row): (1 - momentum) / n, or 1 / n on first sight.
    double weight = 0.0;
  };
  std::vector<Contribution> contributions;
};

/// Per-class source/target feature centroids with EMA momentum.
class CentroidBank {
 public:
  CentroidBank() = default;
  CentroidBank(int feature_dim, double momentum);

  int feature_dim() const noexcept { return feature_dim_; }
  double momentum() const noexcept { return momentum_; }
  const std::map<int, ClassCentroids>& classes() const noexcept { return classes_; }
  const ClassCentroids* find(int class_id) const;

  /// c <- momentum * c + (1 - momentum) * batch_class_mean. The first
  /// observation of a class sets c directly. Absent classes are untouched.
  CentroidUpdate update(const FeatureBatch& feats, std::span<const int> labels, Domain domain);

  void set(int class_id, Domain domain, const Vector& value);
  void reset();

 private:
  int feature_dim_ = 0;
  double momentum_ = 0.99;
  std::map<int, ClassCentroids> classes_;
};

struct ContrastiveResult {
  double value = 0.0;
  /// No old class had both centroids; value is 0 and there are no gradients.
  bool skipped = false;
  int eligible_classes = 0;
  /// d(loss)/d(centroid) per class id.
  std::map<int, Vector> dsource;
  std::map<int, Vector> dtarget;
};

/// Centroid-level InfoNCE over eligible old classes: pull each class's
/// source and target centroids together against every other eligible
/// class's source and target centroids.
ContrastiveResult contrastive_loss(const CentroidBank& bank, std::span<const int> old_class_ids,
                                   double tau);

/// Chains centroid gradients back to batch-feature gradients (B x D) using the
/// updates that produced the current centroids.
FeatureBatch chain_centroid_grads(const ContrastiveResult& result,
                                  std::span<const CentroidUpdate> updates, int batch_rows,
                                  int feature_dim);

struct LossParts {
  LossTerm cnce;
  LossTerm dist;
  LossTerm margin;
  LossTerm contras;
};

/// cnce + a_dist * dist + a_margin * margin + a_contras * contras, for values
/// and gradients alike. Terms with a zero weight are skipped entirely.
LossTerm total_loss(const LossParts& parts, const TrainLossConfig& cfg);

}  // namespace cimp
