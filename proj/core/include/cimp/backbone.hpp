#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cimp/archive.hpp"
#include "cimp/tensor.hpp"

namespace cimp {

/// Fixed residual layout: stem conv, three residual blocks of two 3x3 convs,
/// global average pool. Only sizes are configurable. The descriptor is
/// embedded in every checkpoint and must match on load.
struct ArchDescriptor {
  int height = 16;
  int width = 16;
  int channels = 1;
  int stem_width = 16;
  std::array<int, 3> block_widths{16, 32, 64};
  std::array<int, 3> block_strides{1, 2, 2};
  int kernel = 3;
  /// The last block's ReLU is dropped so cosine features can take any sign.
  bool final_relu = false;
  double bn_eps = 1e-5;
  double bn_momentum = 0.1;

  int feature_dim() const noexcept { return block_widths[2]; }
  Shape4 input_shape(int batch) const noexcept { return {batch, height, width, channels}; }
  nlohmann::json to_json() const;
  static ArchDescriptor from_json(const nlohmann::json& j);
  friend bool operator==(const ArchDescriptor&, const ArchDescriptor&) = default;
};

struct Conv2d {
  int kernel = 3;
  int stride = 1;
  int pad = 1;
  int in_channels = 0;
  int out_channels = 0;
  /// (kernel*kernel*in_channels) x out_channels, rows ordered (ky, kx, ci).
  Matrix weight;
};

struct BatchNorm {
  Vector gamma;
  Vector beta;
  Vector running_mean;
  Vector running_var;
  int channels() const noexcept { return static_cast<int>(gamma.size()); }
};

struct ResidualBlock {
  Conv2d conv1;
  BatchNorm bn1;
  Conv2d conv2;
  BatchNorm bn2;
  bool has_projection = false;
  Conv2d proj;
  BatchNorm proj_bn;
};

/// Learnable state carried across tasks.
///
/// Invariants: rows of class_embeddings == seen_classes.size(); embedding
/// width == arch.feature_dim(); running_var >= 0. The cosine head has no bias.
struct ModelState {
  ArchDescriptor arch;
  Conv2d stem;
  BatchNorm stem_bn;
  std::array<ResidualBlock, 3> blocks;
  Matrix class_embeddings;
  double eta = 10.0;
  std::vector<int> seen_classes;

  /// He-normal conv init, identity BN, unit-norm random embeddings.
  static ModelState create(const ArchDescriptor& arch, std::span<const int> class_ids,
                           double eta, std::uint64_t seed);
  /// Same topology with every tensor zeroed. Used as a gradient container.
  static ModelState zeros_like(const ModelState& like);

  int num_classes() const noexcept { return static_cast<int>(seen_classes.size()); }
  int feature_dim() const noexcept { return arch.feature_dim(); }
  /// Row of class `id` in the head; Label error if unseen.
  int class_index(int id) const;
  bool has_class(int id) const noexcept;

  std::vector<BatchNorm*> bn_layers();
  std::vector<const BatchNorm*> bn_layers() const;

  void validate() const;
};

/// Visits every stored tensor in canonical order. `trainable` is false for
/// running statistics.
void for_each_tensor(
    ModelState& model,
    const std::function<void(const std::string& name, std::vector<std::int64_t> shape,
                             std::span<double> values, bool trainable)>& fn);
void for_each_tensor(
    const ModelState& model,
    const std::function<void(const std::string& name, std::vector<std::int64_t> shape,
                             std::span<const double> values, bool trainable)>& fn);

/// SHA-256 (hex) over every tensor, the class ids, eta and the descriptor.
std::string fingerprint(const ModelState& model);

enum class Mode { Train, Eval };

struct BnStat {
  Vector mean;
  Vector var;
};
/// Per-BN-layer batch statistics of the pre-normalization maps, in
/// bn_layers() order.
using BnObservation = std::vector<BnStat>;

/// Gradient of some scalar w.r.t. an observation's batch mean/var.
using BnObservationGrad = std::vector<BnStat>;

struct ConvTape {
  Matrix cols;
  Shape4 in_shape;
  Shape4 out_shape;
};

struct BnTape {
  Matrix xhat;
  /// Statistics used for normalization (batch or running).
  Vector used_mean;
  Vector inv_std;
  BnStat batch;
  bool used_batch_stats = false;
};

struct BlockTape {
  ConvTape conv1;
  BnTape bn1;
  Tensor relu1;
  ConvTape conv2;
  BnTape bn2;
  ConvTape proj;
  BnTape proj_bn;
  Tensor out;
  bool out_relu = true;
};

/// Everything the backward pass needs from one forward pass.
struct ForwardTape {
  Mode mode = Mode::Eval;
  ConvTape stem;
  BnTape stem_bn;
  Tensor stem_out;
  std::array<BlockTape, 3> blocks;
  FeatureBatch features;

  BnObservation observation() const;
};

/// Const forward. In Train mode BN normalizes with batch statistics but the
/// running statistics are NOT touched; see update_running_stats.
ForwardTape forward(const ModelState& model, const ImageBatch& batch, Mode mode);

/// Momentum update of every BN layer's running stats from a Train tape.
void update_running_stats(ModelState& model, const ForwardTape& tape);

/// Eval-mode features. Pure in (model, batch).
FeatureBatch forward_features(const ModelState& model, const ImageBatch& batch);
/// Train mode additionally folds the batch statistics into the running stats.
FeatureBatch forward_features(ModelState& model, const ImageBatch& batch, Mode mode);

/// Batch statistics at every BN input under an eval-mode pass. Never mutates.
BnObservation observe_bn(const ModelState& model, const ImageBatch& batch);

/// Overwrites running stats with an observation (population variance).
void set_running_stats(ModelState& model, const BnObservation& obs);

struct BackwardResult {
  /// Gradients of conv weights and BN affine parameters; running stats and
  /// class embeddings are left zero.
  std::optional<ModelState> params;
  std::optional<Tensor> input;
};

/// Backpropagates d(loss)/d(features) and, optionally, d(loss)/d(batch
/// statistics) at each BN input.
BackwardResult backward(const ModelState& model, const ForwardTape& tape,
                        const FeatureBatch& dfeatures, const BnObservationGrad* bn_grads,
                        bool want_params, bool want_input);

struct NormalizeOptions {
  /// 0 means degenerate rows raise; otherwise norms are floored at epsilon.
  double epsilon = 0.0;
};

/// Row-normalized copy plus the (possibly floored) norms.
struct UnitRows {
  Matrix unit;
  Vector norms;
  /// Rows whose norm was floored at epsilon; those are plain rescales.
  std::vector<bool> floored;
};
UnitRows normalize_rows(const Matrix& rows, NormalizeOptions opts, const char* what);
/// Given d/d(unit rows), returns d/d(raw rows).
Matrix normalize_rows_backward(const UnitRows& unit, const Matrix& dunit);

/// eta * cos(theta_k, f_i), B x K.
Matrix cosine_logits(const ModelState& model, const FeatureBatch& feats,
                     NormalizeOptions opts = {});

struct HeadGrads {
  FeatureBatch dfeatures;
  Matrix dembeddings;
};
HeadGrads cosine_logits_backward(const ModelState& model, const FeatureBatch& feats,
                                 const Matrix& dlogits, NormalizeOptions opts = {});

struct ExtendOptions {
  /// When unset, new rows take the mean norm of the existing rows (1.0 if
  /// there are none).
  std::optional<double> init_scale;
};

/// Appends one random-direction head row per new id. Old rows are untouched.
ModelState extend_classes(const ModelState& model, std::span<const int> new_class_ids,
                          std::uint64_t seed, ExtendOptions opts = {});

struct CheckpointOptions {
  BlobDtype dtype = BlobDtype::Float64;
};

void save_checkpoint(const ModelState& model, const std::filesystem::path& path,
                     CheckpointOptions opts = {});
/// Incompatible error when `expected` is given and differs from the stored
/// descriptor, or when the format version is unknown.
ModelState load_checkpoint(const std::filesystem::path& path,
                           const ArchDescriptor* expected = nullptr);

}  // namespace cimp
