#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include <Eigen/Dense>

namespace cimp {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
using MatrixMap = Eigen::Map<Matrix>;
using ConstMatrixMap = Eigen::Map<const Matrix>;

struct Shape4 {
  int n = 0;
  int h = 0;
  int w = 0;
  int c = 0;

  std::size_t size() const noexcept {
    return static_cast<std::size_t>(n) * h * w * c;
  }
  std::size_t pixels_per_item() const noexcept {
    return static_cast<std::size_t>(h) * w * c;
  }
  friend bool operator==(const Shape4&, const Shape4&) = default;
};

/// Dense NHWC tensor of doubles. Viewed as a (n*h*w) x c row-major matrix,
/// which is the layout every convolution and batch-norm kernel works in.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape4 shape, double fill = 0.0)
      : shape_(shape), data_(shape.size(), fill) {}
  Tensor(Shape4 shape, std::vector<double> data);

  const Shape4& shape() const noexcept { return shape_; }
  int n() const noexcept { return shape_.n; }
  int h() const noexcept { return shape_.h; }
  int w() const noexcept { return shape_.w; }
  int c() const noexcept { return shape_.c; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }
  std::vector<double>& storage() noexcept { return data_; }
  const std::vector<double>& storage() const noexcept { return data_; }

  double& at(int n, int y, int x, int ch) noexcept {
    return data_[index(n, y, x, ch)];
  }
  double at(int n, int y, int x, int ch) const noexcept {
    return data_[index(n, y, x, ch)];
  }

  /// Rows are spatial positions (n, y, x); columns are channels.
  MatrixMap as_matrix() {
    return {data_.data(), static_cast<Eigen::Index>(shape_.n) * shape_.h * shape_.w, shape_.c};
  }
  ConstMatrixMap as_matrix() const {
    return {data_.data(), static_cast<Eigen::Index>(shape_.n) * shape_.h * shape_.w, shape_.c};
  }

  std::span<double> item(int n) noexcept {
    return std::span<double>(data_).subspan(n * shape_.pixels_per_item(), shape_.pixels_per_item());
  }
  std::span<const double> item(int n) const noexcept {
    return std::span<const double>(data_).subspan(n * shape_.pixels_per_item(),
                                                  shape_.pixels_per_item());
  }

  bool all_finite() const noexcept;

 private:
  std::size_t index(int n, int y, int x, int ch) const noexcept {
    return ((static_cast<std::size_t>(n) * shape_.h + y) * shape_.w + x) * shape_.c + ch;
  }

  Shape4 shape_;
  std::vector<double> data_;
};

using ImageBatch = Tensor;
using LabelBatch = std::vector<int>;
/// B x D matrix of extractor outputs.
using FeatureBatch = Matrix;

/// Gathers items `indices` of `src` into a new batch.
Tensor gather(const Tensor& src, std::span<const int> indices);

/// Concatenates along the batch axis; all inputs must share h, w, c.
Tensor concat(std::span<const Tensor* const> parts);

}  // namespace cimp
