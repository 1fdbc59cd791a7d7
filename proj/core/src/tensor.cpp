#include "cimp/tensor.hpp"

#include <algorithm>
#include <cmath>

#include "cimp/error.hpp"

namespace cimp {

Tensor::Tensor(Shape4 shape, std::vector<double> data) : shape_(shape), data_(std::move(data)) {
  require(data_.size() == shape_.size(), ErrorKind::Shape,
          "tensor data length " + std::to_string(data_.size()) + " does not match shape");
}

bool Tensor::all_finite() const noexcept {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

Tensor gather(const Tensor& src, std::span<const int> indices) {
  Shape4 shape = src.shape();
  shape.n = static_cast<int>(indices.size());
  Tensor out(shape);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    require(indices[i] >= 0 && indices[i] < src.n(), ErrorKind::Shape, "gather index out of range");
    auto from = src.item(indices[i]);
    std::copy(from.begin(), from.end(), out.item(static_cast<int>(i)).begin());
  }
  return out;
}

Tensor concat(std::span<const Tensor* const> parts) {
  require(!parts.empty(), ErrorKind::Shape, "concat of zero tensors");
  Shape4 shape = parts.front()->shape();
  shape.n = 0;
  for (const Tensor* t : parts) {
    require(t->h() == shape.h && t->w() == shape.w && t->c() == shape.c, ErrorKind::Shape,
            "concat geometry mismatch");
    shape.n += t->n();
  }
  std::vector<double> data;
  data.reserve(shape.size());
  for (const Tensor* t : parts) data.insert(data.end(), t->storage().begin(), t->storage().end());
  return Tensor(shape, std::move(data));
}

}  // namespace cimp
