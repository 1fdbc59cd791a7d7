#include "cimp/backbone.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <random>

#include "cimp/error.hpp"

namespace cimp {
namespace {

Conv2d make_conv(int kernel, int stride, int in_channels, int out_channels) {
  Conv2d conv;
  conv.kernel = kernel;
  conv.stride = stride;
  conv.pad = kernel / 2;
  conv.in_channels = in_channels;
  conv.out_channels = out_channels;
  conv.weight = Matrix::Zero(kernel * kernel * in_channels, out_channels);
  return conv;
}

BatchNorm make_bn(int channels) {
  BatchNorm bn;
  bn.gamma = Vector::Ones(channels);
  bn.beta = Vector::Zero(channels);
  bn.running_mean = Vector::Zero(channels);
  bn.running_var = Vector::Ones(channels);
  return bn;
}

int out_extent(int in, int kernel, int stride, int pad) {
  return (in + 2 * pad - kernel) / stride + 1;
}

Matrix im2col(const Tensor& x, const Conv2d& conv, Shape4& out_shape) {
  const int k = conv.kernel;
  const int c = x.c();
  out_shape = {x.n(), out_extent(x.h(), k, conv.stride, conv.pad),
               out_extent(x.w(), k, conv.stride, conv.pad), conv.out_channels};
  Matrix cols(static_cast<Eigen::Index>(out_shape.n) * out_shape.h * out_shape.w, k * k * c);
  const double* src = x.storage().data();
  for (int n = 0; n < x.n(); ++n) {
    for (int oy = 0; oy < out_shape.h; ++oy) {
      for (int ox = 0; ox < out_shape.w; ++ox) {
        double* row = cols.row((static_cast<Eigen::Index>(n) * out_shape.h + oy) * out_shape.w + ox).data();
        for (int ky = 0; ky < k; ++ky) {
          const int iy = oy * conv.stride - conv.pad + ky;
          if (iy < 0 || iy >= x.h()) {
            std::fill(row + ky * k * c, row + (ky + 1) * k * c, 0.0);
            continue;
          }
          for (int kx = 0; kx < k; ++kx) {
            const int ix = ox * conv.stride - conv.pad + kx;
            double* dst = row + (ky * k + kx) * c;
            if (ix < 0 || ix >= x.w()) {
              std::fill(dst, dst + c, 0.0);
              continue;
            }
            const double* px = src + ((static_cast<std::size_t>(n) * x.h() + iy) * x.w() + ix) * c;
            std::copy(px, px + c, dst);
          }
        }
      }
    }
  }
  return cols;
}

Tensor col2im(const Matrix& dcols, const Conv2d& conv, const Shape4& in_shape, const Shape4& out_shape) {
  const int k = conv.kernel;
  const int c = in_shape.c;
  Tensor dx(in_shape);
  double* dst = dx.storage().data();
  for (int n = 0; n < in_shape.n; ++n) {
    for (int oy = 0; oy < out_shape.h; ++oy) {
      for (int ox = 0; ox < out_shape.w; ++ox) {
        const double* row =
            dcols.row((static_cast<Eigen::Index>(n) * out_shape.h + oy) * out_shape.w + ox).data();
        for (int ky = 0; ky < k; ++ky) {
          const int iy = oy * conv.stride - conv.pad + ky;
          if (iy < 0 || iy >= in_shape.h) continue;
          for (int kx = 0; kx < k; ++kx) {
            const int ix = ox * conv.stride - conv.pad + kx;
            if (ix < 0 || ix >= in_shape.w) continue;
            double* px = dst + ((static_cast<std::size_t>(n) * in_shape.h + iy) * in_shape.w + ix) * c;
            const double* g = row + (ky * k + kx) * c;
            for (int ch = 0; ch < c; ++ch) px[ch] += g[ch];
          }
        }
      }
    }
  }
  return dx;
}

Tensor conv_forward(const Conv2d& conv, const Tensor& x, ConvTape& tape) {
  require(x.c() == conv.in_channels, ErrorKind::Shape, "conv input channel mismatch");
  tape.in_shape = x.shape();
  tape.cols = im2col(x, conv, tape.out_shape);
  Tensor out(tape.out_shape);
  out.as_matrix().noalias() = tape.cols * conv.weight;
  return out;
}

/// Returns d/d(input) when `want_input`; accumulates d/d(weight) into `dweight`.
Tensor conv_backward(const Conv2d& conv, const ConvTape& tape, const Tensor& dout,
                     Matrix* dweight, bool want_input) {
  if (dweight != nullptr) dweight->noalias() += tape.cols.transpose() * dout.as_matrix();
  if (!want_input) return {};
  Matrix dcols = dout.as_matrix() * conv.weight.transpose();
  return col2im(dcols, conv, tape.in_shape, tape.out_shape);
}

Tensor bn_forward(const BatchNorm& bn, const Tensor& x, bool batch_stats, double eps, BnTape& tape) {
  require(x.c() == bn.channels(), ErrorKind::Shape, "batch-norm channel mismatch");
  auto X = x.as_matrix();
  const double rows = static_cast<double>(X.rows());
  tape.batch.mean = X.colwise().mean().transpose();
  Matrix centered = X.rowwise() - tape.batch.mean.transpose();
  tape.batch.var = centered.array().square().colwise().sum().transpose() / rows;
  tape.used_batch_stats = batch_stats;
  tape.used_mean = batch_stats ? tape.batch.mean : bn.running_mean;
  const Vector& var = batch_stats ? tape.batch.var : bn.running_var;
  tape.inv_std = (var.array() + eps).rsqrt().matrix();
  if (batch_stats) {
    tape.xhat = centered.array().rowwise() * tape.inv_std.transpose().array();
  } else {
    tape.xhat = (X.rowwise() - tape.used_mean.transpose()).array().rowwise() *
                tape.inv_std.transpose().array();
  }
  Tensor out(x.shape());
  out.as_matrix() = (tape.xhat.array().rowwise() * bn.gamma.transpose().array()).rowwise() +
                    bn.beta.transpose().array();
  return out;
}

Tensor bn_backward(const BatchNorm& bn, const BnTape& tape, const Tensor& dy, BatchNorm* grads,
                   const BnStat* stat_grad) {
  auto dY = dy.as_matrix();
  const double rows = static_cast<double>(dY.rows());
  if (grads != nullptr) {
    grads->gamma += (dY.array() * tape.xhat.array()).colwise().sum().transpose().matrix();
    grads->beta += dY.colwise().sum().transpose();
  }
  Matrix dxhat = dY.array().rowwise() * bn.gamma.transpose().array();
  Tensor dx(dy.shape());
  auto dX = dx.as_matrix();
  if (tape.used_batch_stats) {
    const Eigen::RowVectorXd sum_dxhat = dxhat.colwise().sum();
    const Eigen::RowVectorXd sum_dxhat_xhat = (dxhat.array() * tape.xhat.array()).colwise().sum();
    dX = ((rows * dxhat.array()).rowwise() - sum_dxhat.array() -
          tape.xhat.array().rowwise() * sum_dxhat_xhat.array())
             .rowwise() *
         (tape.inv_std.transpose().array() / rows);
  } else {
    dX = dxhat.array().rowwise() * tape.inv_std.transpose().array();
  }
  if (stat_grad != nullptr) {
    // x - batch_mean, recovered from the normalized values.
    const Vector shift = tape.used_mean - tape.batch.mean;
    Matrix centered = (tape.xhat.array().rowwise() / tape.inv_std.transpose().array()).rowwise() +
                      shift.transpose().array();
    dX.rowwise() += (stat_grad->mean / rows).transpose();
    dX += (centered.array().rowwise() * (2.0 * stat_grad->var / rows).transpose().array()).matrix();
  }
  return dx;
}

void relu_inplace(Tensor& t) {
  for (double& v : t.storage()) v = v > 0.0 ? v : 0.0;
}

Tensor relu_backward(const Tensor& out, Tensor dy) {
  const auto& y = out.storage();
  auto& g = dy.storage();
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (!(y[i] > 0.0)) g[i] = 0.0;
  }
  return dy;
}

Tensor add(const Tensor& a, const Tensor& b) {
  Tensor out(a.shape());
  out.as_matrix() = a.as_matrix() + b.as_matrix();
  return out;
}

void append_stat(const BnTape& t, BnObservation& obs) { obs.push_back(t.batch); }

}  // namespace

nlohmann::json ArchDescriptor::to_json() const {
  return {{"name", "resnet-3x2"},
          {"height", height},
          {"width", width},
          {"channels", channels},
          {"stem_width", stem_width},
          {"block_widths", block_widths},
          {"block_strides", block_strides},
          {"kernel", kernel},
          {"final_relu", final_relu},
          {"bn_eps", bn_eps},
          {"bn_momentum", bn_momentum}};
}

ArchDescriptor ArchDescriptor::from_json(const nlohmann::json& j) {
  ArchDescriptor a;
  try {
    require(j.at("name").get<std::string>() == "resnet-3x2", ErrorKind::Incompatible,
            "unknown architecture '" + j.at("name").get<std::string>() + "'");
    a.height = j.at("height").get<int>();
    a.width = j.at("width").get<int>();
    a.channels = j.at("channels").get<int>();
    a.stem_width = j.at("stem_width").get<int>();
    a.block_widths = j.at("block_widths").get<std::array<int, 3>>();
    a.block_strides = j.at("block_strides").get<std::array<int, 3>>();
    a.kernel = j.at("kernel").get<int>();
    a.final_relu = j.at("final_relu").get<bool>();
    a.bn_eps = j.at("bn_eps").get<double>();
    a.bn_momentum = j.at("bn_momentum").get<double>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Incompatible, std::string("malformed architecture descriptor: ") + e.what());
  }
  return a;
}

ModelState ModelState::create(const ArchDescriptor& arch, std::span<const int> class_ids,
                              double eta, std::uint64_t seed) {
  require(eta > 0.0, ErrorKind::Contract, "eta must be positive");
  require(arch.height > 0 && arch.width > 0 && arch.channels > 0, ErrorKind::Shape,
          "architecture input geometry must be positive");
  ModelState m;
  m.arch = arch;
  m.eta = eta;
  m.seen_classes.assign(class_ids.begin(), class_ids.end());

  m.stem = make_conv(arch.kernel, 1, arch.channels, arch.stem_width);
  m.stem_bn = make_bn(arch.stem_width);
  int in = arch.stem_width;
  for (std::size_t i = 0; i < 3; ++i) {
    const int width = arch.block_widths[i];
    const int stride = arch.block_strides[i];
    auto& b = m.blocks[i];
    b.conv1 = make_conv(arch.kernel, stride, in, width);
    b.bn1 = make_bn(width);
    b.conv2 = make_conv(arch.kernel, 1, width, width);
    b.bn2 = make_bn(width);
    b.has_projection = in != width || stride != 1;
    if (b.has_projection) {
      b.proj = make_conv(1, stride, in, width);
      b.proj_bn = make_bn(width);
    }
    in = width;
  }

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto he_init = [&](Conv2d& conv) {
    const double std = std::sqrt(2.0 / static_cast<double>(conv.weight.rows()));
    for (Eigen::Index i = 0; i < conv.weight.size(); ++i) conv.weight.data()[i] = std * normal(rng);
  };
  he_init(m.stem);
  for (auto& b : m.blocks) {
    he_init(b.conv1);
    he_init(b.conv2);
    if (b.has_projection) he_init(b.proj);
  }
  m.class_embeddings = Matrix(m.num_classes(), arch.feature_dim());
  for (Eigen::Index r = 0; r < m.class_embeddings.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.class_embeddings.cols(); ++c) m.class_embeddings(r, c) = normal(rng);
    m.class_embeddings.row(r).normalize();
  }
  return m;
}

ModelState ModelState::zeros_like(const ModelState& like) {
  ModelState z = like;
  for_each_tensor(z, [](const std::string&, std::vector<std::int64_t>, std::span<double> v, bool) {
    std::fill(v.begin(), v.end(), 0.0);
  });
  return z;
}

int ModelState::class_index(int id) const {
  auto it = std::find(seen_classes.begin(), seen_classes.end(), id);
  require(it != seen_classes.end(), ErrorKind::Label,
          "class " + std::to_string(id) + " is not among the seen classes");
  return static_cast<int>(it - seen_classes.begin());
}

bool ModelState::has_class(int id) const noexcept {
  return std::find(seen_classes.begin(), seen_classes.end(), id) != seen_classes.end();
}

std::vector<BatchNorm*> ModelState::bn_layers() {
  std::vector<BatchNorm*> out{&stem_bn};
  for (auto& b : blocks) {
    out.push_back(&b.bn1);
    out.push_back(&b.bn2);
    if (b.has_projection) out.push_back(&b.proj_bn);
  }
  return out;
}

std::vector<const BatchNorm*> ModelState::bn_layers() const {
  auto layers = const_cast<ModelState*>(this)->bn_layers();
  return {layers.begin(), layers.end()};
}

void ModelState::validate() const {
  require(class_embeddings.rows() == num_classes(), ErrorKind::Shape,
          "head rows do not match the number of seen classes");
  require(class_embeddings.cols() == feature_dim(), ErrorKind::Shape,
          "head width does not match the feature dimension");
  for (const BatchNorm* bn : bn_layers()) {
    require((bn->running_var.array() >= 0.0).all(), ErrorKind::Numeric,
            "negative running variance");
  }
}

namespace {

template <typename Model, typename Fn>
void visit_tensors(Model& m, Fn&& fn) {
  auto conv = [&](const std::string& name, auto& c) {
    fn(name + ".weight",
       std::vector<std::int64_t>{c.kernel, c.kernel, c.in_channels, c.out_channels},
       c.weight.data(), c.weight.size(), true);
  };
  auto bn = [&](const std::string& name, auto& b) {
    const std::vector<std::int64_t> shape{b.gamma.size()};
    fn(name + ".gamma", shape, b.gamma.data(), b.gamma.size(), true);
    fn(name + ".beta", shape, b.beta.data(), b.beta.size(), true);
    fn(name + ".running_mean", shape, b.running_mean.data(), b.running_mean.size(), false);
    fn(name + ".running_var", shape, b.running_var.data(), b.running_var.size(), false);
  };
  conv("stem", m.stem);
  bn("stem_bn", m.stem_bn);
  for (std::size_t i = 0; i < m.blocks.size(); ++i) {
    auto& b = m.blocks[i];
    const std::string p = "blocks." + std::to_string(i) + ".";
    conv(p + "conv1", b.conv1);
    bn(p + "bn1", b.bn1);
    conv(p + "conv2", b.conv2);
    bn(p + "bn2", b.bn2);
    if (b.has_projection) {
      conv(p + "proj", b.proj);
      bn(p + "proj_bn", b.proj_bn);
    }
  }
  fn("head.embeddings",
     std::vector<std::int64_t>{m.class_embeddings.rows(), m.class_embeddings.cols()},
     m.class_embeddings.data(), m.class_embeddings.size(), true);
}

}  // namespace

void for_each_tensor(
    ModelState& model,
    const std::function<void(const std::string&, std::vector<std::int64_t>, std::span<double>, bool)>& fn) {
  visit_tensors(model, [&](const std::string& name, std::vector<std::int64_t> shape, double* data,
                           Eigen::Index size, bool trainable) {
    fn(name, std::move(shape), std::span<double>(data, static_cast<std::size_t>(size)), trainable);
  });
}

void for_each_tensor(
    const ModelState& model,
    const std::function<void(const std::string&, std::vector<std::int64_t>, std::span<const double>, bool)>& fn) {
  visit_tensors(model, [&](const std::string& name, std::vector<std::int64_t> shape,
                           const double* data, Eigen::Index size, bool trainable) {
    fn(name, std::move(shape), std::span<const double>(data, static_cast<std::size_t>(size)), trainable);
  });
}

std::string fingerprint(const ModelState& model) {
  std::vector<std::byte> bytes;
  auto put_text = [&](const std::string& s) {
    for (char c : s) bytes.push_back(static_cast<std::byte>(c));
  };
  auto put_double = [&](double v) {
    auto bits = std::bit_cast<std::uint64_t>(v);
    for (int i = 0; i < 8; ++i) bytes.push_back(static_cast<std::byte>((bits >> (8 * i)) & 0xFF));
  };
  put_text(model.arch.to_json().dump());
  for (int id : model.seen_classes) put_text(std::to_string(id) + ",");
  put_double(model.eta);
  for_each_tensor(model, [&](const std::string& name, std::vector<std::int64_t>,
                             std::span<const double> values, bool) {
    put_text(name);
    for (double v : values) put_double(v);
  });
  return sha256_hex(bytes);
}

BnObservation ForwardTape::observation() const {
  BnObservation obs;
  append_stat(stem_bn, obs);
  for (const auto& b : blocks) {
    append_stat(b.bn1, obs);
    append_stat(b.bn2, obs);
    if (b.proj_bn.xhat.size() > 0) append_stat(b.proj_bn, obs);
  }
  return obs;
}

ForwardTape forward(const ModelState& model, const ImageBatch& batch, Mode mode) {
  const auto& arch = model.arch;
  require(batch.n() >= 1, ErrorKind::Shape, "batch must contain at least one image");
  require(batch.h() == arch.height && batch.w() == arch.width && batch.c() == arch.channels,
          ErrorKind::Shape,
          "batch geometry " + std::to_string(batch.h()) + "x" + std::to_string(batch.w()) + "x" +
              std::to_string(batch.c()) + " does not match the model input " +
              std::to_string(arch.height) + "x" + std::to_string(arch.width) + "x" +
              std::to_string(arch.channels));
  const bool batch_stats = mode == Mode::Train;
  const double eps = arch.bn_eps;

  ForwardTape tape;
  tape.mode = mode;
  Tensor x = conv_forward(model.stem, batch, tape.stem);
  x = bn_forward(model.stem_bn, x, batch_stats, eps, tape.stem_bn);
  relu_inplace(x);
  tape.stem_out = x;

  for (std::size_t i = 0; i < model.blocks.size(); ++i) {
    const auto& b = model.blocks[i];
    auto& bt = tape.blocks[i];
    const Tensor& in = i == 0 ? tape.stem_out : tape.blocks[i - 1].out;
    Tensor h = conv_forward(b.conv1, in, bt.conv1);
    h = bn_forward(b.bn1, h, batch_stats, eps, bt.bn1);
    relu_inplace(h);
    bt.relu1 = h;
    h = conv_forward(b.conv2, bt.relu1, bt.conv2);
    h = bn_forward(b.bn2, h, batch_stats, eps, bt.bn2);
    Tensor shortcut;
    if (b.has_projection) {
      shortcut = conv_forward(b.proj, in, bt.proj);
      shortcut = bn_forward(b.proj_bn, shortcut, batch_stats, eps, bt.proj_bn);
    }
    bt.out = add(h, b.has_projection ? shortcut : in);
    bt.out_relu = i + 1 < model.blocks.size() || arch.final_relu;
    if (bt.out_relu) relu_inplace(bt.out);
  }

  const Tensor& last = tape.blocks.back().out;
  const int spatial = last.h() * last.w();
  tape.features = FeatureBatch::Zero(last.n(), last.c());
  auto L = last.as_matrix();
  for (int n = 0; n < last.n(); ++n) {
    tape.features.row(n) = L.middleRows(static_cast<Eigen::Index>(n) * spatial, spatial).colwise().mean();
  }
  require(tape.features.allFinite(), ErrorKind::Numeric, "non-finite features in forward pass");
  return tape;
}

void update_running_stats(ModelState& model, const ForwardTape& tape) {
  require(tape.mode == Mode::Train, ErrorKind::Contract, "running stats need a train-mode tape");
  const double momentum = model.arch.bn_momentum;
  const auto obs = tape.observation();
  auto layers = model.bn_layers();
  require(obs.size() == layers.size(), ErrorKind::Shape, "observation/BN layer count mismatch");
  for (std::size_t i = 0; i < layers.size(); ++i) {
    layers[i]->running_mean = (1.0 - momentum) * layers[i]->running_mean + momentum * obs[i].mean;
    layers[i]->running_var = (1.0 - momentum) * layers[i]->running_var + momentum * obs[i].var;
  }
}

FeatureBatch forward_features(const ModelState& model, const ImageBatch& batch) {
  return forward(model, batch, Mode::Eval).features;
}

FeatureBatch forward_features(ModelState& model, const ImageBatch& batch, Mode mode) {
  ForwardTape tape = forward(model, batch, mode);
  if (mode == Mode::Train) update_running_stats(model, tape);
  return std::move(tape.features);
}

BnObservation observe_bn(const ModelState& model, const ImageBatch& batch) {
  return forward(model, batch, Mode::Eval).observation();
}

void set_running_stats(ModelState& model, const BnObservation& obs) {
  auto layers = model.bn_layers();
  require(obs.size() == layers.size(), ErrorKind::Shape, "observation/BN layer count mismatch");
  for (std::size_t i = 0; i < layers.size(); ++i) {
    require(obs[i].mean.size() == layers[i]->channels() && obs[i].var.size() == layers[i]->channels(),
            ErrorKind::Shape, "observation channel mismatch");
    layers[i]->running_mean = obs[i].mean;
    layers[i]->running_var = obs[i].var;
  }
}

BackwardResult backward(const ModelState& model, const ForwardTape& tape,
                        const FeatureBatch& dfeatures, const BnObservationGrad* bn_grads,
                        bool want_params, bool want_input) {
  const Tensor& last = tape.blocks.back().out;
  require(dfeatures.rows() == last.n() && dfeatures.cols() == last.c(), ErrorKind::Shape,
          "feature gradient shape mismatch");
  const std::size_t bn_count = model.bn_layers().size();
  require(bn_grads == nullptr || bn_grads->size() == bn_count, ErrorKind::Shape,
          "BN statistic gradient layer count mismatch");

  BackwardResult result;
  ModelState* g = nullptr;
  if (want_params) {
    result.params = ModelState::zeros_like(model);
    g = &*result.params;
  }
  // BN layers are consumed in reverse bn_layers() order.
  std::size_t bn_cursor = bn_count;
  auto next_stat_grad = [&]() -> const BnStat* {
    --bn_cursor;
    return bn_grads != nullptr ? &(*bn_grads)[bn_cursor] : nullptr;
  };

  const int spatial = last.h() * last.w();
  Tensor dout(last.shape());
  {
    auto D = dout.as_matrix();
    for (int n = 0; n < last.n(); ++n) {
      D.middleRows(static_cast<Eigen::Index>(n) * spatial, spatial).rowwise() =
          dfeatures.row(n) / static_cast<double>(spatial);
    }
  }

  for (int i = static_cast<int>(model.blocks.size()) - 1; i >= 0; --i) {
    const auto& b = model.blocks[i];
    const auto& bt = tape.blocks[i];
    ResidualBlock* gb = g != nullptr ? &g->blocks[i] : nullptr;
    if (bt.out_relu) dout = relu_backward(bt.out, std::move(dout));

    Tensor dshortcut;
    if (b.has_projection) {
      const BnStat* sg = next_stat_grad();
      Tensor d = bn_backward(b.proj_bn, bt.proj_bn, dout, gb ? &gb->proj_bn : nullptr, sg);
      dshortcut = conv_backward(b.proj, bt.proj, d, gb ? &gb->proj.weight : nullptr, true);
    } else {
      dshortcut = dout;
    }
    const BnStat* sg2 = next_stat_grad();
    Tensor d = bn_backward(b.bn2, bt.bn2, dout, gb ? &gb->bn2 : nullptr, sg2);
    d = conv_backward(b.conv2, bt.conv2, d, gb ? &gb->conv2.weight : nullptr, true);
    d = relu_backward(bt.relu1, std::move(d));
    const BnStat* sg1 = next_stat_grad();
    d = bn_backward(b.bn1, bt.bn1, d, gb ? &gb->bn1 : nullptr, sg1);
    d = conv_backward(b.conv1, bt.conv1, d, gb ? &gb->conv1.weight : nullptr, true);
    dout = add(d, dshortcut);
  }

  dout = relu_backward(tape.stem_out, std::move(dout));
  const BnStat* sg = next_stat_grad();
  dout = bn_backward(model.stem_bn, tape.stem_bn, dout, g ? &g->stem_bn : nullptr, sg);
  Tensor dinput = conv_backward(model.stem, tape.stem, dout, g ? &g->stem.weight : nullptr, want_input);
  if (want_input) result.input = std::move(dinput);
  return result;
}

UnitRows normalize_rows(const Matrix& rows, NormalizeOptions opts, const char* what) {
  UnitRows out;
  out.norms = rows.rowwise().norm();
  out.unit = rows;
  out.floored.assign(static_cast<std::size_t>(rows.rows()), false);
  for (Eigen::Index i = 0; i < rows.rows(); ++i) {
    double n = out.norms(i);
    if (opts.epsilon > 0.0) {
      out.floored[i] = n < opts.epsilon;
      n = std::max(n, opts.epsilon);
    } else if (!(n > 0.0)) {
      fail(ErrorKind::DegenerateNorm,
           std::string("zero-norm ") + what + " row " + std::to_string(i));
    }
    out.norms(i) = n;
    out.unit.row(i) /= n;
  }
  return out;
}

Matrix normalize_rows_backward(const UnitRows& unit, const Matrix& dunit) {
  Matrix d(dunit.rows(), dunit.cols());
  for (Eigen::Index i = 0; i < dunit.rows(); ++i) {
    const auto u = unit.unit.row(i);
    if (unit.floored[i]) {
      d.row(i) = dunit.row(i) / unit.norms(i);
    } else {
      d.row(i) = (dunit.row(i) - u * u.dot(dunit.row(i))) / unit.norms(i);
    }
  }
  return d;
}

Matrix cosine_logits(const ModelState& model, const FeatureBatch& feats, NormalizeOptions opts) {
  require(model.num_classes() >= 1, ErrorKind::Contract, "cosine head has no classes");
  require(feats.cols() == model.class_embeddings.cols(), ErrorKind::Shape,
          "feature dimension does not match the head");
  const UnitRows f = normalize_rows(feats, opts, "feature");
  const UnitRows t = normalize_rows(model.class_embeddings, opts, "class embedding");
  return model.eta * f.unit * t.unit.transpose();
}

HeadGrads cosine_logits_backward(const ModelState& model, const FeatureBatch& feats,
                                 const Matrix& dlogits, NormalizeOptions opts) {
  const UnitRows f = normalize_rows(feats, opts, "feature");
  const UnitRows t = normalize_rows(model.class_embeddings, opts, "class embedding");
  const Matrix df_unit = model.eta * dlogits * t.unit;
  const Matrix dt_unit = model.eta * dlogits.transpose() * f.unit;
  return {normalize_rows_backward(f, df_unit), normalize_rows_backward(t, dt_unit)};
}

ModelState extend_classes(const ModelState& model, std::span<const int> new_class_ids,
                          std::uint64_t seed, ExtendOptions opts) {
  for (std::size_t i = 0; i < new_class_ids.size(); ++i) {
    const int id = new_class_ids[i];
    require(!model.has_class(id), ErrorKind::Conflict,
            "class " + std::to_string(id) + " is already seen");
    for (std::size_t j = 0; j < i; ++j) {
      require(new_class_ids[j] != id, ErrorKind::Conflict,
              "class " + std::to_string(id) + " listed twice");
    }
  }
  if (new_class_ids.empty()) return model;

  double scale = 1.0;
  if (opts.init_scale) {
    scale = *opts.init_scale;
  } else if (model.num_classes() > 0) {
    scale = model.class_embeddings.rowwise().norm().mean();
  }
  ModelState out = model;
  const Eigen::Index old_rows = model.class_embeddings.rows();
  const Eigen::Index extra = static_cast<Eigen::Index>(new_class_ids.size());
  out.class_embeddings.resize(old_rows + extra, model.feature_dim());
  out.class_embeddings.topRows(old_rows) = model.class_embeddings;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (Eigen::Index r = old_rows; r < old_rows + extra; ++r) {
    for (Eigen::Index c = 0; c < out.class_embeddings.cols(); ++c) out.class_embeddings(r, c) = normal(rng);
    out.class_embeddings.row(r) *= scale / out.class_embeddings.row(r).norm();
  }
  out.seen_classes.insert(out.seen_classes.end(), new_class_ids.begin(), new_class_ids.end());
  return out;
}

void save_checkpoint(const ModelState& model, const std::filesystem::path& path,
                     CheckpointOptions opts) {
  model.validate();
  std::vector<Blob> blobs;
  for_each_tensor(model, [&](const std::string& name, std::vector<std::int64_t> shape,
                             std::span<const double> values, bool) {
    blobs.push_back({name, std::move(shape), {values.begin(), values.end()}});
  });
  nlohmann::json meta = {{"architecture", model.arch.to_json()},
                         {"class_ids", model.seen_classes},
                         {"eta", model.eta}};
  write_archive(path, "checkpoint", meta, blobs, opts.dtype);
}

ModelState load_checkpoint(const std::filesystem::path& path, const ArchDescriptor* expected) {
  const Archive archive = read_archive(path, "checkpoint");
  ArchDescriptor arch;
  std::vector<int> ids;
  double eta = 0.0;
  try {
    arch = ArchDescriptor::from_json(archive.meta.at("architecture"));
    ids = archive.meta.at("class_ids").get<std::vector<int>>();
    eta = archive.meta.at("eta").get<double>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Format, path.string() + ": malformed checkpoint metadata: " + e.what());
  }
  require(expected == nullptr || *expected == arch, ErrorKind::Incompatible,
          path.string() + ": checkpoint architecture " + arch.to_json().dump() +
              " does not match the expected " + (expected ? expected->to_json().dump() : ""));
  ModelState model = ModelState::create(arch, ids, eta, 0);
  std::size_t visited = 0;
  for_each_tensor(model, [&](const std::string& name, std::vector<std::int64_t> shape,
                             std::span<double> values, bool) {
    const Blob* blob = nullptr;
    for (const auto& b : archive.blobs) {
      if (b.name == name) blob = &b;
    }
    require(blob != nullptr, ErrorKind::Incompatible, path.string() + ": missing tensor " + name);
    require(blob->shape == shape, ErrorKind::Incompatible,
            path.string() + ": tensor " + name + " has an unexpected shape");
    std::copy(blob->values.begin(), blob->values.end(), values.begin());
    ++visited;
  });
  require(visited == archive.blobs.size(), ErrorKind::Incompatible,
          path.string() + ": checkpoint carries tensors this architecture does not have");
  model.validate();
  return model;
}

}  // namespace cimp
