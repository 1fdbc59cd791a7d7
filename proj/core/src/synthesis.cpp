#include "cimp/synthesis.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <future>
#include <random>

#include "cimp/archive.hpp"
#include "cimp/error.hpp"
#include "cimp/image_io.hpp"
#include "cimp/seed.hpp"

namespace cimp {
namespace {

void require_tv_geometry(const ImageBatch& batch) {
  require(batch.n() >= 1 && batch.h() >= 2 && batch.w() >= 2, ErrorKind::Shape,
          "total variation needs at least one image of size 2x2");
}

double softmax_ce(const Matrix& logits, std::span<const int> rows, Matrix* dlogits) {
  const double batch = static_cast<double>(logits.rows());
  double loss = 0.0;
  if (dlogits != nullptr) dlogits->resize(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const double mx = logits.row(i).maxCoeff();
    const Eigen::RowVectorXd e = (logits.row(i).array() - mx).exp();
    const double z = e.sum();
    loss += mx + std::log(z) - logits(i, rows[static_cast<std::size_t>(i)]);
    if (dlogits != nullptr) {
      dlogits->row(i) = e / z / batch;
      (*dlogits)(i, rows[static_cast<std::size_t>(i)]) -= 1.0 / batch;
    }
  }
  return loss / batch;
}

}  // namespace

std::string_view to_string(InitMode mode) noexcept {
  return mode == InitMode::ClassMean ? "class-mean" : "gaussian-noise";
}

InitMode parse_init_mode(std::string_view text) {
  if (text == "class-mean") return InitMode::ClassMean;
  if (text == "gaussian-noise") return InitMode::GaussianNoise;
  fail(ErrorKind::Config, "unknown init mode '" + std::string(text) + "'");
}

SynthesisConfig SynthesisConfig::from_json(const nlohmann::json& j) {
  SynthesisConfig c;
  c.alpha_tv = j.at("alpha_tv");
  c.alpha_l2 = j.at("alpha_l2");
  c.alpha_bn = j.at("alpha_bn");
  c.alpha_reg_total = j.at("alpha_reg_total");
  c.lr = j.at("lr");
  c.beta1 = j.at("beta1");
  c.beta2 = j.at("beta2");
  c.adam_epsilon = j.at("adam_epsilon");
  c.steps = j.at("steps");
  c.batch_size = j.at("batch_size");
  c.init_mode = parse_init_mode(j.at("init_mode").get<std::string>());
  c.init_jitter_sigma = j.at("init_jitter_sigma");
  c.norm_epsilon = j.at("norm_epsilon");
  c.threads = j.at("threads");
  if (j.contains("pixel_range")) c.pixel_range = PixelRange{j["pixel_range"].at(0), j["pixel_range"].at(1)};
  return c;
}

void SynthesisConfig::validate() const {
  require(alpha_tv >= 0 && alpha_l2 >= 0 && alpha_bn >= 0 && alpha_reg_total >= 0, ErrorKind::Config,
          "synthesis weights must be non-negative");
  require(lr > 0, ErrorKind::Config, "synthesis learning rate must be positive");
  require(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1, ErrorKind::Config,
          "Adam betas must lie in [0, 1)");
  require(steps >= 1, ErrorKind::Config, "synthesis needs at least one step");
  require(batch_size >= 1, ErrorKind::Config, "synthesis batch size must be positive");
  require(init_jitter_sigma >= 0, ErrorKind::Config, "init jitter must be non-negative");
  require(threads >= 1, ErrorKind::Config, "synthesis threads must be positive");
  require(!pixel_range || pixel_range->lo < pixel_range->hi, ErrorKind::Config, "empty pixel range");
}

nlohmann::json SynthesisConfig::to_json() const {
  nlohmann::json j = {{"alpha_tv", alpha_tv},
                      {"alpha_l2", alpha_l2},
                      {"alpha_bn", alpha_bn},
                      {"alpha_reg_total", alpha_reg_total},
                      {"lr", lr},
                      {"beta1", beta1},
                      {"beta2", beta2},
                      {"adam_epsilon", adam_epsilon},
                      {"steps", steps},
                      {"batch_size", batch_size},
                      {"init_mode", std::string(to_string(init_mode))},
                      {"init_jitter_sigma", init_jitter_sigma},
                      {"norm_epsilon", norm_epsilon},
                      {"threads", threads}};
  if (pixel_range) j["pixel_range"] = {pixel_range->lo, pixel_range->hi};
  return j;
}

double tv_l2_reg(const ImageBatch& batch) {
  require_tv_geometry(batch);
  double total = 0.0;
  for (int n = 0; n < batch.n(); ++n) {
    for (int y = 0; y < batch.h(); ++y) {
      for (int x = 0; x < batch.w(); ++x) {
        for (int c = 0; c < batch.c(); ++c) {
          const double v = batch.at(n, y, x, c);
          if (y + 1 < batch.h()) total += std::pow(batch.at(n, y + 1, x, c) - v, 2);
          if (x + 1 < batch.w()) total += std::pow(batch.at(n, y, x + 1, c) - v, 2);
        }
      }
    }
  }
  return total / batch.n();
}

Tensor tv_l2_reg_grad(const ImageBatch& batch) {
  require_tv_geometry(batch);
  Tensor g(batch.shape());
  const double scale = 2.0 / batch.n();
  for (int n = 0; n < batch.n(); ++n) {
    for (int y = 0; y < batch.h(); ++y) {
      for (int x = 0; x < batch.w(); ++x) {
        for (int c = 0; c < batch.c(); ++c) {
          const double v = batch.at(n, y, x, c);
          if (y + 1 < batch.h()) {
            const double d = batch.at(n, y + 1, x, c) - v;
            g.at(n, y + 1, x, c) += scale * d;
            g.at(n, y, x, c) -= scale * d;
          }
          if (x + 1 < batch.w()) {
            const double d = batch.at(n, y, x + 1, c) - v;
            g.at(n, y, x + 1, c) += scale * d;
            g.at(n, y, x, c) -= scale * d;
          }
        }
      }
    }
  }
  return g;
}

double l2_reg(const ImageBatch& batch) {
  require(batch.n() >= 1, ErrorKind::Shape, "empty batch");
  double s = 0.0;
  for (double v : batch.storage()) s += v * v;
  return s / batch.n();
}

Tensor l2_reg_grad(const ImageBatch& batch) {
  require(batch.n() >= 1, ErrorKind::Shape, "empty batch");
  Tensor g(batch.shape());
  const double scale = 2.0 / batch.n();
  for (std::size_t i = 0; i < g.size(); ++i) g.storage()[i] = scale * batch.storage()[i];
  return g;
}

namespace {

void check_obs_shape(const BnObservation& obs, const std::vector<const BatchNorm*>& layers) {
  require(obs.size() == layers.size(), ErrorKind::Shape, "BN observation layer count mismatch");
  for (std::size_t l = 0; l < layers.size(); ++l) {
    require(obs[l].mean.size() == layers[l]->channels() && obs[l].var.size() == layers[l]->channels(),
            ErrorKind::Shape, "BN observation channel mismatch at layer " + std::to_string(l));
  }
}

}  // namespace

double bn_reg(const BnObservation& obs, const ModelState& model) {
  const auto layers = model.bn_layers();
  check_obs_shape(obs, layers);
  double total = 0.0;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    total += (obs[l].mean - layers[l]->running_mean).norm();
    total += (obs[l].var - layers[l]->running_var).norm();
  }
  return total;
}

BnObservationGrad bn_reg_grad(const BnObservation& obs, const ModelState& model) {
  const auto layers = model.bn_layers();
  check_obs_shape(obs, layers);
  BnObservationGrad g(layers.size());
  auto unit = [](const Vector& d) -> Vector {
    const double n = d.norm();
    return n > 0.0 ? Vector(d / n) : Vector(Vector::Zero(d.size()));
  };
  for (std::size_t l = 0; l < layers.size(); ++l) {
    g[l].mean = unit(obs[l].mean - layers[l]->running_mean);
    g[l].var = unit(obs[l].var - layers[l]->running_var);
  }
  return g;
}

ObjectiveResult synthesis_objective(const ModelState& frozen, const ImageBatch& batch,
                                    std::span<const int> labels, const SynthesisConfig& cfg,
                                    bool want_grad) {
  require(static_cast<int>(labels.size()) == batch.n(), ErrorKind::Shape,
          "label count does not match the synthesis batch");
  std::vector<int> rows(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) rows[i] = frozen.class_index(labels[i]);

  const NormalizeOptions norm{cfg.norm_epsilon};
  const ForwardTape tape = forward(frozen, batch, Mode::Eval);
  const Matrix logits = cosine_logits(frozen, tape.features, norm);
  Matrix dlogits;
  ObjectiveResult out;
  out.parts.ce = softmax_ce(logits, rows, want_grad ? &dlogits : nullptr);
  const BnObservation obs = tape.observation();
  out.parts.bn = bn_reg(obs, frozen);
  const bool tv_defined = batch.h() >= 2 && batch.w() >= 2;
  out.parts.tv = tv_defined ? tv_l2_reg(batch) : 0.0;
  out.parts.l2 = l2_reg(batch);

  const double a_tv = cfg.alpha_reg_total * cfg.alpha_tv;
  const double a_l2 = cfg.alpha_reg_total * cfg.alpha_l2;
  const double a_bn = cfg.alpha_reg_total * cfg.alpha_bn;
  out.total = out.parts.ce;
  if (cfg.alpha_reg_total != 0.0) {
    out.total += a_tv * out.parts.tv + a_l2 * out.parts.l2 + a_bn * out.parts.bn;
  }
  if (!want_grad) return out;

  const HeadGrads head = cosine_logits_backward(frozen, tape.features, dlogits, norm);
  BnObservationGrad bn_grads;
  if (a_bn != 0.0) {
    bn_grads = bn_reg_grad(obs, frozen);
    for (auto& g : bn_grads) {
      g.mean *= a_bn;
      g.var *= a_bn;
    }
  }
  BackwardResult back = backward(frozen, tape, head.dfeatures, a_bn != 0.0 ? &bn_grads : nullptr,
                                 false, true);
  Tensor grad = std::move(*back.input);
  if (a_tv != 0.0 && tv_defined) {
    const Tensor g = tv_l2_reg_grad(batch);
    for (std::size_t i = 0; i < grad.size(); ++i) grad.storage()[i] += a_tv * g.storage()[i];
  }
  if (a_l2 != 0.0) {
    for (std::size_t i = 0; i < grad.size(); ++i) grad.storage()[i] += a_l2 * 2.0 * batch.storage()[i] / batch.n();
  }
  out.input_grad = std::move(grad);
  return out;
}

ClassMean record_class_means(const ImageBatch& slice) {
  require(slice.n() >= 1, ErrorKind::Dataset, "cannot average an empty class slice");
  ClassMean mean;
  mean.image = Tensor({1, slice.h(), slice.w(), slice.c()});
  mean.count = slice.n();
  auto& acc = mean.image.storage();
  for (int n = 0; n < slice.n(); ++n) {
    auto item = slice.item(n);
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += item[i];
  }
  for (double& v : acc) v /= slice.n();
  require(mean.image.all_finite(), ErrorKind::Numeric, "non-finite class mean");
  return mean;
}

void ClassMeanStore::put(int class_id, ClassMean mean) { means_[class_id] = std::move(mean); }

const ClassMean& ClassMeanStore::get(int class_id) const {
  auto it = means_.find(class_id);
  require(it != means_.end(), ErrorKind::MissingPrototype,
          "no stored mean image for class " + std::to_string(class_id));
  return it->second;
}

std::vector<int> ClassMeanStore::class_ids() const {
  std::vector<int> ids;
  for (const auto& [id, _] : means_) ids.push_back(id);
  return ids;
}

void ClassMeanStore::save(const std::filesystem::path& path) const {
  std::vector<Blob> blobs;
  nlohmann::json counts = nlohmann::json::object();
  for (const auto& [id, m] : means_) {
    const auto& s = m.image.shape();
    blobs.push_back({"class." + std::to_string(id), {s.h, s.w, s.c}, m.image.storage()});
    counts[std::to_string(id)] = m.count;
  }
  write_archive(path, "class-means", {{"counts", counts}}, blobs, BlobDtype::Float64);
}

ClassMeanStore ClassMeanStore::load(const std::filesystem::path& path) {
  const Archive archive = read_archive(path, "class-means");
  ClassMeanStore store;
  for (const auto& blob : archive.blobs) {
    require(blob.name.rfind("class.", 0) == 0 && blob.shape.size() == 3, ErrorKind::Format,
            path.string() + ": unexpected blob " + blob.name);
    const std::string key = blob.name.substr(6);
    ClassMean m;
    m.image = Tensor({1, static_cast<int>(blob.shape[0]), static_cast<int>(blob.shape[1]),
                      static_cast<int>(blob.shape[2])},
                     blob.values);
    try {
      m.count = archive.meta.at("counts").at(key).get<int>();
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorKind::Format, path.string() + ": missing count for class " + key);
    }
    store.put(std::stoi(key), std::move(m));
  }
  return store;
}

ImageBatch init_batch(const ClassMeanStore& means, std::span<const int> class_ids,
                      const SynthesisConfig& cfg, Shape4 geometry, std::uint64_t seed) {
  geometry.n = static_cast<int>(class_ids.size());
  ImageBatch batch(geometry);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (int n = 0; n < geometry.n; ++n) {
    auto item = batch.item(n);
    if (cfg.init_mode == InitMode::GaussianNoise) {
      for (double& v : item) v = normal(rng);
      continue;
    }
    const ClassMean& mean = means.get(class_ids[static_cast<std::size_t>(n)]);
    require(mean.image.h() == geometry.h && mean.image.w() == geometry.w && mean.image.c() == geometry.c,
            ErrorKind::Shape, "stored mean image geometry does not match the model input");
    auto src = mean.image.item(0);
    std::copy(src.begin(), src.end(), item.begin());
    if (cfg.init_jitter_sigma > 0.0) {
      for (double& v : item) v += cfg.init_jitter_sigma * normal(rng);
    }
  }
  return batch;
}

const ClassImpressions& ClassImpressionSet::get(int class_id) const {
  for (const auto& c : classes) {
    if (c.class_id == class_id) return c;
  }
  fail(ErrorKind::ReplayCoverage, "no impressions for class " + std::to_string(class_id));
}

bool ClassImpressionSet::covers(std::span<const int> class_ids) const {
  return std::all_of(class_ids.begin(), class_ids.end(), [&](int id) {
    return std::any_of(classes.begin(), classes.end(), [&](const auto& c) { return c.class_id == id; });
  });
}

namespace {

bool try_optimize(const ModelState& frozen, const ImageBatch& init, std::span<const int> labels,
                  const SynthesisConfig& cfg, double lr, ImageBatch& result, SynthesisTrace& trace) {
  ImageBatch x = init;
  std::vector<double> m(x.size(), 0.0);
  std::vector<double> v(x.size(), 0.0);
  trace.rows.clear();
  trace.lr = lr;
  double initial_total = 0.0;
  double best_total = 0.0;
  ImageBatch best;
  for (int step = 0; step <= cfg.steps; ++step) {
    const bool last = step == cfg.steps;
    ObjectiveResult r = synthesis_objective(frozen, x, labels, cfg, !last);
    if (!std::isfinite(r.total)) return false;
    trace.rows.push_back({step, r.total, r.parts});
    if (step == 0) initial_total = r.total;
    if (step == 0 || r.total < best_total) {
      best_total = r.total;
      best = x;
    }
    if (last) break;
    const auto& g = r.input_grad->storage();
    auto& px = x.storage();
    const double t = step + 1;
    const double c1 = 1.0 - std::pow(cfg.beta1, t);
    const double c2 = 1.0 - std::pow(cfg.beta2, t);
    for (std::size_t i = 0; i < px.size(); ++i) {
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
      px[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg.adam_epsilon);
      if (cfg.pixel_range) px[i] = std::clamp(px[i], cfg.pixel_range->lo, cfg.pixel_range->hi);
    }
  }
  if (trace.rows.back().total > initial_total) {
    // Never hand back something worse than the starting point.
    x = std::move(best);
    ObjectiveResult r = synthesis_objective(frozen, x, labels, cfg, false);
    trace.rows.push_back({cfg.steps, r.total, r.parts});
  }
  result = std::move(x);
  return true;
}

}  // namespace

ImageBatch synthesize_batch(const ModelState& frozen, ImageBatch init, std::span<const int> labels,
                            const SynthesisConfig& cfg, SynthesisTrace& trace) {
  cfg.validate();
  ImageBatch result;
  double lr = cfg.lr;
  for (int attempt = 1; attempt <= 2; ++attempt) {
    trace.attempts = attempt;
    try {
      if (try_optimize(frozen, init, labels, cfg, lr, result, trace)) return result;
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::Numeric && e.kind() != ErrorKind::DegenerateNorm) throw;
    }
    lr /= 10.0;
  }
  fail(ErrorKind::Numeric, "synthesis diverged twice (last lr " + std::to_string(lr * 10.0) +
                               ", last recorded step " +
                               std::to_string(trace.rows.empty() ? -1 : trace.rows.back().step) + ")");
}

ClassImpressionSet synthesize(const ModelState& frozen, const ClassMeanStore& means,
                              std::span<const int> old_classes, int quota_per_class,
                              const SynthesisConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  require(quota_per_class >= 1, ErrorKind::Contract, "replay quota must be at least 1");
  for (int id : old_classes) frozen.class_index(id);

  auto one_class = [&](int class_id) {
    ClassImpressions out;
    out.class_id = class_id;
    std::vector<const Tensor*> parts;
    std::vector<ImageBatch> batches;
    int remaining = quota_per_class;
    std::uint64_t batch_index = 0;
    while (remaining > 0) {
      const int size = std::min(remaining, cfg.batch_size);
      const std::vector<int> labels(static_cast<std::size_t>(size), class_id);
      const std::uint64_t s = derive_seed(seed, "synthesis-init", (static_cast<std::uint64_t>(class_id) << 20) + batch_index);
      ImageBatch init = init_batch(means, labels, cfg, frozen.arch.input_shape(size), s);
      SynthesisTrace trace;
      batches.push_back(synthesize_batch(frozen, std::move(init), labels, cfg, trace));
      out.traces.push_back(std::move(trace));
      remaining -= size;
      ++batch_index;
    }
    for (const auto& b : batches) parts.push_back(&b);
    out.images = concat(parts);
    return out;
  };

  std::vector<int> ids(old_classes.begin(), old_classes.end());
  std::sort(ids.begin(), ids.end());
  ClassImpressionSet set;
  set.quota_per_class = quota_per_class;
  set.config = cfg;
  set.classes.resize(ids.size());
  if (cfg.threads <= 1 || ids.size() <= 1) {
    for (std::size_t i = 0; i < ids.size(); ++i) set.classes[i] = one_class(ids[i]);
    return set;
  }
  // Fan out in waves of `threads` classes; results land in class-id order.
  for (std::size_t start = 0; start < ids.size(); start += static_cast<std::size_t>(cfg.threads)) {
    const std::size_t end = std::min(ids.size(), start + static_cast<std::size_t>(cfg.threads));
    std::vector<std::future<ClassImpressions>> jobs;
    for (std::size_t i = start; i < end; ++i) jobs.push_back(std::async(std::launch::async, one_class, ids[i]));
    for (std::size_t i = start; i < end; ++i) set.classes[i] = jobs[i - start].get();
  }
  return set;
}

void save_impressions(const ClassImpressionSet& set, const std::filesystem::path& dir,
                      const PreviewOptions& preview) {
  std::filesystem::create_directories(dir);
  nlohmann::json top = {{"quota_per_class", set.quota_per_class},
                        {"config", set.config.to_json()},
                        {"classes", nlohmann::json::array()}};
  for (const auto& c : set.classes) {
    const std::string name = "class_" + std::to_string(c.class_id);
    const auto cdir = dir / name;
    std::filesystem::create_directories(cdir);
    const auto& s = c.images.shape();
    const Blob blob{"images", {s.n, s.h, s.w, s.c}, c.images.storage()};
    write_archive(cdir / "images.cimp", "impressions", {{"class_id", c.class_id}},
                  std::span<const Blob>(&blob, 1), BlobDtype::Float32);

    std::ofstream csv(cdir / "trace.csv", std::ios::trunc);
    csv << "step,total,ce,tv,l2,bn\n";
    csv.precision(17);
    // Batches are appended one after another; step restarts at 0 for each.
    std::vector<std::size_t> rows_per_batch;
    std::vector<int> attempts;
    for (const auto& t : c.traces) {
      rows_per_batch.push_back(t.rows.size());
      attempts.push_back(t.attempts);
    }
    for (std::size_t b = 0; b < c.traces.size(); ++b) {
      for (const auto& r : c.traces[b].rows) {
        csv << r.step << ',' << r.total << ',' << r.parts.ce << ',' << r.parts.tv << ','
            << r.parts.l2 << ',' << r.parts.bn << '\n';
      }
    }

    const int previews = std::min(preview.max_previews, s.n);
    for (int n = 0; n < previews; ++n) {
      RawImage img{s.h, s.w, s.c, {}};
      auto item = c.images.item(n);
      img.pixels.resize(item.size());
      for (std::size_t i = 0; i < item.size(); ++i) {
        const std::size_t ch = i % static_cast<std::size_t>(s.c);
        const double mean = ch < preview.mean.size() ? preview.mean[ch] : 0.0;
        const double std = ch < preview.std.size() ? preview.std[ch] : 1.0;
        img.pixels[i] = static_cast<float>(item[i] * std + mean);
      }
      write_png(cdir / ("preview_" + std::to_string(n) + ".png"), img);
    }

    nlohmann::json manifest = {{"class_id", c.class_id},
                               {"quota", set.quota_per_class},
                               {"images", "images.cimp"},
                               {"trace_csv", "trace.csv"},
                               {"trace_rows_per_batch", rows_per_batch},
                               {"trace_attempts", attempts},
                               {"config", set.config.to_json()}};
    std::ofstream(cdir / "manifest.json", std::ios::trunc) << manifest.dump(2) << '\n';
    top["classes"].push_back({{"class_id", c.class_id}, {"dir", name}});
  }
  std::ofstream(dir / "manifest.json", std::ios::trunc) << top.dump(2) << '\n';
}

namespace {

std::vector<SynthesisTrace> read_traces(const std::filesystem::path& cdir) {
  std::ifstream mf(cdir / "manifest.json");
  require(static_cast<bool>(mf), ErrorKind::Format, "missing " + (cdir / "manifest.json").string());
  const auto manifest = nlohmann::json::parse(mf);
  const auto rows = manifest.at("trace_rows_per_batch").get<std::vector<std::size_t>>();
  const auto attempts = manifest.value("trace_attempts", std::vector<int>(rows.size(), 1));
  std::ifstream csv(cdir / "trace.csv");
  std::string line;
  require(static_cast<bool>(std::getline(csv, line)) && line == "step,total,ce,tv,l2,bn", ErrorKind::Format,
          (cdir / "trace.csv").string() + ": bad header");
  std::vector<SynthesisTrace> out(rows.size());
  for (std::size_t b = 0; b < rows.size(); ++b) {
    out[b].attempts = b < attempts.size() ? attempts[b] : 1;
    for (std::size_t r = 0; r < rows[b]; ++r) {
      require(static_cast<bool>(std::getline(csv, line)), ErrorKind::Format,
              (cdir / "trace.csv").string() + ": fewer rows than recorded");
      TraceRow row;
      char comma = 0;
      std::istringstream in(line);
      in >> row.step >> comma >> row.total >> comma >> row.parts.ce >> comma >> row.parts.tv >> comma >>
          row.parts.l2 >> comma >> row.parts.bn;
      require(!in.fail(), ErrorKind::Format, (cdir / "trace.csv").string() + ": malformed row '" + line + "'");
      out[b].rows.push_back(row);
    }
  }
  return out;
}

}  // namespace

ClassImpressionSet load_impressions(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  require(static_cast<bool>(in), ErrorKind::Dependency, "no impression manifest in " + dir.string());
  ClassImpressionSet set;
  try {
    const auto top = nlohmann::json::parse(in);
    set.quota_per_class = top.at("quota_per_class").get<int>();
    set.config = SynthesisConfig::from_json(top.at("config"));
    for (const auto& entry : top.at("classes")) {
      ClassImpressions c;
      c.class_id = entry.at("class_id").get<int>();
      const auto cdir = dir / entry.at("dir").get<std::string>();
      const Archive a = read_archive(cdir / "images.cimp", "impressions");
      const Blob& b = a.find("images");
      require(b.shape.size() == 4, ErrorKind::Format, "impression blob must be 4-D");
      c.images = Tensor({static_cast<int>(b.shape[0]), static_cast<int>(b.shape[1]),
                         static_cast<int>(b.shape[2]), static_cast<int>(b.shape[3])},
                        b.values);
      c.traces = read_traces(cdir);
      set.classes.push_back(std::move(c));
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Format, dir.string() + ": malformed impression manifest: " + e.what());
  }
  std::sort(set.classes.begin(), set.classes.end(),
            [](const auto& a, const auto& b) { return a.class_id < b.class_id; });
  return set;
}

}  // namespace cimp
