#include "cimp/losses.hpp"

#include <algorithm>
#include <cmath>

#include "cimp/error.hpp"

namespace cimp {
namespace {

// Gradients of a function of the cosine matrix C = unit(F) * unit(E)^T.
HeadGrads cosine_backward(const UnitRows& f, const UnitRows& e, const Matrix& dcos) {
  return {normalize_rows_backward(f, dcos * e.unit), normalize_rows_backward(e, dcos.transpose() * f.unit)};
}

Vector softmax(const Eigen::RowVectorXd& z) {
  const double mx = z.maxCoeff();
  Vector p = (z.array() - mx).exp().transpose();
  return p / p.sum();
}

double log_sum_exp(std::span<const double> z) {
  const double mx = *std::max_element(z.begin(), z.end());
  double s = 0.0;
  for (double v : z) s += std::exp(v - mx);
  return mx + std::log(s);
}

void check_finite(double v, const char* what) {
  require(std::isfinite(v), ErrorKind::Numeric, std::string("non-finite ") + what + " loss");
}

}  // namespace

void TrainLossConfig::validate() const {
  require(eta > 0.0, ErrorKind::Config, "eta must be positive");
  require(margin >= 0.0 && margin <= 2.0, ErrorKind::Config, "margin must lie in [0, 2]");
  require(tau > 0.0, ErrorKind::Config, "tau must be positive");
  require(alpha_dist >= 0.0 && alpha_margin >= 0.0 && alpha_contras >= 0.0, ErrorKind::Config,
          "loss weights must be non-negative");
  require(distill_temperature > 0.0, ErrorKind::Config, "distillation temperature must be positive");
}

LossTerm cnce_loss(const FeatureBatch& feats, std::span<const int> labels, const ModelState& model) {
  require(static_cast<Eigen::Index>(labels.size()) == feats.rows() && feats.rows() > 0,
          ErrorKind::Shape, "label count does not match the feature batch");
  std::vector<int> rows(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) rows[i] = model.class_index(labels[i]);

  const Matrix logits = cosine_logits(model, feats);
  const double batch = static_cast<double>(feats.rows());
  Matrix dlogits(logits.rows(), logits.cols());
  double loss = 0.0;
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const Eigen::RowVectorXd z = logits.row(i);
    const std::vector<double> zv(z.data(), z.data() + z.size());
    loss += log_sum_exp(zv) - z(rows[i]);
    Vector p = softmax(z);
    p(rows[i]) -= 1.0;
    dlogits.row(i) = p.transpose() / batch;
  }
  LossTerm out;
  out.value = loss / batch;
  check_finite(out.value, "CNCE");
  HeadGrads g = cosine_logits_backward(model, feats, dlogits);
  out.dfeatures = std::move(g.dfeatures);
  out.dembeddings = std::move(g.dembeddings);
  return out;
}

LossTerm margin_loss(const FeatureBatch& synth_feats, std::span<const int> synth_labels,
                     const ModelState& model, std::span<const int> new_class_ids, double margin) {
  require(static_cast<Eigen::Index>(synth_labels.size()) == synth_feats.rows(), ErrorKind::Shape,
          "label count does not match the anchor batch");
  require(!new_class_ids.empty(), ErrorKind::Contract, "margin loss needs at least one new class");
  LossTerm out;
  out.dfeatures = FeatureBatch::Zero(synth_feats.rows(), synth_feats.cols());
  out.dembeddings = Matrix::Zero(model.class_embeddings.rows(), model.class_embeddings.cols());
  if (synth_feats.rows() == 0) return out;

  std::vector<int> new_rows;
  for (int id : new_class_ids) new_rows.push_back(model.class_index(id));
  const UnitRows f = normalize_rows(synth_feats, {}, "anchor feature");
  const UnitRows e = normalize_rows(model.class_embeddings, {}, "class embedding");
  const Matrix cos = f.unit * e.unit.transpose();

  const double batch = static_cast<double>(synth_feats.rows());
  Matrix dcos = Matrix::Zero(cos.rows(), cos.cols());
  double loss = 0.0;
  for (Eigen::Index i = 0; i < cos.rows(); ++i) {
    const int id = synth_labels[static_cast<std::size_t>(i)];
    require(std::find(new_class_ids.begin(), new_class_ids.end(), id) == new_class_ids.end(),
            ErrorKind::Contract, "margin anchor " + std::to_string(i) + " is labeled with new class " +
                                     std::to_string(id));
    const int t = model.class_index(id);
    for (int k : new_rows) {
      const double h = margin - cos(i, t) + cos(i, k);
      if (h > 0.0) {
        loss += h;
        dcos(i, t) -= 1.0 / batch;
        dcos(i, k) += 1.0 / batch;
      }
    }
  }
  out.value = loss / batch;
  check_finite(out.value, "margin");
  HeadGrads g = cosine_backward(f, e, dcos);
  out.dfeatures = std::move(g.dfeatures);
  out.dembeddings = std::move(g.dembeddings);
  return out;
}

LossTerm distillation_loss(const FeatureBatch& feats, const FeatureBatch& old_feats) {
  require(feats.rows() == old_feats.rows() && feats.cols() == old_feats.cols() && feats.rows() > 0,
          ErrorKind::Shape, "distillation feature shapes differ");
  const UnitRows f = normalize_rows(feats, {}, "feature");
  const UnitRows o = normalize_rows(old_feats, {}, "old-model feature");
  const double batch = static_cast<double>(feats.rows());
  LossTerm out;
  out.value = (1.0 - (f.unit.array() * o.unit.array()).rowwise().sum()).sum() / batch;
  check_finite(out.value, "distillation");
  out.dfeatures = normalize_rows_backward(f, -o.unit / batch);
  return out;
}

LossTerm logit_distillation_loss(const FeatureBatch& feats, const FeatureBatch& old_feats,
                                 const ModelState& model, const ModelState& old_model,
                                 double temperature) {
  require(feats.rows() == old_feats.rows() && feats.rows() > 0, ErrorKind::Shape,
          "distillation batch sizes differ");
  require(temperature > 0.0, ErrorKind::Contract, "distillation temperature must be positive");
  const Matrix old_logits = cosine_logits(old_model, old_feats);
  const Matrix logits = cosine_logits(model, feats);
  std::vector<int> cols;
  for (int id : old_model.seen_classes) cols.push_back(model.class_index(id));

  const double batch = static_cast<double>(feats.rows());
  Matrix dlogits = Matrix::Zero(logits.rows(), logits.cols());
  double loss = 0.0;
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    Eigen::RowVectorXd z(static_cast<Eigen::Index>(cols.size()));
    for (std::size_t c = 0; c < cols.size(); ++c) z(static_cast<Eigen::Index>(c)) = logits(i, cols[c]);
    const Vector p = softmax(old_logits.row(i) / temperature);
    const Vector q = softmax(z / temperature);
    for (Eigen::Index c = 0; c < p.size(); ++c) {
      if (p(c) > 0.0) loss += p(c) * (std::log(p(c)) - std::log(q(c)));
      dlogits(i, cols[static_cast<std::size_t>(c)]) = temperature * (q(c) - p(c)) / batch;
    }
  }
  LossTerm out;
  out.value = temperature * temperature * loss / batch;
  check_finite(out.value, "logit distillation");
  HeadGrads g = cosine_logits_backward(model, feats, dlogits);
  out.dfeatures = std::move(g.dfeatures);
  out.dembeddings = std::move(g.dembeddings);
  return out;
}

CentroidBank::CentroidBank(int feature_dim, double momentum)
    : feature_dim_(feature_dim), momentum_(momentum) {
  require(momentum >= 0.0 && momentum <= 1.0, ErrorKind::Config, "centroid momentum must lie in [0, 1]");
}

const ClassCentroids* CentroidBank::find(int class_id) const {
  auto it = classes_.find(class_id);
  return it == classes_.end() ? nullptr : &it->second;
}

CentroidUpdate CentroidBank::update(const FeatureBatch& feats, std::span<const int> labels,
                                    Domain domain) {
  require(static_cast<Eigen::Index>(labels.size()) == feats.rows(), ErrorKind::Shape,
          "label count does not match the feature batch");
  require(feats.rows() == 0 || feats.cols() == feature_dim_, ErrorKind::Shape,
          "feature dimension does not match the centroid bank");
  std::map<int, std::vector<int>> members;
  for (std::size_t i = 0; i < labels.size(); ++i) members[labels[i]].push_back(static_cast<int>(i));

  CentroidUpdate record;
  record.domain = domain;
  for (auto& [id, rows] : members) {
    Vector mean = Vector::Zero(feature_dim_);
    for (int r : rows) mean += feats.row(r).transpose();
    const double n = static_cast<double>(rows.size());
    mean /= n;
    auto& slot = classes_[id];
    Centroid& c = domain == Domain::Source ? slot.source : slot.target;
    double weight;
    if (!c.initialized) {
      c.value = mean;
      c.initialized = true;
      weight = 1.0 / n;
    } else {
      c.value = momentum_ * c.value + (1.0 - momentum_) * mean;
      weight = (1.0 - momentum_) / n;
    }
    record.contributions.push_back({id, std::move(rows), weight});
  }
  return record;
}

void CentroidBank::set(int class_id, Domain domain, const Vector& value) {
  require(value.size() == feature_dim_, ErrorKind::Shape, "centroid dimension mismatch");
  auto& slot = classes_[class_id];
  Centroid& c = domain == Domain::Source ? slot.source : slot.target;
  c.value = value;
  c.initialized = true;
}

void CentroidBank::reset() { classes_.clear(); }

ContrastiveResult contrastive_loss(const CentroidBank& bank, std::span<const int> old_class_ids,
                                   double tau) {
  ContrastiveResult out;
  std::vector<int> eligible;
  for (int id : old_class_ids) {
    const ClassCentroids* c = bank.find(id);
    if (c != nullptr && c->eligible()) eligible.push_back(id);
  }
  out.eligible_classes = static_cast<int>(eligible.size());
  if (eligible.empty()) {
    out.skipped = true;
    return out;
  }

  const Eigen::Index k_count = static_cast<Eigen::Index>(eligible.size());
  Matrix src(k_count, bank.feature_dim());
  Matrix tgt(k_count, bank.feature_dim());
  for (Eigen::Index k = 0; k < k_count; ++k) {
    const ClassCentroids* c = bank.find(eligible[static_cast<std::size_t>(k)]);
    src.row(k) = c->source.value.transpose();
    tgt.row(k) = c->target.value.transpose();
  }
  const UnitRows us = normalize_rows(src, {}, "source centroid");
  const UnitRows ut = normalize_rows(tgt, {}, "target centroid");
  // sim_s(j, k) = <s_j, t_k>, sim_t(j, k) = <t_j, t_k>
  const Matrix sim_s = us.unit * ut.unit.transpose();
  const Matrix sim_t = ut.unit * ut.unit.transpose();

  Matrix dsim_s = Matrix::Zero(k_count, k_count);
  Matrix dsim_t = Matrix::Zero(k_count, k_count);
  double loss = 0.0;
  const double scale = 1.0 / static_cast<double>(k_count);
  for (Eigen::Index k = 0; k < k_count; ++k) {
    std::vector<double> z{tau * sim_s(k, k)};
    for (Eigen::Index j = 0; j < k_count; ++j) {
      if (j == k) continue;
      z.push_back(tau * sim_s(j, k));
      z.push_back(tau * sim_t(j, k));
    }
    const double lse = log_sum_exp(z);
    loss += lse - z.front();
    dsim_s(k, k) += scale * tau * (std::exp(z.front() - lse) - 1.0);
    std::size_t idx = 1;
    for (Eigen::Index j = 0; j < k_count; ++j) {
      if (j == k) continue;
      dsim_s(j, k) += scale * tau * std::exp(z[idx++] - lse);
      dsim_t(j, k) += scale * tau * std::exp(z[idx++] - lse);
    }
  }
  out.value = loss * scale;
  check_finite(out.value, "contrastive");

  const Matrix dus = dsim_s * ut.unit;
  const Matrix dut = dsim_s.transpose() * us.unit + (dsim_t + dsim_t.transpose()) * ut.unit;
  const Matrix ds = normalize_rows_backward(us, dus);
  const Matrix dt = normalize_rows_backward(ut, dut);
  for (Eigen::Index k = 0; k < k_count; ++k) {
    const int id = eligible[static_cast<std::size_t>(k)];
    out.dsource[id] = ds.row(k).transpose();
    out.dtarget[id] = dt.row(k).transpose();
  }
  return out;
}

FeatureBatch chain_centroid_grads(const ContrastiveResult& result,
                                  std::span<const CentroidUpdate> updates, int batch_rows,
                                  int feature_dim) {
  FeatureBatch d = FeatureBatch::Zero(batch_rows, feature_dim);
  if (result.skipped) return d;
  for (const auto& update : updates) {
    const auto& grads = update.domain == Domain::Source ? result.dsource : result.dtarget;
    for (const auto& c : update.contributions) {
      auto it = grads.find(c.class_id);
      if (it == grads.end()) continue;
      for (int r : c.rows) {
        require(r >= 0 && r < batch_rows, ErrorKind::Shape, "centroid update row out of range");
        d.row(r) += c.weight * it->second.transpose();
      }
    }
  }
  return d;
}

LossTerm total_loss(const LossParts& parts, const TrainLossConfig& cfg) {
  LossTerm out = parts.cnce;
  auto accumulate = [&](const LossTerm& term, double weight) {
    if (weight == 0.0) return;
    out.value += weight * term.value;
    if (term.dfeatures.size() > 0) {
      if (out.dfeatures.size() == 0) {
        out.dfeatures = weight * term.dfeatures;
      } else {
        require(out.dfeatures.rows() == term.dfeatures.rows() &&
                    out.dfeatures.cols() == term.dfeatures.cols(),
                ErrorKind::Shape, "loss parts disagree on the feature batch shape");
        out.dfeatures += weight * term.dfeatures;
      }
    }
    if (term.dembeddings.size() > 0) {
      if (out.dembeddings.size() == 0) {
        out.dembeddings = weight * term.dembeddings;
      } else {
        require(out.dembeddings.rows() == term.dembeddings.rows() &&
                    out.dembeddings.cols() == term.dembeddings.cols(),
                ErrorKind::Shape, "loss parts disagree on the head shape");
        out.dembeddings += weight * term.dembeddings;
      }
    }
  };
  accumulate(parts.dist, cfg.alpha_dist);
  accumulate(parts.margin, cfg.alpha_margin);
  accumulate(parts.contras, cfg.alpha_contras);
  return out;
}

}  // namespace cimp
