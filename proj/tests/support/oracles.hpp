#pragma once

// Brute-force scalar evaluations of every loss and regularizer, written
// independently of the library code, plus small fixtures built on them.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "cimp/losses.hpp"
#include "cimp/synthesis.hpp"
#include "check.hpp"

namespace cimp::testing {

inline ModelState head_model(int k, double eta, std::uint64_t seed) {
  std::vector<int> ids(static_cast<std::size_t>(k));
  std::iota(ids.begin(), ids.end(), 0);
  ModelState m = ModelState::create(tiny_arch(), ids, eta, seed);
  m.class_embeddings = random_matrix(k, 8, seed + 100);
  return m;
}

inline double cosine(const Eigen::RowVectorXd& a, const Eigen::RowVectorXd& b) {
  double dot = 0, na = 0, nb = 0;
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    dot += a(i) * b(i);
    na += a(i) * a(i);
    nb += b(i) * b(i);
  }
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

// Brute-force scalar evaluations.
inline double cnce_oracle(const Matrix& f, const std::vector<int>& y, const ModelState& m) {
  double total = 0.0;
  for (Eigen::Index i = 0; i < f.rows(); ++i) {
    double z = 0.0;
    for (int k = 0; k < m.num_classes(); ++k) z += std::exp(m.eta * cosine(f.row(i), m.class_embeddings.row(k)));
    total += -std::log(std::exp(m.eta * cosine(f.row(i), m.class_embeddings.row(y[i]))) / z);
  }
  return total / f.rows();
}

inline double margin_oracle(const Matrix& f, const std::vector<int>& y, const ModelState& m,
                     const std::vector<int>& fresh, double margin) {
  double total = 0.0;
  for (Eigen::Index i = 0; i < f.rows(); ++i)
    for (int k : fresh)
      total += std::max(margin - cosine(f.row(i), m.class_embeddings.row(y[i])) +
                            cosine(f.row(i), m.class_embeddings.row(k)),
                        0.0);
  return total / f.rows();
}

inline double contrastive_oracle(const Matrix& s, const Matrix& t, double tau) {
  const Eigen::Index K = s.rows();
  double total = 0.0;
  for (Eigen::Index k = 0; k < K; ++k) {
    const double pos = std::exp(tau * cosine(s.row(k), t.row(k)));
    double neg = 0.0;
    for (Eigen::Index j = 0; j < K; ++j) {
      if (j == k) continue;
      neg += std::exp(tau * cosine(s.row(j), t.row(k))) + std::exp(tau * cosine(t.row(j), t.row(k)));
    }
    total += -std::log(pos / (pos + neg));
  }
  return total / K;
}

inline CentroidBank bank_from(const Matrix& s, const Matrix& t) {
  CentroidBank bank(static_cast<int>(s.cols()), 0.99);
  for (Eigen::Index k = 0; k < s.rows(); ++k) {
    bank.set(static_cast<int>(k), Domain::Source, s.row(k).transpose());
    bank.set(static_cast<int>(k), Domain::Target, t.row(k).transpose());
  }
  return bank;
}

inline std::vector<int> iota_ids(int k) {
  std::vector<int> v(static_cast<std::size_t>(k));
  std::iota(v.begin(), v.end(), 0);
  return v;
}


inline double distillation_oracle(const Matrix& f, const Matrix& g) {
  double total = 0.0;
  for (Eigen::Index i = 0; i < f.rows(); ++i) total += 1.0 - cosine(f.row(i), g.row(i));
  return total / f.rows();
}

inline double tv_oracle(const Tensor& x) {
  double s = 0.0;
  for (int n = 0; n < x.n(); ++n)
    for (int c = 0; c < x.c(); ++c)
      for (int y = 0; y < x.h(); ++y)
        for (int xx = 0; xx < x.w(); ++xx) {
          if (y > 0) s += std::pow(x.at(n, y, xx, c) - x.at(n, y - 1, xx, c), 2);
          if (xx > 0) s += std::pow(x.at(n, y, xx, c) - x.at(n, y, xx - 1, c), 2);
        }
  return s / x.n();
}

inline double l2_oracle(const Tensor& x) {
  double s = 0.0;
  for (int n = 0; n < x.n(); ++n) {
    double sq = 0.0;
    for (double v : x.item(n)) sq += v * v;
    s += sq;
  }
  return s / x.n();
}

inline double bn_oracle(const BnObservation& obs, const ModelState& m) {
  const auto layers = m.bn_layers();
  double s = 0.0;
  for (std::size_t l = 0; l < obs.size(); ++l) {
    double dm = 0.0, dv = 0.0;
    for (Eigen::Index c = 0; c < obs[l].mean.size(); ++c) {
      dm += std::pow(obs[l].mean(c) - layers[l]->running_mean(c), 2);
      dv += std::pow(obs[l].var(c) - layers[l]->running_var(c), 2);
    }
    s += std::sqrt(dm) + std::sqrt(dv);
  }
  return s;
}


}  // namespace cimp::testing
