#include <doctest.h>

#include <cmath>
#include <numeric>

#include "cimp/error.hpp"
#include "cimp/losses.hpp"
#include "check.hpp"
#include "oracles.hpp"

using namespace cimp;
using namespace cimp::testing;

TEST_CASE("CNCE closed forms") {
  ModelState m = head_model(2, 2.0, 1);
  m.class_embeddings.setZero();
  m.class_embeddings(0, 0) = 1.0;
  m.class_embeddings(1, 1) = 1.0;
  SUBCASE("equidistant feature gives ln K for any eta") {
    for (double eta : {0.5, 2.0, 10.0}) {
      m.eta = eta;
      Matrix f = Matrix::Zero(1, 8);
      f(0, 0) = f(0, 1) = 1.0;
      CHECK(std::abs(cnce_loss(f, std::vector<int>{0}, m).value - std::log(2.0)) <= 1e-12);
    }
  }
  SUBCASE("feature on its embedding, eta 2") {
    Matrix f = m.class_embeddings.row(0);
    CHECK(std::abs(cnce_loss(f, std::vector<int>{0}, m).value - std::log1p(std::exp(-2.0))) <= 1e-12);
  }
  SUBCASE("positive rescaling invariance and bound") {
    ModelState r = head_model(4, 10.0, 2);
    const Matrix f = random_matrix(5, 8, 3);
    const std::vector<int> y{0, 1, 2, 3, 1};
    const double a = cnce_loss(f, y, r).value;
    ModelState r2 = r;
    r2.class_embeddings *= 7.0;
    const double b = cnce_loss((0.01 * f).eval(), y, r2).value;
    CHECK(std::abs(a - b) <= 1e-12 * std::max(1.0, a));
    CHECK(a >= 0.0);
    CHECK(a <= std::log(4.0) + 2.0 * r.eta);
  }
}

TEST_CASE("CNCE minimizer for two orthonormal embeddings") {
  // On the unit sphere the loss only depends on cos_0 - cos_1, which peaks at
  // (theta_0 - theta_1) / sqrt(2), not at theta_0 itself.
  ModelState m = head_model(2, 1.0, 4);
  m.class_embeddings.setZero();
  m.class_embeddings(0, 0) = 1.0;
  m.class_embeddings(1, 1) = 1.0;
  Matrix f = random_matrix(1, 8, 5);
  f.normalize();
  for (int step = 0; step < 4000; ++step) {
    f -= 0.5 * cnce_loss(f, std::vector<int>{0}, m).dfeatures;
    f.normalize();
  }
  CHECK(f(0, 0) == doctest::Approx(std::sqrt(0.5)).epsilon(1e-3));
  CHECK(f(0, 1) == doctest::Approx(-std::sqrt(0.5)).epsilon(1e-3));
  // Among the class embeddings themselves the true one is still the best.
  const double at_true = cnce_loss(m.class_embeddings.row(0), std::vector<int>{0}, m).value;
  const double at_other = cnce_loss(m.class_embeddings.row(1), std::vector<int>{0}, m).value;
  CHECK(at_true < at_other);
  CHECK(cnce_loss(f, std::vector<int>{0}, m).value < at_true);
}

TEST_CASE("margin loss closed forms") {
  ModelState m = head_model(3, 10.0, 6);
  m.class_embeddings.setZero();
  m.class_embeddings(0, 0) = 1.0;
  SUBCASE("maximal separation is zero") {
    m.class_embeddings(2, 0) = -1.0;
    m.class_embeddings(1, 1) = 1.0;
    Matrix f = m.class_embeddings.row(0);
    CHECK(margin_loss(f, std::vector<int>{0}, m, std::vector<int>{2}, 2.0).value == 0.0);
  }
  SUBCASE("direct hinge value") {
    // unit feature with cos 0.9 to class 0 and cos 0.7 to the new class 2.
    Matrix f = Matrix::Zero(1, 8);
    f(0, 0) = 0.9;
    f(0, 1) = std::sqrt(1 - 0.81);
    m.class_embeddings.row(2) = 0.7 * f.row(0);
    m.class_embeddings(2, 3) = std::sqrt(1 - 0.49);
    m.class_embeddings(1, 2) = 1.0;
    REQUIRE(cosine(f.row(0), m.class_embeddings.row(2)) == doctest::Approx(0.7).epsilon(1e-12));
    CHECK(std::abs(margin_loss(f, std::vector<int>{0}, m, std::vector<int>{2}, 0.3).value - 0.1) <= 1e-12);
  }
  SUBCASE("new-class anchor violates the contract") {
    const ModelState r = head_model(3, 10.0, 7);
    Matrix f = random_matrix(1, 8, 1);
    try {
      margin_loss(f, std::vector<int>{2}, r, std::vector<int>{2}, 0.3);
      FAIL("expected contract error");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::Contract);
    }
  }
}

TEST_CASE("centroid EMA") {
  Matrix f(2, 1);
  f << 1.0, 1.0;
  const std::vector<int> y{0, 0};
  SUBCASE("momentum 0.99 one step") {
    CentroidBank bank(1, 0.99);
    bank.set(0, Domain::Source, Vector::Zero(1));
    bank.update(f, y, Domain::Source);
    CHECK(bank.find(0)->source.value(0) == doctest::Approx(0.01).epsilon(1e-14));
  }
  SUBCASE("momentum 1 leaves centroids") {
    CentroidBank bank(1, 1.0);
    bank.set(0, Domain::Source, Vector::Constant(1, 3.0));
    bank.update(f, y, Domain::Source);
    CHECK(bank.find(0)->source.value(0) == 3.0);
  }
  SUBCASE("momentum 0 replaces") {
    CentroidBank bank(1, 0.0);
    bank.set(0, Domain::Source, Vector::Constant(1, 3.0));
    bank.update(f, y, Domain::Source);
    CHECK(bank.find(0)->source.value(0) == 1.0);
  }
  SUBCASE("first sight initializes; absent classes untouched") {
    CentroidBank bank(1, 0.99);
    bank.set(5, Domain::Target, Vector::Constant(1, 2.0));
    bank.update(f, y, Domain::Target);
    CHECK(bank.find(0)->target.initialized);
    CHECK(!bank.find(0)->source.initialized);
    CHECK(bank.find(0)->target.value(0) == 1.0);
    CHECK(bank.find(5)->target.value(0) == 2.0);
  }
}

TEST_CASE("contrastive closed forms") {
  SUBCASE("tau 0 gives ln(2K - 1)") {
    for (int k : {2, 3, 5}) {
      const CentroidBank bank = bank_from(random_matrix(k, 8, 1), random_matrix(k, 8, 2));
      CHECK(std::abs(contrastive_loss(bank, iota_ids(k), 0.0).value - std::log(2.0 * k - 1.0)) <= 1e-12);
    }
  }
  SUBCASE("aligned pairs, orthogonal classes") {
    Matrix s = Matrix::Zero(2, 8);
    s(0, 0) = 1.0;
    s(1, 1) = 1.0;
    const double v = contrastive_loss(bank_from(s, s), iota_ids(2), 1.0).value;
    CHECK(std::abs(v - (-std::log(std::exp(1.0) / (std::exp(1.0) + 2.0)))) <= 1e-12);
  }
  SUBCASE("no eligible class is skipped, not an error") {
    CentroidBank bank(8, 0.99);
    bank.set(0, Domain::Source, Vector::Ones(8));
    const ContrastiveResult r = contrastive_loss(bank, iota_ids(2), 1.0);
    CHECK(r.skipped);
    CHECK(r.value == 0.0);
  }
  SUBCASE("strictly decreasing in the positive similarity") {
    // Class 0 target rotates towards its source inside a plane orthogonal to
    // everything else, so only <s_0, t_0> changes.
    Matrix s = Matrix::Zero(2, 8), t = Matrix::Zero(2, 8);
    s(0, 0) = 1.0;
    s(1, 2) = 1.0;
    t(1, 3) = 1.0;
    double prev = INFINITY;
    for (double a = 0.0; a <= 1.5; a += 0.1) {
      t.row(0).setZero();
      t(0, 0) = std::cos(1.5 - a);
      t(0, 1) = std::sin(1.5 - a);
      const double v = contrastive_loss(bank_from(s, t), iota_ids(2), 1.0).value;
      CHECK(v < prev);
      prev = v;
    }
  }
}

TEST_CASE("distillation anchors") {
  const Matrix f = random_matrix(3, 8, 1);
  CHECK(std::abs(distillation_loss(f, f).value) <= 1e-12);
  CHECK(std::abs(distillation_loss(f, (-f).eval()).value - 2.0) <= 1e-12);
  Matrix a = Matrix::Zero(1, 8), b = Matrix::Zero(1, 8);
  a(0, 0) = 3.0;
  b(0, 5) = 0.2;
  CHECK(std::abs(distillation_loss(a, b).value - 1.0) <= 1e-12);
  CHECK(std::abs(distillation_loss((4.0 * f).eval(), f).value) <= 1e-12);
  try {
    distillation_loss(Matrix::Zero(1, 8), b);
    FAIL("expected degenerate-norm error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::DegenerateNorm);
  }
}

TEST_CASE("oracle equivalence on random instances") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const int k = 2 + static_cast<int>(seed % 4);
    const ModelState m = head_model(k, 3.0, seed);
    const Matrix f = random_matrix(6, 8, seed + 1);
    std::vector<int> y;
    for (int i = 0; i < 6; ++i) y.push_back(i % (k - 1));
    CHECK(std::abs(cnce_loss(f, y, m).value - cnce_oracle(f, y, m)) <= 1e-9);
    const std::vector<int> fresh{k - 1};
    CHECK(std::abs(margin_loss(f, y, m, fresh, 0.3).value - margin_oracle(f, y, m, fresh, 0.3)) <= 1e-9);
    const Matrix s = random_matrix(k, 8, seed + 2), t = random_matrix(k, 8, seed + 3);
    CHECK(std::abs(contrastive_loss(bank_from(s, t), iota_ids(k), 1.7).value - contrastive_oracle(s, t, 1.7)) <= 1e-9);
  }
}

TEST_CASE("loss gradients match finite differences") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    CAPTURE(seed);
    ModelState m = head_model(4, 3.0, seed);
    Matrix f = random_matrix(5, 8, seed + 1);
    const std::vector<int> y{0, 1, 2, 0, 1};
    std::vector<double> fx = flat(f), ex = flat(m.class_embeddings);
    auto sync = [&] {
      f = Eigen::Map<Matrix>(fx.data(), 5, 8);
      m.class_embeddings = Eigen::Map<Matrix>(ex.data(), 4, 8);
    };
    const auto coords_f = sample_coords(fx.size(), 40, seed);
    const auto coords_e = sample_coords(ex.size(), 32, seed);

    SUBCASE("CNCE") {
      const LossTerm g = cnce_loss(f, y, m);
      auto v = [&] { sync(); return cnce_loss(f, y, m).value; };
      CHECK(fd_rel_err(fx, v, flat(g.dfeatures), coords_f) <= 1e-4);
      CHECK(fd_rel_err(ex, v, flat(g.dembeddings), coords_e) <= 1e-4);
    }
    SUBCASE("margin, active and inactive hinges") {
      for (double margin : {1.8, 0.0}) {
        const std::vector<int> fresh{3};
        const LossTerm g = margin_loss(f, y, m, fresh, margin);
        auto v = [&] { sync(); return margin_loss(f, y, m, fresh, margin).value; };
        if (margin > 1.0) REQUIRE(g.value > 0.0);
        CHECK(fd_rel_err(fx, v, flat(g.dfeatures), coords_f) <= 1e-4);
        CHECK(fd_rel_err(ex, v, flat(g.dembeddings), coords_e) <= 1e-4);
      }
    }
    SUBCASE("distillation") {
      const Matrix old = random_matrix(5, 8, seed + 9);
      const LossTerm g = distillation_loss(f, old);
      auto v = [&] { sync(); return distillation_loss(f, old).value; };
      CHECK(fd_rel_err(fx, v, flat(g.dfeatures), coords_f) <= 1e-4);
    }
    SUBCASE("logit distillation") {
      ModelState old = head_model(3, 3.0, seed + 11);
      old.seen_classes = {0, 1, 2};
      const Matrix of = random_matrix(5, 8, seed + 12);
      const LossTerm g = logit_distillation_loss(f, of, m, old, 2.0);
      auto v = [&] { sync(); return logit_distillation_loss(f, of, m, old, 2.0).value; };
      CHECK(fd_rel_err(fx, v, flat(g.dfeatures), coords_f) <= 1e-4);
      CHECK(fd_rel_err(ex, v, flat(g.dembeddings), coords_e) <= 1e-4);
    }
    SUBCASE("contrastive through centroid updates") {
      // Source centroids are seeded, then moved by the batch (rows 0-2 source,
      // rows 3-4 target); gradients flow back through the EMA weights.
      const Matrix s0 = random_matrix(3, 8, seed + 20), t0 = random_matrix(3, 8, seed + 21);
      const std::vector<int> ys{0, 1, 2}, yt{0, 1};
      auto run = [&](ContrastiveResult* out, std::vector<CentroidUpdate>* ups) {
        CentroidBank bank(8, 0.9);
        for (int k = 0; k < 3; ++k) bank.set(k, Domain::Source, s0.row(k).transpose());
        bank.set(2, Domain::Target, t0.row(2).transpose());
        auto u1 = bank.update(f.topRows(3), ys, Domain::Source);
        auto u2 = bank.update(f.bottomRows(2), yt, Domain::Target);
        for (auto& c : u2.contributions)
          for (int& r : c.rows) r += 3;
        ContrastiveResult r = contrastive_loss(bank, std::vector<int>{0, 1, 2}, 1.3);
        if (ups != nullptr) *ups = {u1, u2};
        if (out != nullptr) *out = r;
        return r.value;
      };
      ContrastiveResult res;
      std::vector<CentroidUpdate> ups;
      run(&res, &ups);
      REQUIRE(res.eligible_classes == 3);
      const FeatureBatch g = chain_centroid_grads(res, ups, 5, 8);
      auto v = [&] { sync(); return run(nullptr, nullptr); };
      CHECK(fd_rel_err(fx, v, flat(g), coords_f) <= 1e-4);
    }
  }
}

TEST_CASE("total loss composition") {
  const ModelState m = head_model(3, 3.0, 1);
  const Matrix f = random_matrix(4, 8, 2), old = random_matrix(4, 8, 3);
  const std::vector<int> y{0, 1, 0, 1};
  LossParts parts;
  parts.cnce = cnce_loss(f, y, m);
  parts.dist = distillation_loss(f, old);
  parts.margin = margin_loss(f, y, m, std::vector<int>{2}, 0.7);
  parts.contras.value = 0.4;
  parts.contras.dfeatures = random_matrix(4, 8, 5);

  SUBCASE("all weights zero is exactly CNCE") {
    TrainLossConfig cfg;
    cfg.alpha_dist = cfg.alpha_margin = cfg.alpha_contras = 0.0;
    const LossTerm t = total_loss(parts, cfg);
    CHECK(t.value == parts.cnce.value);
    CHECK(t.dfeatures == parts.cnce.dfeatures);
  }
  SUBCASE("zero distillation term") {
    TrainLossConfig cfg;
    cfg.alpha_dist = 1.0;
    cfg.alpha_margin = cfg.alpha_contras = 0.0;
    LossParts p = parts;
    p.dist = distillation_loss(f, f);
    CHECK(std::abs(total_loss(p, cfg).value - parts.cnce.value) <= 1e-12);
  }
  SUBCASE("linearity of values and gradients") {
    TrainLossConfig cfg;
    cfg.alpha_dist = 5.0;
    cfg.alpha_margin = 1.0;
    cfg.alpha_contras = 0.3;
    const LossTerm t = total_loss(parts, cfg);
    const double v = parts.cnce.value + 5.0 * parts.dist.value + 1.0 * parts.margin.value + 0.3 * 0.4;
    CHECK(std::abs(t.value - v) <= 1e-10);
    const Matrix g = parts.cnce.dfeatures + 5.0 * parts.dist.dfeatures + parts.margin.dfeatures +
                     0.3 * parts.contras.dfeatures;
    CHECK((t.dfeatures - g).cwiseAbs().maxCoeff() <= 1e-10);
    const Matrix ge = parts.cnce.dembeddings + parts.margin.dembeddings;
    CHECK((t.dembeddings - ge).cwiseAbs().maxCoeff() <= 1e-10);
  }
}

TEST_CASE("config validation") {
  TrainLossConfig cfg;
  cfg.margin = 2.5;
  CHECK_THROWS_AS(cfg.validate(), Error);
  cfg.margin = 0.3;
  cfg.tau = 0.0;
  CHECK_THROWS_AS(cfg.validate(), Error);
}
