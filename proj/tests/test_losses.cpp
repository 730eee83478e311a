#include "nodule_align/losses.hpp"
#include "nodule_align/rng.hpp"

#include <gtest/gtest.h>

#include <chrono>
#include <functional>

using namespace nodule_align;

namespace {

Mat<double> random_mat(Rng& rng, int r, int c) {
  Mat<double> m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
  return m;
}

AttributeWeights random_weights(Rng& rng) {
  AttributeValues v{};
  for (int m = 0; m < kAttributeCount; ++m) {
    const auto r = attribute_range(m);
    v[static_cast<std::size_t>(m)] = r.lo + rng.uniform() * (r.hi - r.lo);
  }
  return attribute_weights(std::span<const double>(v));
}

double cos_loop(const Mat<double>& a, int i, const Mat<double>& b, int j, double scale_b = 1.0) {
  double dot = 0, na = 0, nb = 0;
  for (Eigen::Index c = 0; c < a.cols(); ++c) {
    const double x = a(i, c), y = scale_b * b(j, c);
    dot += x * y;
    na += x * x;
    nb += y * y;
  }
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

double ic_oracle(const Mat<double>& F, const Mat<double>& C, int y, double tau) {
  double loss = 0;
  for (int t = 0; t < F.rows(); ++t) {
    double denom = 0;
    for (int k = 0; k < C.rows(); ++k) denom += std::exp(cos_loop(F, t, C, k) / tau);
    loss -= std::log(std::exp(cos_loop(F, t, C, y) / tau) / denom);
  }
  return loss;
}

/// Attribute objectives as written: cosine against w_m * A_m, or with log w_m on the logit.
double attr_oracle(const Mat<double>& Q, const Mat<double>& A, const AttributeWeights& w, double tau,
                   AttributeWeighting mode) {
  const bool scaled = mode == AttributeWeighting::cosine_inert;
  auto logit = [&](int t, int m) {
    return cos_loop(Q, t, A, m, scaled ? w[m] : 1.0) / tau + (scaled ? 0.0 : std::log(w[m]));
  };
  double loss = 0;
  for (int t = 0; t < Q.rows(); ++t) {
    double denom = 0;
    for (int m = 0; m < kAttributeCount; ++m) denom += std::exp(logit(t, m));
    for (int m = 0; m < kAttributeCount; ++m) loss -= std::log(std::exp(logit(t, m)) / denom);
  }
  return loss;
}

double rel_err(const Mat<double>& a, const Mat<double>& b) {
  const double scale = std::max({a.norm(), b.norm(), 1e-12});
  return (a - b).norm() / scale;
}

Mat<double> numeric_grad(const std::function<double(const Mat<double>&)>& f, Mat<double> x, double h = 1e-6) {
  Mat<double> g(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double keep = x.data()[i];
    x.data()[i] = keep + h;
    const double up = f(x);
    x.data()[i] = keep - h;
    const double down = f(x);
    x.data()[i] = keep;
    g.data()[i] = (up - down) / (2 * h);
  }
  return g;
}

double numeric_scalar(const std::function<double(double)>& f, double x, double h = 1e-6) {
  return (f(x + h) - f(x - h)) / (2 * h);
}

struct Shapes {
  int T, K, d;
};

Shapes random_shapes(Rng& rng) {
  return {1 + static_cast<int>(rng.below(4)), 2 + static_cast<int>(rng.below(2)), 2 + static_cast<int>(rng.below(15))};
}

}  // namespace

TEST(LossOracle, VectorizedMatchesScalarLoops) {
  const auto start = std::chrono::steady_clock::now();
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Rng rng(seed);
    const auto s = random_shapes(rng);
    const Mat<double> F = random_mat(rng, s.T, s.d), C = random_mat(rng, s.K, s.d), A = random_mat(rng, 8, s.d);
    const auto w = random_weights(rng);
    const double tau = 0.03 + rng.uniform() * 0.5;
    const double lt = std::log(tau);
    const int y = static_cast<int>(rng.below(static_cast<std::uint64_t>(s.K)));

    EXPECT_NEAR(image_class_loss<double>(F, C, y, lt).loss, ic_oracle(F, C, y, tau), 1e-10) << seed;
    for (auto mode : {AttributeWeighting::log_weight, AttributeWeighting::cosine_inert}) {
      EXPECT_NEAR(image_attribute_loss<double>(F, A, w, lt, mode).loss, attr_oracle(F, A, w, tau, mode), 1e-10) << seed;
      EXPECT_NEAR(class_attribute_loss<double>(C, A, w, lt, mode).loss, attr_oracle(C, A, w, tau, mode), 1e-10) << seed;
    }
  }
  EXPECT_LT(std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count(), 10.0);
}

TEST(LossOracle, CosineInertIgnoresWeights) {
  Rng rng(42);
  const Mat<double> F = random_mat(rng, 3, 8), A = random_mat(rng, 8, 8);
  AttributeWeights uniform;
  uniform.w.fill(1.0 / 8);
  for (int trial = 0; trial < 20; ++trial) {
    const auto w = random_weights(rng);
    EXPECT_NEAR(image_attribute_loss<double>(F, A, w, std::log(0.07), AttributeWeighting::cosine_inert).loss,
                image_attribute_loss<double>(F, A, uniform, std::log(0.07), AttributeWeighting::cosine_inert).loss,
                1e-10);
  }
}

TEST(LossOracle, LogWeightFloorIsEntropyOfWeights) {
  // With all-ones targets the loss per query row is bounded below by M log M.
  Rng rng(9);
  for (int trial = 0; trial < 50; ++trial) {
    const Mat<double> F = random_mat(rng, 4, 8), A = random_mat(rng, 8, 8);
    const auto w = random_weights(rng);
    const double l = image_attribute_loss<double>(F, A, w, std::log(0.07)).loss;
    EXPECT_GE(l, 4 * 8 * std::log(8.0) - 1e-9);
  }
}

TEST(LossGradient, MatchesCentralDifferences) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed + 1000);
    const auto s = random_shapes(rng);
    const Mat<double> F = random_mat(rng, s.T, s.d), C = random_mat(rng, s.K, s.d), A = random_mat(rng, 8, s.d);
    const auto w = random_weights(rng);
    const double lt = std::log(0.05 + rng.uniform() * 0.3);
    const int y = static_cast<int>(rng.below(static_cast<std::uint64_t>(s.K)));

    const auto ic = image_class_loss<double>(F, C, y, lt);
    EXPECT_LT(rel_err(ic.d_query, numeric_grad([&](const Mat<double>& x) { return image_class_loss<double>(x, C, y, lt, false).loss; }, F)), 1e-6);
    EXPECT_LT(rel_err(ic.d_keys, numeric_grad([&](const Mat<double>& x) { return image_class_loss<double>(F, x, y, lt, false).loss; }, C)), 1e-6);
    EXPECT_NEAR(ic.d_log_tau, numeric_scalar([&](double v) { return image_class_loss<double>(F, C, y, v, false).loss; }, lt),
                1e-6 * std::max(1.0, std::abs(ic.d_log_tau)));

    for (auto mode : {AttributeWeighting::log_weight, AttributeWeighting::cosine_inert}) {
      const auto ia = image_attribute_loss<double>(F, A, w, lt, mode);
      EXPECT_LT(rel_err(ia.d_query, numeric_grad([&](const Mat<double>& x) { return image_attribute_loss<double>(x, A, w, lt, mode, false).loss; }, F)), 1e-6);
      EXPECT_LT(rel_err(ia.d_keys, numeric_grad([&](const Mat<double>& x) { return image_attribute_loss<double>(F, x, w, lt, mode, false).loss; }, A)), 1e-6);
      EXPECT_NEAR(ia.d_log_tau, numeric_scalar([&](double v) { return image_attribute_loss<double>(F, A, w, v, mode, false).loss; }, lt),
                  1e-6 * std::max(1.0, std::abs(ia.d_log_tau)));

      const auto ca = class_attribute_loss<double>(C, A, w, lt, mode);
      EXPECT_LT(rel_err(ca.d_query, numeric_grad([&](const Mat<double>& x) { return class_attribute_loss<double>(x, A, w, lt, mode, false).loss; }, C)), 1e-6);
      EXPECT_NEAR(ca.d_log_tau, numeric_scalar([&](double v) { return class_attribute_loss<double>(C, A, w, v, mode, false).loss; }, lt),
                  1e-6 * std::max(1.0, std::abs(ca.d_log_tau)));
    }
  }
}

TEST(LossGradient, CrossEntropyMatchesCentralDifferences) {
  Rng rng(77);
  for (int trial = 0; trial < 20; ++trial) {
    const int k = 2 + static_cast<int>(rng.below(2));
    RowVec<double> logits = random_mat(rng, 1, k).row(0) * 3.0;
    const int y = static_cast<int>(rng.below(static_cast<std::uint64_t>(k)));
    RowVec<double> g;
    cross_entropy<double>(logits, y, &g);
    const Mat<double> n = numeric_grad([&](const Mat<double>& x) { return cross_entropy<double>(RowVec<double>(x.row(0)), y); }, Mat<double>(logits));
    EXPECT_LT(rel_err(Mat<double>(g), n), 1e-6);
  }
}

TEST(LossContract, RejectsDegenerateInput) {
  Rng rng(1);
  const Mat<double> F = random_mat(rng, 2, 4), C = random_mat(rng, 3, 4);
  EXPECT_THROW(image_class_loss<double>(F, C, 3, 0.0), ValidationError);
  EXPECT_THROW(image_class_loss<double>(F, C, -1, 0.0), ValidationError);
  Mat<double> Z = F;
  Z.row(1).setZero();
  EXPECT_THROW(image_class_loss<double>(Z, C, 0, 0.0), ValidationError);
  EXPECT_THROW(image_attribute_loss<double>(F, C, random_weights(rng), 0.0), ValidationError);
  EXPECT_THROW(image_class_loss<double>(F, random_mat(rng, 3, 5), 0, 0.0), ValidationError);
  EXPECT_THROW(image_class_loss<double>(F, C, 0, -1e6), NonFiniteLoss);
}

TEST(LossContract, TotalNamesNonFiniteComponent) {
  const auto l = total_loss(1.0, 2.0, 3.0, 4.0, 1.0, 0.5);
  EXPECT_DOUBLE_EQ(l.total, 1.0 + 2.0 + 3.0 + 2.0);
  try {
    total_loss(1.0, 2.0, std::nan(""), 4.0);
    FAIL();
  } catch (const NonFiniteLoss& e) {
    EXPECT_NE(std::string(e.what()).find("ia"), std::string::npos);
  }
  EXPECT_THROW(total_loss(1.0, 2.0, 3.0, INFINITY), NonFiniteLoss);
}

TEST(LossContract, BatchMeanAveragesEachComponent) {
  const std::vector<LossBreakdown> v = {total_loss(1, 2, 3, 4), total_loss(3, 4, 5, 6)};
  const auto m = batch_mean(v);
  EXPECT_DOUBLE_EQ(m.ce, 2);
  EXPECT_DOUBLE_EQ(m.ca, 5);
  EXPECT_DOUBLE_EQ(m.total, (v[0].total + v[1].total) / 2);
  EXPECT_THROW(batch_mean({}), ValidationError);
}

TEST(Temperature, StoredAsLogAndPositive) {
  const auto t = Temperature<double>::from_value(0.07);
  EXPECT_NEAR(t.value(), 0.07, 1e-15);
  EXPECT_THROW(Temperature<double>::from_value(0.0), ConfigError);
  EXPECT_THROW(Temperature<double>::from_value(-1.0), ConfigError);
  EXPECT_EQ(parse_attribute_weighting("log_weight"), AttributeWeighting::log_weight);
  EXPECT_THROW(parse_attribute_weighting("none"), ConfigError);
}
