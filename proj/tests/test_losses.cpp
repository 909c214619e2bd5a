#include <gtest/gtest.h>

#include <cmath>

#include "ctxssl/losses.hpp"

using namespace ctxssl;

namespace {

Mat<double> unit_rows(Eigen::Index r, Eigen::Index c, Rng& rng) {
  Mat<double> m(r, c);
  for (Eigen::Index i = 0; i < r; ++i) {
    for (Eigen::Index j = 0; j < c; ++j) m(i, j) = rng.normal();
    m.row(i).normalize();
  }
  return m;
}

// Direct transcription: mean over anchors of -log(exp(s_ii/tau) / sum_j exp(s_ij/tau)).
double info_nce_loop(const Mat<double>& a, const Mat<double>& t, double tau) {
  double total = 0.0;
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    double denom = 0.0;
    for (Eigen::Index j = 0; j < t.rows(); ++j) denom += std::exp(a.row(i).dot(t.row(j)) / tau);
    total += -std::log(std::exp(a.row(i).dot(t.row(i)) / tau) / denom);
  }
  return total / static_cast<double>(a.rows());
}

}  // namespace

TEST(InfoNce, IdenticalTargetsGiveLogK) {
  Mat<double> a(5, 3);
  a.rowwise() = Eigen::RowVector3d(0, 0, 1);
  const auto r = info_nce_contextual<double>(a, a, 0.5);
  EXPECT_NEAR(r.loss, std::log(5.0), 1e-12);
}

TEST(InfoNce, TwoPairOrthogonalExample) {
  // Positives aligned (cos 1), negatives orthogonal (cos 0), tau 0.5:
  // -log(e^2 / (e^2 + 1)) = log(1 + e^-2).
  Mat<double> a(2, 2);
  a << 1, 0, 0, 1;
  const auto r = info_nce_contextual<double>(a, a, 0.5);
  EXPECT_NEAR(r.loss, std::log1p(std::exp(-2.0)), 1e-12);
  EXPECT_NEAR(r.loss, 0.126928, 1e-6);
}

TEST(InfoNce, LowTemperatureLimit) {
  Mat<double> a(2, 2);
  a << 1, 0, 0, 1;
  EXPECT_LT(info_nce_contextual<double>(a, a, 1e-3).loss, 1e-12);
}

TEST(InfoNce, MatchesLoopOracle) {
  Rng rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    const auto a = unit_rows(7, 5, rng), t = unit_rows(7, 5, rng);
    const double tau = 0.05 + rng.uniform();
    EXPECT_NEAR(info_nce_contextual<double>(a, t, tau).loss, info_nce_loop(a, t, tau), 1e-10);
  }
}

TEST(InfoNce, TermsAreBounded) {
  Rng rng(2);
  const auto a = unit_rows(16, 8, rng), t = unit_rows(16, 8, rng);
  const auto r = info_nce_contextual<double>(a, t, 1.0);
  for (double term : r.terms) {
    EXPECT_GE(term, 0.0);
    // With |cos| <= 1 and tau = 1 a term is at most log(1 + (K-1) e^2).
    EXPECT_LE(term, std::log(1.0 + 15.0 * std::exp(2.0)));
  }
}

TEST(InfoNce, PermutationEquivariant) {
  Rng rng(3);
  const auto a = unit_rows(6, 4, rng), t = unit_rows(6, 4, rng);
  Eigen::PermutationMatrix<Eigen::Dynamic> perm(6);
  perm.setIdentity();
  std::swap(perm.indices()[0], perm.indices()[4]);
  std::swap(perm.indices()[1], perm.indices()[2]);
  const Mat<double> pa = perm * a, pt = perm * t;
  EXPECT_NEAR(info_nce_contextual<double>(pa, pt, 0.3).loss, info_nce_contextual<double>(a, t, 0.3).loss, 1e-12);
}

TEST(InfoNce, GradientMatchesFiniteDifference) {
  Rng rng(4);
  const auto a = unit_rows(4, 3, rng), t = unit_rows(4, 3, rng);
  const auto r = info_nce_contextual<double>(a, t, 0.2);
  const double h = 1e-6;
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 3; ++j) {
      Mat<double> ap = a, am = a, tp = t, tm = t;
      ap(i, j) += h, am(i, j) -= h, tp(i, j) += h, tm(i, j) -= h;
      EXPECT_NEAR((info_nce_loop(ap, t, 0.2) - info_nce_loop(am, t, 0.2)) / (2 * h), r.d_anchor(i, j), 1e-7);
      EXPECT_NEAR((info_nce_loop(a, tp, 0.2) - info_nce_loop(a, tm, 0.2)) / (2 * h), r.d_target(i, j), 1e-7);
    }
}

TEST(InfoNce, Errors) {
  Mat<double> one(1, 3);
  one << 1, 0, 0;
  EXPECT_THROW(info_nce_contextual<double>(one, one, 0.5), Error);
  Mat<double> z = Mat<double>::Zero(2, 3);
  try {
    info_nce_contextual<double>(z, z, 0.5);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Numeric);
  }
  Mat<double> a(2, 2);
  a << 1, 0, 0, 1;
  EXPECT_THROW(info_nce_contextual<double>(a, a, 0.0), Error);
}

TEST(Symmetric, AveragesBothDirections) {
  Rng rng(5);
  const auto x = unit_rows(5, 4, rng), y = unit_rows(5, 4, rng);
  const double fwd = info_nce_loop(x, y, 0.4), bwd = info_nce_loop(y, x, 0.4);
  EXPECT_NEAR(symmetric_contrastive<double>(x, y, 0.4, true).loss, (fwd + bwd) / 2, 1e-10);
  EXPECT_NEAR(symmetric_contrastive<double>(x, y, 0.4, false).loss, fwd, 1e-12);
  EXPECT_NEAR(symmetric_contrastive<double>(y, x, 0.4, true).loss, symmetric_contrastive<double>(x, y, 0.4, true).loss,
              1e-12);
}

TEST(Symmetric, HandComputedTwoPair) {
  // x = (e1, e2), y = (e1, (e1 + e2)/sqrt 2), tau = 1.
  Mat<double> x(2, 2), y(2, 2);
  const double s = 1.0 / std::sqrt(2.0);
  x << 1, 0, 0, 1;
  y << 1, 0, s, s;
  // x-anchored: row 0 logits (1, s), row 1 logits (0, s).
  const double f0 = std::log(std::exp(1.0) + std::exp(s)) - 1.0;
  const double f1 = std::log(1.0 + std::exp(s)) - s;
  // y-anchored: row 0 logits (1, 0), row 1 logits (s, s).
  const double b0 = std::log(std::exp(1.0) + 1.0) - 1.0;
  const double b1 = std::log(2.0);
  const auto r = symmetric_contrastive<double>(x, y, 1.0, true);
  EXPECT_NEAR(r.loss, (f0 + f1 + b0 + b1) / 4, 1e-10);
  EXPECT_NEAR(r.terms[0], (f0 + b0) / 2, 1e-10);
  EXPECT_NEAR(r.terms[1], (f1 + b1) / 2, 1e-10);
}

TEST(Mse, ExactAndOffsetCases) {
  Mat<double> a = Mat<double>::Constant(3, 4, 0.5);
  EXPECT_EQ(predictor_mse<double>(a, a), 0.0);
  const Mat<double> b = (a.array() + 1.0).matrix();
  EXPECT_NEAR(predictor_mse<double>(a, b), 1.0, 1e-15);
}

TEST(Mse, MatchesLoopOracle) {
  Rng rng(6);
  Mat<double> p(3, 4), t(3, 4);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 4; ++j) p(i, j) = rng.normal(), t(i, j) = rng.normal();
  double sum = 0.0;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 4; ++j) sum += (p(i, j) - t(i, j)) * (p(i, j) - t(i, j));
  EXPECT_NEAR(predictor_mse<double>(p, t), sum / 12.0, 1e-12);
}

TEST(Mse, MaskSelectsEntries) {
  Mat<double> p(2, 3), t = Mat<double>::Zero(2, 3);
  p << 1, 2, 3, 4, 5, 6;
  const std::vector<std::vector<std::uint8_t>> mask = {{1, 0, 0}, {0, 0, 1}};
  const auto r = predictor_mse<double>(p, t, mask);
  EXPECT_EQ(r.count, 2u);
  EXPECT_NEAR(r.loss, (1.0 + 36.0) / 2.0, 1e-12);
  EXPECT_NEAR(r.d_pred(0, 0), 1.0, 1e-12);
  EXPECT_NEAR(r.d_pred(1, 2), 6.0, 1e-12);
  EXPECT_EQ(r.d_pred(0, 1), 0.0);
  const std::vector<std::vector<std::uint8_t>> none = {{0, 0, 0}, {0, 0, 0}};
  EXPECT_EQ(predictor_mse<double>(p, t, none).loss, 0.0);
}

TEST(Mse, Errors) {
  Mat<double> p = Mat<double>::Zero(2, 2), t = Mat<double>::Zero(2, 3);
  EXPECT_THROW(predictor_mse<double>(p, t), Error);
  Mat<double> q = Mat<double>::Zero(2, 2);
  q(1, 1) = std::nan("");
  try {
    predictor_mse<double>(q, p);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Numeric);
  }
}

TEST(Total, WeightedSum) {
  EXPECT_NEAR(total_loss(1.2, 0.5, 1.0).total, 1.7, 1e-15);
  EXPECT_NEAR(total_loss(1.2, 0.5, 0.0).total, 1.2, 1e-15);
  EXPECT_NEAR(total_loss(0.3, 2.0, 0.25).total, 0.8, 1e-15);
  EXPECT_THROW(total_loss(std::nan(""), 0.0, 1.0), Error);
  EXPECT_THROW(total_loss(1.0, std::numeric_limits<double>::infinity(), 1.0), Error);
}

TEST(Config, Validation) {
  LossConfig c;
  EXPECT_NO_THROW(c.validate());
  c.tau = 0.0;
  EXPECT_THROW(c.validate(), Error);
  c = LossConfig{};
  c.lambda = -1.0;
  EXPECT_THROW(c.validate(), Error);
}
