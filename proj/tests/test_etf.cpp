#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "test_helpers.hpp"

using namespace fedktl;
using fedktl::testing::random_tensor;

namespace {

double dot_columns(const SimplexEtf<double>& e, std::size_t a, std::size_t b) {
  double s = 0;
  for (std::size_t k = 0; k < e.dim; ++k) s += e.vectors.at(k, a) * e.vectors.at(k, b);
  return s;
}

struct EtfCase {
  std::size_t C, K;
};

class EtfGeometry : public ::testing::TestWithParam<EtfCase> {};

}  // namespace

TEST_P(EtfGeometry, UnitNormsAndEqualAngles) {
  const auto [C, K] = GetParam();
  const auto e = synthesize_etf(C, K, 7);
  ASSERT_EQ(e.vectors.rows(), K);
  ASSERT_EQ(e.vectors.cols(), C);
  for (std::size_t a = 0; a < C; ++a) {
    EXPECT_NEAR(dot_columns(e, a, a), 1.0, 1e-6);
    for (std::size_t b = a + 1; b < C; ++b) EXPECT_NEAR(dot_columns(e, a, b), -1.0 / double(C - 1), 1e-6);
  }
}

INSTANTIATE_TEST_SUITE_P(Sizes, EtfGeometry,
                         ::testing::Values(EtfCase{2, 1}, EtfCase{2, 2}, EtfCase{2, 4}, EtfCase{3, 2}, EtfCase{3, 3},
                                           EtfCase{3, 6}, EtfCase{10, 9}, EtfCase{10, 10}, EtfCase{10, 20},
                                           EtfCase{100, 99}, EtfCase{100, 100}, EtfCase{100, 200}));

TEST(Etf, TwoClassesAreAntipodal) {
  const auto e = synthesize_etf(2, 2, 1);
  EXPECT_NEAR(dot_columns(e, 0, 1), -1.0, 1e-12);
}

TEST(Etf, GramMatchesClosedForm) {
  const std::size_t C = 10;
  const auto e = synthesize_etf(C, C, 7);
  for (std::size_t a = 0; a < C; ++a)
    for (std::size_t b = 0; b < C; ++b) {
      const double expected = double(C) / double(C - 1) * ((a == b ? 1.0 : 0.0) - 1.0 / double(C));
      EXPECT_NEAR(dot_columns(e, a, b), expected, 1e-6);
    }
}

TEST(Etf, RotationIsColumnOrthonormalWhenKAtLeastC) {
  for (std::size_t K : {10u, 20u}) {
    const auto e = synthesize_etf(10, K, 3);
    for (std::size_t a = 0; a < 10; ++a)
      for (std::size_t b = 0; b < 10; ++b) {
        double s = 0;
        for (std::size_t k = 0; k < K; ++k) s += e.rotation.at(k, a) * e.rotation.at(k, b);
        EXPECT_NEAR(s, a == b ? 1.0 : 0.0, 1e-10);
      }
  }
}

TEST(Etf, DimensionBelowCMinusOneIsRejected) {
  EXPECT_THROW(synthesize_etf(10, 8, 1), ConfigError);
  EXPECT_THROW(synthesize_etf(1, 1, 1), ConfigError);
}

TEST(Etf, SameSeedSameFrame) {
  EXPECT_EQ(synthesize_etf(5, 5, 9).vectors, synthesize_etf(5, 5, 9).vectors);
  EXPECT_NE(synthesize_etf(5, 5, 9).vectors, synthesize_etf(5, 5, 10).vectors);
}

TEST(CosineLogits, ClassVectorScoresOneAgainstItself) {
  const auto e = synthesize_etf(4, 4, 2);
  const auto v = e.column(2);
  const auto l = cosine_logits<double>(v, e);
  for (std::size_t c = 0; c < 4; ++c) EXPECT_NEAR(l[c], c == 2 ? 1.0 : -1.0 / 3.0, 1e-12);
  std::vector<double> neg(v.size());
  for (std::size_t k = 0; k < v.size(); ++k) neg[k] = -v[k];
  EXPECT_NEAR(cosine_logits<double>(neg, e)[2], -1.0, 1e-12);
}

TEST(CosineLogits, SumOfTwoVectorsMatchesDotProducts) {
  const auto e = synthesize_etf(3, 5, 4);
  std::vector<double> f(5);
  for (std::size_t k = 0; k < 5; ++k) f[k] = e.vectors.at(k, 0) + e.vectors.at(k, 1);
  double n = 0;
  for (double x : f) n += x * x;
  n = std::sqrt(n);
  const auto l = cosine_logits<double>(f, e);
  for (std::size_t c = 0; c < 3; ++c) {
    double d = 0;
    for (std::size_t k = 0; k < 5; ++k) d += f[k] * e.vectors.at(k, c);
    EXPECT_NEAR(l[c], d / n, 1e-12);
  }
}

TEST(CosineLogits, ZeroFeatureThrows) {
  const auto e = synthesize_etf(3, 3, 1);
  std::vector<double> z(3, 0.0);
  EXPECT_THROW(cosine_logits<double>(z, e), NumericError);
}

namespace {

double arcface_value(const Tensor<double>& f, std::vector<std::size_t> y, const SimplexEtf<double>& e, ArcFaceParams p) {
  Tape<double> t;
  return t.item(arcface_loss(t, t.constant(f), std::move(y), e, p));
}

}  // namespace

TEST(ArcFace, UniformCosinesGiveLogC) {
  // A feature orthogonal to every class vector (possible when K > C - 1).
  const std::size_t C = 4, K = 6;
  const auto e = synthesize_etf(C, K, 5);
  std::vector<double> f(K);
  Rng rng(1);
  for (auto& x : f) x = rng.normal();
  // V lies in the column span of the orthonormal rotation U; remove it.
  for (int pass = 0; pass < 2; ++pass)
    for (std::size_t c = 0; c < C; ++c) {
      double d = 0;
      for (std::size_t k = 0; k < K; ++k) d += f[k] * e.rotation.at(k, c);
      for (std::size_t k = 0; k < K; ++k) f[k] -= d * e.rotation.at(k, c);
    }
  const auto x = Tensor<double>(Shape{1, K}, f);
  EXPECT_NEAR(arcface_value(x, {1}, e, {1.0, 0.0}), std::log(double(C)), 1e-10);
}

TEST(ArcFace, PerfectFeatureWithMarginHasVanishingLoss) {
  const auto e = synthesize_etf(2, 2, 3);
  const auto v = e.column(0);
  const double loss = arcface_value(Tensor<double>(Shape{1, 2}, v), {0}, e, {64.0, 0.5});
  const double direct = std::log1p(std::exp(-64.0 - 64.0 * std::cos(0.5)));
  EXPECT_NEAR(std::cos(0.5), 0.87758, 1e-5);
  EXPECT_LT(loss, 1e-30);
  EXPECT_NEAR(loss, direct, 1e-40);
}

TEST(ArcFace, ContrastiveVariantIsCrossEntropyOverCosines) {
  const auto e = synthesize_etf(5, 5, 2);
  const auto x = random_tensor(Shape{3, 5}, 4);
  const std::vector<std::size_t> y{0, 3, 4};
  double expected = 0;
  for (std::size_t r = 0; r < 3; ++r) {
    const auto l = cosine_logits<double>(x.row(r), e);
    double z = 0;
    for (double c : l) z += std::exp(c);
    expected += -(l[y[r]] - std::log(z));
  }
  EXPECT_NEAR(arcface_value(x, y, e, {1.0, 0.0}), expected / 3.0, 1e-12);
}

TEST(ArcFace, ScaleInvariantInFeatureNorm) {
  const auto e = synthesize_etf(4, 4, 8);
  auto x = random_tensor(Shape{2, 4}, 3);
  const double a = arcface_value(x, {1, 2}, e, {64.0, 0.5});
  for (auto& v : x.data()) v *= 3.5;
  EXPECT_NEAR(arcface_value(x, {1, 2}, e, {64.0, 0.5}), a, 1e-9 * std::max(1.0, a));
}

TEST(ArcFace, LossDecreasesAsTrueCosineGrows) {
  // m = 0: rotate the feature from v_1 towards v_0; loss on label 0 falls.
  const auto e = synthesize_etf(3, 3, 1);
  const auto v0 = e.column(0), v1 = e.column(1);
  double prev = std::numeric_limits<double>::infinity();
  for (int i = 0; i <= 10; ++i) {
    const double a = i / 10.0;
    std::vector<double> f(3);
    for (std::size_t k = 0; k < 3; ++k) f[k] = a * v0[k] + (1 - a) * v1[k];
    const double l = arcface_value(Tensor<double>(Shape{1, 3}, f), {0}, e, {4.0, 0.0});
    EXPECT_LT(l, prev);
    prev = l;
  }
}

TEST(ArcFace, GradientMatchesFiniteDifferences) {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    const auto e = synthesize_etf(5, 6, seed);
    auto X = random_tensor(Shape{4, 6}, seed + 100);
    const std::vector<std::size_t> y{0, 2, 4, 1};
    for (ArcFaceParams p : {ArcFaceParams{64.0, 0.5}, ArcFaceParams{1.0, 0.0}, ArcFaceParams{8.0, 0.3}}) {
      const double err = fd_gradcheck(
          {Probe{"f", &X}}, [&](Tape<double>& t) { return arcface_loss(t, t.input("f", X), y, e, p); }, 1e-6);
      EXPECT_LT(err, 1e-4) << "seed " << seed << " s " << p.scale;
    }
  }
}

TEST(ArcFace, MarginBeyondPiIsClampedWithZeroTrueGradient) {
  const auto e = synthesize_etf(2, 2, 1);
  const auto v1 = e.column(1);  // antipodal to v_0: theta_0 = pi
  Tape<double> t;
  const auto f = t.input("f", Tensor<double>(Shape{1, 2}, v1));
  const auto g = t.backward(arcface_loss(t, f, {0}, e, {2.0, 0.5}));
  // Logits: target clamped to -1, other class cos = 1 -> loss = log(1 + e^{4}).
  EXPECT_TRUE(std::isfinite(g.at("f")[0]));
  Tape<double> t2;
  EXPECT_NEAR(t2.item(arcface_loss(t2, t2.constant(Tensor<double>(Shape{1, 2}, v1)), {0}, e, {2.0, 0.5})),
              std::log1p(std::exp(4.0)), 1e-12);
}

TEST(ArcFace, BadInputsThrow) {
  const auto e = synthesize_etf(3, 3, 1);
  const auto x = random_tensor(Shape{1, 3}, 1);
  EXPECT_THROW(arcface_value(x, {3}, e, {}), ConfigError);
  EXPECT_THROW(arcface_value(Tensor<double>(Shape{1, 3}), {0}, e, {}), NumericError);
  EXPECT_THROW(arcface_value(x, {0}, e, {0.0, 0.5}), ConfigError);
  EXPECT_THROW(arcface_value(x, {0}, e, {64.0, 2.0}), ConfigError);
}

TEST(Predict, ArgmaxIndependentOfArcFaceParameters) {
  // Prediction uses raw cosines only; nothing to configure.
  const auto e = synthesize_etf(6, 6, 4);
  const auto x = random_tensor(Shape{20, 6}, 5);
  for (std::size_t r = 0; r < 20; ++r) {
    const auto l = cosine_logits<double>(x.row(r), e);
    const auto best = std::max_element(l.begin(), l.end()) - l.begin();
    EXPECT_EQ(predict_class<double>(x.row(r), e), static_cast<std::size_t>(best));
  }
}
