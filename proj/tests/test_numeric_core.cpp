#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "test_helpers.hpp"

using namespace fedktl;
using fedktl::testing::affine;
using fedktl::testing::random_tensor;

namespace {

Module<double> dense(std::size_t in, std::size_t out, std::uint64_t seed = 1) {
  return Module<double>("m", in, {layer::Dense{in, out}}, seed);
}

}  // namespace

TEST(Tensor, ShapeMustMatchData) {
  EXPECT_THROW(Tensor<double>(Shape{2, 3}, std::vector<double>(5)), ShapeError);
  Tensor<double> t(Shape{2, 3}, std::vector<double>(6, 1.0));
  EXPECT_EQ(t.size(), 6u);
  EXPECT_EQ(t.rows(), 2u);
  EXPECT_EQ(t.cols(), 3u);
}

TEST(Tensor, NonFiniteIsAnError) {
  auto t = Tensor<double>::vector({1.0, std::numeric_limits<double>::quiet_NaN()});
  EXPECT_FALSE(t.all_finite());
  EXPECT_THROW(t.check_finite("t"), NumericError);
}

TEST(Forward, IdentityWeightsPassInputThrough) {
  auto m = dense(3, 3);
  auto& W = m.find("m.0.weight")->value;
  auto& b = m.find("m.0.bias")->value;
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j) W.at(i, j) = i == j ? 1.0 : 0.0;
  for (auto& v : b.data()) v = 0.0;
  const auto y = m.infer(Tensor<double>::matrix(1, 3, {1, 2, 3}));
  EXPECT_EQ(y.buffer(), (std::vector<double>{1, 2, 3}));
}

TEST(Forward, ZeroWeightsGiveZeros) {
  auto m = dense(4, 2);
  for (auto& p : m.parameters())
    for (auto& v : p.value.data()) v = 0.0;
  const auto y = m.infer(random_tensor(Shape{3, 4}, 9));
  for (double v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(Forward, TwoLayerMatchesHandWrittenOracle) {
  Module<double> m("net", 5, {layer::Dense{5, 7}, layer::Relu{}, layer::Dense{7, 3}}, 42);
  const auto x = random_tensor(Shape{4, 5}, 3);
  const auto y = m.infer(x);
  const auto& W1 = m.find("net.0.weight")->value;
  const auto& b1 = m.find("net.0.bias")->value;
  const auto& W2 = m.find("net.2.weight")->value;
  const auto& b2 = m.find("net.2.bias")->value;
  for (std::size_t r = 0; r < 4; ++r) {
    std::vector<double> xr(x.row(r).begin(), x.row(r).end());
    auto h = affine(xr, W1, b1);
    for (auto& v : h) v = std::max(v, 0.0);
    const auto o = affine(h, W2, b2);
    for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(y.at(r, j), o[j], 1e-6 * std::max(1.0, std::abs(o[j])));
  }
}

TEST(Forward, AveragePoolAveragesWindows) {
  Tape<double> t;
  const auto y = t.value(avg_pool(t, t.constant(Tensor<double>::matrix(1, 6, {1, 3, 5, 7, 9, 11})), 3));
  EXPECT_EQ(y.buffer(), (std::vector<double>{2, 6, 10}));
}

TEST(Forward, InputWidthMismatchThrows) {
  auto m = dense(3, 2);
  EXPECT_THROW(m.infer(random_tensor(Shape{1, 4}, 1)), ShapeError);
}

TEST(Forward, LayerWidthsMustCompose) {
  EXPECT_THROW(Module<double>("bad", 3, {layer::Dense{3, 4}, layer::Dense{5, 2}}, 1), ShapeError);
}

TEST(Forward, NonFiniteActivationThrows) {
  auto m = dense(2, 2);
  auto x = Tensor<double>::matrix(1, 2, {std::numeric_limits<double>::infinity(), 1.0});
  EXPECT_THROW(m.infer(x), NumericError);
}

TEST(Backward, LinearSumGradientRowsEqualInput) {
  Tape<double> t;
  const auto x = t.constant(Tensor<double>::matrix(1, 2, {3.0, -2.0}));
  const auto W = t.input("W", Tensor<double>::matrix(2, 2, {1, 2, 3, 4}));
  const auto g = t.backward(sum(t, linear(t, x, W, Var{})));
  EXPECT_EQ(g.at("W").buffer(), (std::vector<double>{3, -2, 3, -2}));
}

TEST(Backward, ReluGatesGradient) {
  Tape<double> t;
  const auto x = t.input("x", Tensor<double>::vector({-1.0, 2.0}));
  const auto g = t.backward(sum_squares(t, relu(t, x)));
  EXPECT_EQ(g.at("x").buffer(), (std::vector<double>{0.0, 4.0}));
}

TEST(Backward, CalledTwiceThrows) {
  Tape<double> t;
  const auto loss = sum(t, t.input("x", Tensor<double>::vector({1.0})));
  t.backward(loss);
  EXPECT_THROW(t.backward(loss), Error);
}

TEST(Backward, NonScalarLossThrows) {
  Tape<double> t;
  const auto x = t.input("x", Tensor<double>::vector({1.0, 2.0}));
  EXPECT_THROW(t.backward(relu(t, x)), ShapeError);
}

TEST(Backward, FrozenParametersAreAbsent) {
  Module<double> a("a", 3, {layer::Dense{3, 3}}, 1);
  Module<double> b("b", 3, {layer::Dense{3, 2}}, 2);
  a.freeze();
  Tape<double> t;
  const auto y = b.forward(t, a.forward(t, t.constant(random_tensor(Shape{2, 3}, 4)), true), true);
  const auto g = t.backward(sum_squares(t, y));
  EXPECT_FALSE(g.count("a.0.weight"));
  EXPECT_FALSE(g.count("a.0.bias"));
  EXPECT_TRUE(g.count("b.0.weight"));
}

TEST(Backward, SharedModuleAccumulatesOneGradient) {
  Module<double> m("m", 2, {layer::Dense{2, 2}}, 3);
  Tape<double> t;
  const auto x = t.constant(random_tensor(Shape{1, 2}, 5));
  const auto once = m.forward(t, x, true);
  const auto twice = m.forward(t, once, true);
  const auto g = t.backward(sum(t, twice));
  EXPECT_EQ(g.size(), 2u);
}

TEST(Backward, ThreeLayerNetMatchesFiniteDifferences) {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    Module<double> net("net", 4,
                       {layer::Dense{4, 6}, layer::Relu{}, layer::Dense{6, 5}, layer::Tanh{}, layer::Dense{5, 3}},
                       seed);
    const auto x = random_tensor(Shape{6, 4}, seed + 10);
    const auto y = random_tensor(Shape{6, 3}, seed + 20);
    const double err = fd_gradcheck(probes_of({&net}),
                                    [&](Tape<double>& t) { return mse(t, net.forward(t, t.constant(x), true), t.constant(y)); },
                                    1e-4);
    EXPECT_LT(err, 1e-4) << "seed " << seed;
  }
}

TEST(Backward, BatchNormAndPoolMatchFiniteDifferences) {
  Module<double> net("bn", 4, {layer::Dense{4, 6}, layer::BatchNorm{6}, layer::Relu{}, layer::AvgPool{6, 4}}, 7);
  const auto x = random_tensor(Shape{5, 4}, 8);
  const auto y = random_tensor(Shape{5, 4}, 9);
  // Running statistics change on every train-mode pass but do not affect
  // the train-mode output, so the loss stays repeatable.
  const double err = fd_gradcheck(
      probes_of({&net}), [&](Tape<double>& t) { return mse(t, net.forward(t, t.constant(x), true), t.constant(y)); },
      1e-5);
  EXPECT_LT(err, 1e-4);
}

TEST(Backward, InputGradientThroughNamedInput) {
  auto X = random_tensor(Shape{3, 4}, 2);
  Module<double> net("n", 4, {layer::Dense{4, 2}, layer::Tanh{}}, 1);
  const double err = fd_gradcheck({Probe{"x", &X}},
                                  [&](Tape<double>& t) { return sum_squares(t, net.forward(t, t.input("x", X), true)); },
                                  1e-5);
  EXPECT_LT(err, 1e-6);
}

TEST(GradCheck, EpsilonOutOfRangeThrows) {
  auto X = random_tensor(Shape{1, 1}, 1);
  auto build = [&](Tape<double>& t) { return sum_squares(t, t.input("x", X)); };
  EXPECT_THROW(fd_gradcheck({Probe{"x", &X}}, build, 0.0), ConfigError);
  EXPECT_THROW(fd_gradcheck({Probe{"x", &X}}, build, 0.02), ConfigError);
}

TEST(GradCheck, DetectsWrongGradient) {
  // A hand-made op whose backward is off by a factor of two.
  auto X = Tensor<double>::vector({0.5, -1.5});
  auto build = [&](Tape<double>& t) {
    const auto x = t.input("x", X);
    double s = 0.0;
    for (double v : t.value(x).data()) s += v * v;
    return t.op(Tensor<double>::scalar(s), {x},
                [x](Tape<double>& tp, const Tensor<double>& gy) {
                  for (std::size_t i = 0; i < 2; ++i) tp.grad(x)[i] += gy[0] * 4.0 * tp.value(x)[i];
                },
                "bad");
  };
  EXPECT_GT(fd_gradcheck({Probe{"x", &X}}, build, 1e-5), 0.4);
}

TEST(BatchNorm, RunningStatisticsFollowMomentum) {
  Module<double> m("bn", 1, {layer::BatchNorm{1}}, 1);
  const auto x = Tensor<double>::matrix(2, 1, {0.0, 2.0});  // mean 1, unbiased variance 2
  for (int i = 0; i < 10; ++i) {
    Tape<double> t;
    m.forward(t, t.constant(x), true);
  }
  const double decay = std::pow(0.9, 10);
  EXPECT_NEAR(decay, 0.34867844, 1e-8);
  EXPECT_NEAR(m.running_mean(0)[0], 1.0 - decay, 1e-12);
  EXPECT_NEAR(m.running_var(0)[0], decay * 1.0 + (1.0 - decay) * 2.0, 1e-12);
}

TEST(BatchNorm, TrainModeNormalizesEvalModeUsesRunningStats) {
  Module<double> m("bn", 1, {layer::BatchNorm{1}}, 1);
  const auto x = Tensor<double>::matrix(2, 1, {0.0, 2.0});
  Tape<double> t;
  const auto y = t.value(m.forward(t, t.constant(x), true));
  EXPECT_NEAR(y[0], -1.0, 1e-5);
  EXPECT_NEAR(y[1], 1.0, 1e-5);
  // running: mean 0.1, var 0.9 + 0.1 * 2 = 1.1
  const auto e = m.infer(Tensor<double>::matrix(1, 1, {0.1}));
  EXPECT_NEAR(e[0], 0.0, 1e-12);
  const auto f = m.infer(Tensor<double>::matrix(1, 1, {0.1 + std::sqrt(1.1 + 1e-5)}));
  EXPECT_NEAR(f[0], 1.0, 1e-12);
}

TEST(Optimizer, SgdStepIsPlainDescent) {
  auto m = dense(2, 1);
  const auto before = m.find("m.0.weight")->value;
  Gradients<double> g{{"m.0.weight", Tensor<double>::matrix(1, 2, {1.0, -2.0})}};
  Sgd<double>(0.5).step(m, g);
  const auto& after = m.find("m.0.weight")->value;
  EXPECT_DOUBLE_EQ(after[0], before[0] - 0.5);
  EXPECT_DOUBLE_EQ(after[1], before[1] + 1.0);
}

TEST(Optimizer, SgdSkipsFrozenModules) {
  auto m = dense(2, 1);
  m.freeze();
  const auto h = m.state_hash();
  Sgd<double>(0.5).step(m, {{"m.0.weight", Tensor<double>::matrix(1, 2, {1.0, 1.0})}});
  EXPECT_EQ(m.state_hash(), h);
}

TEST(Optimizer, AdamMatchesReferenceRecursion) {
  auto m = dense(1, 1);
  auto& w = m.find("m.0.weight")->value;
  w[0] = 1.0;
  Adam<double> adam(AdamOptions{.lr = 0.1});
  const double grads[] = {0.5, -0.25, 2.0, 0.0, 1.0};
  double p = 1.0, mo = 0.0, ve = 0.0;
  for (int t = 1; t <= 5; ++t) {
    const double gi = grads[t - 1];
    adam.step(m, {{"m.0.weight", Tensor<double>::matrix(1, 1, {gi})}});
    mo = 0.9 * mo + 0.1 * gi;
    ve = 0.999 * ve + 0.001 * gi * gi;
    p -= 0.1 * (mo / (1 - std::pow(0.9, t))) / (std::sqrt(ve / (1 - std::pow(0.999, t))) + 1e-8);
    EXPECT_NEAR(w[0], p, 1e-12) << "step " << t;
  }
  EXPECT_EQ(adam.steps(), 5);
}

TEST(Optimizer, RejectsNonFiniteGradient) {
  auto m = dense(1, 1);
  Gradients<double> g{{"m.0.weight", Tensor<double>::matrix(1, 1, {std::numeric_limits<double>::infinity()})}};
  EXPECT_THROW(Sgd<double>(0.1).step(m, g), NumericError);
}

TEST(Rng, StreamsAreReproducibleAndDistinct) {
  Rng a(stream_key(7, "x", 1)), b(stream_key(7, "x", 1)), c(stream_key(7, "x", 2));
  const auto va = a.next_u64();
  EXPECT_EQ(va, b.next_u64());
  EXPECT_NE(va, c.next_u64());
}

TEST(Rng, NormalMomentsAreStandard) {
  Rng r(stream_key(1, "moments"));
  const int n = 200000;
  double s = 0, ss = 0;
  for (int i = 0; i < n; ++i) {
    const double x = r.normal();
    s += x;
    ss += x * x;
  }
  EXPECT_NEAR(s / n, 0.0, 0.01);
  EXPECT_NEAR(ss / n, 1.0, 0.02);
}

TEST(Rng, GammaMeanMatchesShape) {
  for (double alpha : {0.1, 0.5, 2.0, 7.5}) {
    Rng r(stream_key(3, "gamma"));
    double s = 0;
    const int n = 100000;
    for (int i = 0; i < n; ++i) s += r.gamma(alpha);
    // standard error sqrt(alpha / n)
    EXPECT_NEAR(s / n, alpha, 5.0 * std::sqrt(alpha / n)) << alpha;
  }
}

TEST(Rng, BelowIsUnbiasedOverSmallRange) {
  Rng r(stream_key(2, "below"));
  std::vector<int> counts(3, 0);
  for (int i = 0; i < 30000; ++i) ++counts[r.below(3)];
  for (int c : counts) EXPECT_NEAR(c, 10000, 400);
}

TEST(Optimizer, SgdSingleStep) {
  auto m = dense(1, 1);
  m.find("m.0.weight")->value[0] = 1.0;
  Sgd<double>(0.01).step(m, {{"m.0.weight", Tensor<double>::matrix(1, 1, {1.0})}});
  EXPECT_DOUBLE_EQ(m.find("m.0.weight")->value[0], 0.99);
}

TEST(Optimizer, SgdOnQuadraticDecaysGeometrically) {
  auto m = dense(1, 1);
  auto& p = m.find("m.0.weight")->value;
  p[0] = 1.0;
  Sgd<double> sgd(0.1);
  for (int i = 0; i < 10; ++i) {
    Tape<double> t;
    const auto w = t.input("m.0.weight", p);
    sgd.step(m, t.backward(scale(t, sum_squares(t, w), 0.5)));
  }
  EXPECT_NEAR(p[0], 0.34868, 1e-5);
  EXPECT_NEAR(p[0], std::pow(0.9, 10), 1e-12);
}

TEST(Optimizer, AdamFirstStepIsLearningRate) {
  for (double g : {1e-3, 0.7, -25.0}) {
    auto m = dense(1, 1);
    auto& w = m.find("m.0.weight")->value;
    const double before = w[0];
    Adam<double> adam;
    adam.step(m, {{"m.0.weight", Tensor<double>::matrix(1, 1, {g})}});
    EXPECT_NEAR(std::abs(w[0] - before), 0.01, 1e-7);
  }
}

TEST(Optimizer, ShapeMismatchThrows) {
  auto m = dense(2, 1);
  EXPECT_THROW(Sgd<double>(0.1).step(m, {{"m.0.weight", Tensor<double>::matrix(1, 1, {1.0})}}), ShapeError);
}

TEST(GradCheck, LinearLossIsExact) {
  auto W = random_tensor(Shape{3, 2}, 5);
  const auto x = random_tensor(Shape{4, 2}, 6);
  const double err = fd_gradcheck(
      {Probe{"W", &W}}, [&](Tape<double>& t) { return sum(t, linear(t, t.constant(x), t.input("W", W), Var{})); },
      1e-3);
  EXPECT_LT(err, 1e-10);
}

TEST(Determinism, ForwardBackwardAndStepsAreBitwiseRepeatable) {
  auto run = [] {
    Module<float> net("net", 4, {layer::Dense{4, 8}, layer::BatchNorm{8}, layer::Relu{}, layer::Dense{8, 2}}, 11);
    Adam<float> adam;
    const auto x = random_tensor<float>(Shape{6, 4}, 1);
    const auto y = random_tensor<float>(Shape{6, 2}, 2);
    for (int i = 0; i < 5; ++i) {
      Tape<float> t;
      adam.step(net, t.backward(mse(t, net.forward(t, t.constant(x), true), t.constant(y))));
    }
    return net.state_hash();
  };
  EXPECT_EQ(run(), run());
}

TEST(BatchNorm, EvalOutputIgnoresBatchComposition) {
  Module<double> m("bn", 3, {layer::Dense{3, 3}, layer::BatchNorm{3}}, 4);
  Tape<double> t;
  m.forward(t, t.constant(random_tensor(Shape{8, 3}, 1)), true);
  const auto a = random_tensor(Shape{1, 3}, 2);
  const auto single = m.infer(a);
  const auto batch = m.infer(concat_rows(a, random_tensor(Shape{5, 3}, 3)));
  for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(single.at(0, j), batch.at(0, j));
}
