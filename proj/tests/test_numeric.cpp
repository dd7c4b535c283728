#include <gtest/gtest.h>

#include <cmath>

#include "dipt/numeric.hpp"

using namespace dipt;

namespace {

Layer make_layer(DenseMatrix w, Vector b, Activation a) {
  Layer l;
  DenseMatrix bias(b.size(), 1);
  std::copy(b.begin(), b.end(), bias.data().begin());
  l.weight = Param(std::move(w));
  l.bias = Param(std::move(bias));
  l.activation = a;
  return l;
}

}  // namespace

TEST(MlpForward, ZeroNetworkGivesZeros) {
  Rng rng(1);
  Mlp mlp = make_mlp({2, 4, 3}, {Activation::tanh, Activation::tanh}, rng);
  for (auto* p : mlp.params()) p->value.fill(0.0);
  const Vector out = mlp_forward(mlp, Vector{1.0, -1.0});
  ASSERT_EQ(out.size(), 3u);
  for (double x : out) EXPECT_EQ(x, 0.0);
}

TEST(MlpForward, IdentityLayer) {
  Mlp mlp;
  mlp.layers.push_back(make_layer(DenseMatrix::from_rows({{1, 0}, {0, 1}}), {0, 0}, Activation::identity));
  const Vector out = mlp_forward(mlp, Vector{0.3, 0.7});
  EXPECT_DOUBLE_EQ(out[0], 0.3);
  EXPECT_DOUBLE_EQ(out[1], 0.7);
}

TEST(MlpForward, ScalarSigmoid) {
  Mlp mlp;
  mlp.layers.push_back(make_layer(DenseMatrix::from_rows({{2.0}}), {0.5}, Activation::sigmoid));
  const Vector out = mlp_forward(mlp, Vector{1.0});
  EXPECT_NEAR(out[0], 1.0 / (1.0 + std::exp(-2.5)), 1e-15);
  EXPECT_NEAR(out[0], 0.9241, 1e-4);
}

TEST(MlpForward, DimensionMismatchThrows) {
  Rng rng(2);
  Mlp mlp = make_mlp({3, 2}, {Activation::relu}, rng);
  EXPECT_THROW(mlp_forward(mlp, Vector{1.0, 2.0}), ShapeError);
}

TEST(MlpForward, ZeroFinalLayerReturnsActivationOfBias) {
  Rng rng(3);
  Mlp mlp = make_mlp({4, 5, 2}, {Activation::tanh, Activation::sigmoid}, rng);
  mlp.layers.back().weight.value.fill(0.0);
  mlp.layers.back().bias.value(0, 0) = 0.3;
  mlp.layers.back().bias.value(1, 0) = -1.2;
  for (int trial = 0; trial < 5; ++trial) {
    Vector x(4);
    for (double& v : x) v = rng.normal();
    const Vector out = mlp_forward(mlp, x);
    EXPECT_DOUBLE_EQ(out[0], sigmoid(0.3));
    EXPECT_DOUBLE_EQ(out[1], sigmoid(-1.2));
  }
}

TEST(MlpInit, GlorotBoundsAndZeroBias) {
  Rng rng(4);
  Mlp mlp = make_mlp({10, 6}, {Activation::tanh}, rng);
  const double bound = std::sqrt(6.0 / 16.0);
  for (double w : mlp.layers[0].weight.value.data()) EXPECT_LE(std::abs(w), bound);
  for (double b : mlp.layers[0].bias.value.data()) EXPECT_EQ(b, 0.0);
}

TEST(Attention, SingleKeyReturnsValue) {
  const Vector out = attention_fuse(Vector{0.4, -2.0}, {{3.0, 1.0}}, {{7.0, -1.0, 2.0}}, 2);
  EXPECT_DOUBLE_EQ(out[0], 7.0);
  EXPECT_DOUBLE_EQ(out[1], -1.0);
  EXPECT_DOUBLE_EQ(out[2], 2.0);
}

TEST(Attention, OrthogonalQueryAveragesValues) {
  const Vector out = attention_fuse(Vector{0.0, 1.0}, {{2.0, 0.0}, {-2.0, 0.0}}, {{1.0}, {3.0}}, 2);
  EXPECT_DOUBLE_EQ(out[0], 2.0);
}

TEST(Attention, SharpSoftmax) {
  const Vector w = attention_weights(Vector{1.0, 0.0}, {{10.0, 0.0}, {-10.0, 0.0}}, 2);
  const double expected = 1.0 / (1.0 + std::exp(-20.0 / std::sqrt(2.0)));
  EXPECT_NEAR(w[0], expected, 1e-15);
  EXPECT_NEAR(w[0], 0.99999, 1e-5);
  const Vector out = attention_fuse(Vector{1.0, 0.0}, {{10.0, 0.0}, {-10.0, 0.0}}, {{1.0}, {0.0}}, 2);
  EXPECT_NEAR(out[0], expected, 1e-15);
}

TEST(Attention, WeightsAreADistribution) {
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    Vector q(3);
    std::vector<Vector> keys(4, Vector(3));
    for (double& x : q) x = 20.0 * rng.normal();
    for (auto& k : keys) {
      for (double& x : k) x = 20.0 * rng.normal();
    }
    const Vector w = attention_weights(q, keys, 3);
    double total = 0.0;
    for (double x : w) {
      EXPECT_GE(x, 0.0);
      total += x;
    }
    EXPECT_NEAR(total, 1.0, 1e-12);
  }
}

TEST(Attention, ShapeErrors) {
  EXPECT_THROW(attention_weights(Vector{1.0}, {{1.0, 2.0}}, 1), ShapeError);
  EXPECT_THROW(attention_weights(Vector{1.0}, {{1.0}}, 0), ShapeError);
}

TEST(Tape, IdentityDerivative) {
  Tape tape;
  const auto x = tape.leaf({2.5});
  tape.backward(x, Vector{1.0});
  EXPECT_EQ(tape.grad(x)[0], 1.0);
}

TEST(Tape, SigmoidDerivativeAtZero) {
  Tape tape;
  Layer layer = make_layer(DenseMatrix::from_rows({{1.0}}), {0.0}, Activation::sigmoid);
  const auto x = tape.leaf({0.0});
  const auto y = layer_forward(tape, layer, x);
  tape.backward(y, Vector{1.0});
  EXPECT_DOUBLE_EQ(tape.grad(x)[0], 0.25);
}

TEST(Tape, EmptyTapeIsUsageError) {
  Tape tape;
  EXPECT_THROW(tape.backward(0, Vector{1.0}), UsageError);
}

TEST(Tape, OutputGradShapeMismatch) {
  Tape tape;
  const auto x = tape.leaf({1.0, 2.0});
  EXPECT_THROW(tape.backward(x, Vector{1.0}), ShapeError);
}

TEST(Tape, TwoLayerMlpMatchesFiniteDifferences) {
  for (Activation act : {Activation::tanh, Activation::sigmoid, Activation::identity}) {
    Rng rng(11);
    Mlp mlp = make_mlp({3, 5, 2}, {act, Activation::sigmoid}, rng);
    for (auto* p : mlp.params()) {
      for (double& b : p->value.data()) b += 0.1 * rng.normal();
    }
    const Vector x{0.3, -0.8, 1.1};
    const Vector w{0.7, -1.3};
    auto params = mlp.params();
    const Vector theta0 = flatten_values(params);
    LossFn fn = [&](std::span<const double> theta, Vector* grad) {
      assign_values(params, theta);
      Tape tape;
      const auto in = tape.leaf(x);
      const auto out = mlp_forward(tape, mlp, in);
      const Vector& y = tape.value(out);
      const double loss = w[0] * y[0] + w[1] * y[1];
      if (grad) {
        zero_grads(params);
        tape.backward(out, w);
        *grad = flatten_grads(params);
      }
      return loss;
    };
    const auto r = gradient_check(fn, theta0);
    EXPECT_LE(r.max_rel_error, 1e-4) << to_string(act);
  }
}

TEST(Tape, ConcatStackAndAttentionGradients) {
  Rng rng(12);
  Vector theta0(8);
  for (double& x : theta0) x = rng.normal();
  LossFn fn = [&](std::span<const double> theta, Vector* grad) {
    Tape tape;
    const auto q = tape.leaf(Vector(theta.begin(), theta.begin() + 2));
    const auto k1 = tape.leaf(Vector(theta.begin() + 2, theta.begin() + 4));
    const auto k2 = tape.leaf(Vector(theta.begin() + 4, theta.begin() + 6));
    const auto v = tape.leaf(Vector(theta.begin() + 6, theta.begin() + 8));
    const auto fused = attention_fuse(tape, q, {k1, k2}, {k1, v}, 2);
    const auto cat = concat(tape, fused, q);
    const Vector seed{1.0, -2.0, 0.5, 0.25};
    double loss = 0.0;
    for (std::size_t i = 0; i < seed.size(); ++i) loss += seed[i] * tape.value(cat)[i];
    if (grad) {
      tape.backward(cat, seed);
      grad->clear();
      for (auto var : {q, k1, k2, v}) grad->insert(grad->end(), tape.grad(var).begin(), tape.grad(var).end());
    }
    return loss;
  };
  EXPECT_LE(gradient_check(fn, theta0).max_rel_error, 1e-4);
}

TEST(Adam, ZeroGradientLeavesParams) {
  AdamState s = make_adam(3, 0.01);
  Vector theta{1.0, -2.0, 3.0};
  adam_step(s, theta, Vector{0.0, 0.0, 0.0});
  EXPECT_EQ(theta, (Vector{1.0, -2.0, 3.0}));
  EXPECT_EQ(s.step, 1u);
}

TEST(Adam, FirstStepBiasCorrection) {
  AdamState s = make_adam(1, 0.001);
  Vector theta{0.0};
  adam_step(s, theta, Vector{1.0});
  EXPECT_NEAR(theta[0], -0.001 / (1.0 + 1e-8), 1e-15);
}

TEST(Adam, ElementwiseEqualsBatched) {
  Rng rng(13);
  AdamState a = make_adam(1, 0.01), b = make_adam(1, 0.01), both = make_adam(2, 0.01);
  Vector ta{0.5}, tb{-0.5}, tboth{0.5, -0.5};
  for (int k = 0; k < 20; ++k) {
    const double ga = rng.normal(), gb = rng.normal();
    adam_step(a, ta, Vector{ga});
    adam_step(b, tb, Vector{gb});
    adam_step(both, tboth, Vector{ga, gb});
  }
  EXPECT_EQ(ta[0], tboth[0]);
  EXPECT_EQ(tb[0], tboth[1]);
}

TEST(Adam, NanGradientNamesIndex) {
  AdamState s = make_adam(3, 0.01);
  Vector theta{0.0, 0.0, 0.0};
  try {
    adam_step(s, theta, Vector{0.0, 0.0, std::nan("")});
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("index 2"), std::string::npos);
  }
}

TEST(Adam, ShapeMismatch) {
  AdamState s = make_adam(2, 0.01);
  Vector theta{0.0, 0.0, 0.0};
  EXPECT_THROW(adam_step(s, theta, Vector{0.0, 0.0}), ShapeError);
  EXPECT_THROW(adam_step(s, theta, Vector{0.0, 0.0, 0.0}), ShapeError);
}

TEST(GradientCheck, QuadraticIsExact) {
  LossFn fn = [](std::span<const double> t, Vector* g) {
    if (g) *g = {t[0]};
    return 0.5 * t[0] * t[0];
  };
  EXPECT_LE(gradient_check(fn, Vector{3.0}).max_rel_error, 1e-8);
}

TEST(GradientCheck, DetectsWrongSign) {
  LossFn fn = [](std::span<const double> t, Vector* g) {
    if (g) *g = {-t[0]};
    return 0.5 * t[0] * t[0];
  };
  const auto r = gradient_check(fn, Vector{3.0});
  EXPECT_GT(r.max_rel_error, 1.0);
  EXPECT_GT(r.max_rel_error_above_noise, 1.0);
}

TEST(GradientCheck, RoundoffOnTinyGradientIsBelowNoiseFloor) {
  // Large constant offset plus a gradient of 1e-8: the finite difference is all roundoff.
  LossFn fn = [](std::span<const double> t, Vector* g) {
    if (g) *g = {1e-8};
    return 1000.0 + 1e-8 * t[0];
  };
  const auto r = gradient_check(fn, Vector{0.3});
  EXPECT_LT(std::abs(r.analytic - r.numeric), r.noise_floor);
  EXPECT_EQ(r.max_rel_error_above_noise, 0.0);
}

TEST(GradientCheck, NonFiniteLossThrows) {
  LossFn fn = [](std::span<const double>, Vector* g) {
    if (g) *g = {0.0};
    return std::nan("");
  };
  EXPECT_THROW(gradient_check(fn, Vector{1.0}), NumericError);
}
