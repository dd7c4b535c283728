#include <gtest/gtest.h>

#include <cmath>

#include "helpers.hpp"

using namespace dipt;
using namespace dipt::testing;

namespace {

VaePrior make_prior(std::size_t n, std::size_t d, std::uint64_t seed) {
  Rng rng(seed);
  return VaePrior::create(n, d, rng);
}

void zero_all(Mlp& mlp) {
  for (auto* p : mlp.params()) p->value.fill(0.0);
}

}  // namespace

TEST(Encode, ZeroEncoderGivesStandardPosterior) {
  VaePrior prior = make_prior(5, 8, 1);
  zero_all(prior.encoder);
  const auto post = encode(prior, SeedVector::from_nodes(5, {1, 3}));
  ASSERT_EQ(post.mu.size(), 8u);
  ASSERT_EQ(post.sigma.size(), 8u);
  for (std::size_t k = 0; k < 8; ++k) {
    EXPECT_EQ(post.mu[k], 0.0);
    EXPECT_EQ(post.sigma[k], 1.0);
  }
}

TEST(Encode, DeterministicAndShapeChecked) {
  const VaePrior prior = make_prior(6, 8, 2);
  const auto s = SeedVector::from_nodes(6, {0, 5});
  const auto a = encode(prior, s);
  const auto b = encode(prior, s);
  EXPECT_EQ(a.mu, b.mu);
  EXPECT_EQ(a.sigma, b.sigma);
  EXPECT_THROW(encode(prior, SeedVector(4)), ShapeError);
}

TEST(Reparameterize, Cases) {
  const Vector mu{0.5, -1.0}, sigma{2.0, 0.1}, zero{0.0, 0.0};
  EXPECT_EQ(reparameterize(mu, sigma, zero), mu);
  const Vector n{0.3, -0.7};
  EXPECT_EQ(reparameterize(zero, Vector{1.0, 1.0}, n), n);
  const double tiny = std::exp(0.5 * kMinLogVar);
  const Vector z = reparameterize(mu, Vector{tiny, tiny}, n);
  EXPECT_NEAR(z[0], mu[0], 1e-6);
  EXPECT_NEAR(z[1], mu[1], 1e-6);
  EXPECT_THROW(reparameterize(mu, Vector{1.0}, n), ShapeError);
}

TEST(Encode, LogVarianceIsClamped) {
  VaePrior prior = make_prior(3, 2, 3);
  zero_all(prior.encoder);
  prior.encoder.layers.back().bias.value(2, 0) = -500.0;
  prior.encoder.layers.back().bias.value(3, 0) = 500.0;
  const auto post = encode(prior, SeedVector(3));
  EXPECT_EQ(post.log_var[0], kMinLogVar);
  EXPECT_EQ(post.log_var[1], kMaxLogVar);
  EXPECT_GT(post.sigma[0], 0.0);
  EXPECT_TRUE(std::isfinite(post.sigma[1]));
}

TEST(Decode, ZeroDecoderGivesHalf) {
  VaePrior prior = make_prior(7, 8, 4);
  zero_all(prior.decoder);
  const Vector p = decode(prior, Vector(8, 0.3));
  ASSERT_EQ(p.size(), 7u);
  for (double x : p) EXPECT_EQ(x, 0.5);
}

TEST(Decode, DeterministicClampedAndShapeChecked) {
  VaePrior prior = make_prior(4, 3, 5);
  prior.decoder.layers.back().bias.value.fill(100.0);
  const Vector z{0.1, 0.2, 0.3};
  const Vector p = decode(prior, z);
  EXPECT_EQ(p, decode(prior, z));
  for (double x : p) EXPECT_EQ(x, 1.0 - 1e-7);
  EXPECT_THROW(decode(prior, Vector{0.1}), ShapeError);
}

TEST(KlStdNormal, ClosedForms) {
  EXPECT_EQ(kl_std_normal(Vector{0.0, 0.0}, Vector{1.0, 1.0}), 0.0);
  EXPECT_DOUBLE_EQ(kl_std_normal(Vector{1.0}, Vector{1.0}), 0.5);
  EXPECT_NEAR(kl_std_normal(Vector{0.0}, Vector{2.0}), 0.5 * (4.0 - 1.0 - std::log(4.0)), 1e-15);
  EXPECT_NEAR(kl_std_normal(Vector{0.0}, Vector{2.0}), 0.8069, 1e-4);
}

TEST(KlStdNormal, NonnegativeEverywhere) {
  Rng rng(6);
  for (int k = 0; k < 1000; ++k) {
    const Vector mu{5.0 * rng.normal()};
    const Vector sigma{std::exp(3.0 * rng.normal())};
    EXPECT_GE(kl_std_normal(mu, sigma), 0.0);
  }
}

TEST(Elbo, ZeroNetworksTwoNodes) {
  VaePrior prior = make_prior(2, 8, 7);
  zero_all(prior.encoder);
  zero_all(prior.decoder);
  const auto r = elbo(prior, SeedVector::from_nodes(2, {0}), Vector(8, 0.4));
  EXPECT_NEAR(r.reconstruction, 2.0 * std::log(0.5), 1e-15);
  EXPECT_EQ(r.kl, 0.0);
  EXPECT_NEAR(r.value, -1.3863, 1e-4);
}

TEST(Elbo, NearPerfectDecoderAndStandardPosteriorApproachesZero) {
  VaePrior prior = make_prior(3, 2, 8);
  zero_all(prior.encoder);
  zero_all(prior.decoder);
  const auto s = SeedVector::from_nodes(3, {0, 2});
  auto& bias = prior.decoder.layers.back().bias.value;
  bias(0, 0) = 40.0;
  bias(1, 0) = -40.0;
  bias(2, 0) = 40.0;
  const auto r = elbo(prior, s, Vector{0.5, -0.5});
  EXPECT_LE(r.value, 0.0);
  EXPECT_GT(r.value, -1e-6);
}

TEST(Elbo, GradientMatchesFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    VaePrior prior = make_prior(6, 3, 50 + seed);
    Rng rng(60 + seed);
    Vector noise(3);
    for (double& x : noise) x = rng.normal();
    const auto s = SeedVector::from_nodes(6, {seed % 6, (seed + 2) % 6});
    auto params = prior.params();
    const Vector theta0 = flatten_values(params);
    LossFn fn = [&](std::span<const double> theta, Vector* grad) {
      assign_values(params, theta);
      const auto r = elbo(prior, s, noise, grad != nullptr);
      if (grad) *grad = r.grad;
      return r.value;
    };
    const auto res = gradient_check(fn, theta0);
    EXPECT_LE(res.max_rel_error_above_noise, 1e-4) << "seed " << seed << " index " << res.worst_index;
  }
}

TEST(Elbo, NoiseShapeChecked) {
  VaePrior prior = make_prior(3, 2, 9);
  EXPECT_THROW(elbo(prior, SeedVector(3), Vector{0.0}), ShapeError);
}
