#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <vector>

#include "graph.hpp"
#include "numeric.hpp"

namespace dipt {

/// Variational model of the seed distribution: q(z|s) and P(s|z) with a
/// standard normal prior on z.
struct VaePrior {
  Mlp encoder;  // |V| -> 64 -> 32 -> 2d, outputs [mu, log sigma^2]
  Mlp decoder;  // d -> 32 -> 64 -> |V|, sigmoid
  std::size_t latent_dim = 8;
  // Mean posterior mean over the training set; set at the end of training.
  std::optional<Vector> z_bar;

  static VaePrior create(std::size_t n_nodes, std::size_t latent_dim, Rng& rng) {
    VaePrior p;
    p.latent_dim = latent_dim;
    p.encoder = make_mlp({n_nodes, 64, 32, 2 * latent_dim},
                         {Activation::tanh, Activation::tanh, Activation::identity}, rng);
    p.decoder = make_mlp({latent_dim, 32, 64, n_nodes},
                         {Activation::tanh, Activation::tanh, Activation::sigmoid}, rng);
    return p;
  }

  std::size_t n_nodes() const { return decoder.out_dim(); }

  std::vector<Param*> params() {
    auto out = encoder.params();
    auto more = decoder.params();
    out.insert(out.end(), more.begin(), more.end());
    return out;
  }
};

// log sigma^2 is clamped to this range before exponentiation.
inline constexpr double kMinLogVar = -30.0;
inline constexpr double kMaxLogVar = 20.0;

struct Posterior {
  Vector mu;
  Vector sigma;
  Vector log_var;  // clamped
};

inline Posterior encode(const VaePrior& prior, const SeedVector& s) {
  if (s.size() != prior.encoder.in_dim()) {
    throw ShapeError("encode: seed vector has " + std::to_string(s.size()) + " entries, encoder expects " +
                     std::to_string(prior.encoder.in_dim()));
  }
  const Vector out = mlp_forward(prior.encoder, s.as_reals());
  const std::size_t d = prior.latent_dim;
  Posterior post;
  post.mu.assign(out.begin(), out.begin() + static_cast<std::ptrdiff_t>(d));
  for (std::size_t k = 0; k < d; ++k) {
    const double lv = std::clamp(out[d + k], kMinLogVar, kMaxLogVar);
    post.log_var.push_back(lv);
    post.sigma.push_back(std::exp(0.5 * lv));
  }
  return post;
}

/// z = mu + sigma * noise.
inline Vector reparameterize(std::span<const double> mu, std::span<const double> sigma, std::span<const double> noise) {
  if (mu.size() != sigma.size() || mu.size() != noise.size()) throw ShapeError("reparameterize: shape mismatch");
  Vector z(mu.size());
  for (std::size_t k = 0; k < z.size(); ++k) z[k] = mu[k] + sigma[k] * noise[k];
  return z;
}

/// Per-node Bernoulli parameters, clamped to [1e-7, 1 - 1e-7].
inline Vector decode(const VaePrior& prior, std::span<const double> z) {
  if (z.size() != prior.latent_dim || prior.decoder.in_dim() != prior.latent_dim) {
    throw ShapeError("decode: latent has " + std::to_string(z.size()) + " entries, expected " +
                     std::to_string(prior.latent_dim));
  }
  Vector p = mlp_forward(prior.decoder, z);
  for (double& x : p) x = clamp_probability(x);
  return p;
}

/// KL(N(mu, diag sigma^2) || N(0, I)).
inline double kl_std_normal(std::span<const double> mu, std::span<const double> sigma) {
  if (mu.size() != sigma.size()) throw ShapeError("kl_std_normal: shape mismatch");
  double kl = 0.0;
  for (std::size_t k = 0; k < mu.size(); ++k) {
    const double var = sigma[k] * sigma[k];
    kl += 0.5 * (mu[k] * mu[k] + var - 1.0 - std::log(var));
  }
  return kl;
}

inline double bernoulli_log_likelihood(std::span<const double> target, std::span<const double> prob) {
  double ll = 0.0;
  for (std::size_t i = 0; i < target.size(); ++i) {
    ll += target[i] * std::log(prob[i]) + (1.0 - target[i]) * std::log(1.0 - prob[i]);
  }
  return ll;
}

struct ElboResult {
  double value = 0.0;
  double reconstruction = 0.0;
  double kl = 0.0;
  Vector grad;  // d(value)/d(prior.params()), flattened
  Vector mu;
};

/// ELBO with a single reparameterised sample using the supplied standard-normal noise.
inline ElboResult elbo(VaePrior& prior, const SeedVector& s, std::span<const double> noise, bool want_grad = true) {
  const std::size_t d = prior.latent_dim;
  if (noise.size() != d) throw ShapeError("elbo: noise must have latent_dim entries");
  if (s.size() != prior.encoder.in_dim()) throw ShapeError("elbo: seed vector size mismatch");
  const Vector target = s.as_reals();

  Tape enc_tape;
  const Tape::Var enc_out = mlp_forward(enc_tape, prior.encoder, enc_tape.leaf(target));
  const Vector& raw = enc_tape.value(enc_out);
  Vector mu(raw.begin(), raw.begin() + static_cast<std::ptrdiff_t>(d));
  Vector log_var(d), sigma(d);
  for (std::size_t k = 0; k < d; ++k) {
    log_var[k] = std::clamp(raw[d + k], kMinLogVar, kMaxLogVar);
    sigma[k] = std::exp(0.5 * log_var[k]);
  }
  const Vector z = reparameterize(mu, sigma, noise);

  Tape dec_tape;
  const Tape::Var z_var = dec_tape.leaf(z);
  const Tape::Var p_raw = mlp_forward(dec_tape, prior.decoder, z_var);
  const Tape::Var p_var = clamp_probability(dec_tape, p_raw);
  const Vector& p = dec_tape.value(p_var);

  ElboResult out;
  out.reconstruction = bernoulli_log_likelihood(target, p);
  out.kl = 0.0;
  for (std::size_t k = 0; k < d; ++k) {
    out.kl += 0.5 * (mu[k] * mu[k] + sigma[k] * sigma[k] - 1.0 - log_var[k]);
  }
  out.value = out.reconstruction - out.kl;
  out.mu = mu;
  if (!want_grad) return out;

  const auto params = prior.params();
  zero_grads(params);
  Vector dp(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) dp[i] = target[i] / p[i] - (1.0 - target[i]) / (1.0 - p[i]);
  dec_tape.backward(p_var, dp);
  const Vector& dz = dec_tape.grad(z_var);

  Vector d_enc(2 * d);
  for (std::size_t k = 0; k < d; ++k) {
    d_enc[k] = dz[k] - mu[k];
    const bool inside = raw[d + k] > kMinLogVar && raw[d + k] < kMaxLogVar;
    d_enc[d + k] = inside ? dz[k] * noise[k] * 0.5 * sigma[k] - 0.5 * (sigma[k] * sigma[k] - 1.0) : 0.0;
  }
  enc_tape.backward(enc_out, d_enc);
  out.grad = flatten_grads(params);
  return out;
}

}  // namespace dipt
