#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "errors.hpp"
#include "rng.hpp"

namespace dipt {

using Vector = std::vector<double>;

/// Probabilities that enter a logarithm are kept inside [kProbFloor, 1 - kProbFloor].
inline constexpr double kProbFloor = 1e-7;

inline double clamp_probability(double p) { return std::clamp(p, kProbFloor, 1.0 - kProbFloor); }

// -----------------------------------------------------------------------------
// DenseMatrix
// -----------------------------------------------------------------------------

class DenseMatrix {
 public:
  DenseMatrix() = default;
  DenseMatrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  static DenseMatrix from_rows(const std::vector<Vector>& rows) {
    if (rows.empty()) return {};
    DenseMatrix m(rows.size(), rows.front().size());
    for (std::size_t r = 0; r < rows.size(); ++r) {
      if (rows[r].size() != m.cols_) throw ShapeError("DenseMatrix::from_rows: ragged rows");
      std::copy(rows[r].begin(), rows[r].end(), m.data_.begin() + static_cast<std::ptrdiff_t>(r * m.cols_));
    }
    return m;
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double x) { return std::isfinite(x); });
  }

  friend bool operator==(const DenseMatrix&, const DenseMatrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  Vector data_;
};

// -----------------------------------------------------------------------------
// Activations
// -----------------------------------------------------------------------------

enum class Activation { identity, tanh, relu, sigmoid };

inline double sigmoid(double x) {
  if (x >= 0.0) {
    const double e = std::exp(-x);
    return 1.0 / (1.0 + e);
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline double apply_activation(Activation a, double x) {
  switch (a) {
    case Activation::identity: return x;
    case Activation::tanh: return std::tanh(x);
    case Activation::relu: return x > 0.0 ? x : 0.0;
    case Activation::sigmoid: return sigmoid(x);
  }
  return x;
}

// Derivative expressed through the pre-activation x and the output y.
inline double activation_derivative(Activation a, double x, double y) {
  switch (a) {
    case Activation::identity: return 1.0;
    case Activation::tanh: return 1.0 - y * y;
    case Activation::relu: return x > 0.0 ? 1.0 : 0.0;
    case Activation::sigmoid: return y * (1.0 - y);
  }
  return 1.0;
}

inline std::string to_string(Activation a) {
  switch (a) {
    case Activation::identity: return "identity";
    case Activation::tanh: return "tanh";
    case Activation::relu: return "relu";
    case Activation::sigmoid: return "sigmoid";
  }
  return "identity";
}

inline Activation activation_from_string(const std::string& s) {
  if (s == "identity") return Activation::identity;
  if (s == "tanh") return Activation::tanh;
  if (s == "relu") return Activation::relu;
  if (s == "sigmoid") return Activation::sigmoid;
  throw ParseError("unknown activation '" + s + "'");
}

// -----------------------------------------------------------------------------
// Parameters and MLPs
// -----------------------------------------------------------------------------

/// A trainable tensor together with its gradient accumulator.
struct Param {
  DenseMatrix value;
  DenseMatrix grad;

  Param() = default;
  explicit Param(DenseMatrix v) : value(std::move(v)), grad(value.rows(), value.cols()) {}

  void zero_grad() { grad.fill(0.0); }
};

struct Layer {
  Param weight;  // out x in
  Param bias;    // out x 1
  Activation activation = Activation::identity;

  std::size_t in_dim() const { return weight.value.cols(); }
  std::size_t out_dim() const { return weight.value.rows(); }
};

struct Mlp {
  std::vector<Layer> layers;

  std::size_t in_dim() const { return layers.empty() ? 0 : layers.front().in_dim(); }
  std::size_t out_dim() const { return layers.empty() ? 0 : layers.back().out_dim(); }

  std::vector<Param*> params() {
    std::vector<Param*> out;
    for (auto& l : layers) {
      out.push_back(&l.weight);
      out.push_back(&l.bias);
    }
    return out;
  }
};

/// Glorot-uniform weights, zero biases. dims = {in, h1, ..., out}; one activation per layer.
inline Mlp make_mlp(const std::vector<std::size_t>& dims, const std::vector<Activation>& activations, Rng& rng) {
  if (dims.size() < 2 || activations.size() != dims.size() - 1) {
    throw ShapeError("make_mlp: need one activation per layer");
  }
  Mlp mlp;
  for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
    const std::size_t in = dims[l];
    const std::size_t out = dims[l + 1];
    const double bound = std::sqrt(6.0 / static_cast<double>(in + out));
    DenseMatrix w(out, in);
    for (double& x : w.data()) x = rng.uniform(-bound, bound);
    Layer layer;
    layer.weight = Param(std::move(w));
    layer.bias = Param(DenseMatrix(out, 1));
    layer.activation = activations[l];
    mlp.layers.push_back(std::move(layer));
  }
  return mlp;
}

inline void check_mlp_chain(const Mlp& mlp) {
  for (std::size_t l = 0; l < mlp.layers.size(); ++l) {
    const Layer& layer = mlp.layers[l];
    if (layer.bias.value.rows() != layer.out_dim() || layer.bias.value.cols() != 1) {
      throw ShapeError("mlp layer " + std::to_string(l) + ": bias shape mismatch");
    }
    if (l > 0 && mlp.layers[l - 1].out_dim() != layer.in_dim()) {
      throw ShapeError("mlp layer " + std::to_string(l) + ": input dimension does not chain");
    }
  }
}

// -----------------------------------------------------------------------------
// Untracked evaluation
// -----------------------------------------------------------------------------

inline Vector layer_forward(const Layer& layer, std::span<const double> x) {
  if (x.size() != layer.in_dim()) {
    throw ShapeError("layer_forward: expected input of size " + std::to_string(layer.in_dim()) + ", got " +
                     std::to_string(x.size()));
  }
  Vector y(layer.out_dim());
  for (std::size_t r = 0; r < y.size(); ++r) {
    const auto w = layer.weight.value.row(r);
    double acc = layer.bias.value(r, 0);
    for (std::size_t c = 0; c < x.size(); ++c) acc += w[c] * x[c];
    y[r] = apply_activation(layer.activation, acc);
  }
  return y;
}

inline Vector mlp_forward(const Mlp& mlp, std::span<const double> input) {
  if (mlp.layers.empty()) throw ShapeError("mlp_forward: empty network");
  Vector x(input.begin(), input.end());
  for (const auto& layer : mlp.layers) x = layer_forward(layer, x);
  return x;
}

inline Vector softmax(std::span<const double> logits) {
  Vector w(logits.begin(), logits.end());
  if (w.empty()) return w;
  const double mx = *std::max_element(w.begin(), w.end());
  double total = 0.0;
  for (double& x : w) {
    x = std::exp(x - mx);
    total += x;
  }
  for (double& x : w) x /= total;
  return w;
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("dot: size mismatch");
  return std::inner_product(a.begin(), a.end(), b.begin(), 0.0);
}

/// Softmax weights of q against each key, with logits scaled by 1/sqrt(scale_dim).
inline Vector attention_weights(std::span<const double> query, const std::vector<Vector>& keys, std::size_t scale_dim) {
  if (scale_dim == 0) throw ShapeError("attention: scale_dim must be positive");
  const double scale = 1.0 / std::sqrt(static_cast<double>(scale_dim));
  Vector logits(keys.size());
  for (std::size_t k = 0; k < keys.size(); ++k) {
    if (keys[k].size() != query.size()) throw ShapeError("attention: query/key dimension mismatch");
    logits[k] = dot(query, keys[k]) * scale;
  }
  return softmax(logits);
}

inline Vector attention_fuse(std::span<const double> query, const std::vector<Vector>& keys,
                             const std::vector<Vector>& values, std::size_t scale_dim) {
  if (keys.empty() || keys.size() != values.size()) throw ShapeError("attention: need one value per key");
  const Vector w = attention_weights(query, keys, scale_dim);
  Vector out(values.front().size(), 0.0);
  for (std::size_t k = 0; k < values.size(); ++k) {
    if (values[k].size() != out.size()) throw ShapeError("attention: value dimension mismatch");
    for (std::size_t d = 0; d < out.size(); ++d) out[d] += w[k] * values[k][d];
  }
  return out;
}

// -----------------------------------------------------------------------------
// Reverse-mode tape over layer-level primitives
// -----------------------------------------------------------------------------

class Tape {
 public:
  using Var = std::size_t;
  using BackwardFn = std::function<void(Tape&, Var)>;

  /// A node that receives gradient but propagates nothing further (inputs, constants).
  Var leaf(Vector value) { return record(std::move(value), nullptr); }

  Var record(Vector value, BackwardFn backward) {
    nodes_.push_back(Node{std::move(value), {}, std::move(backward)});
    return nodes_.size() - 1;
  }

  const Vector& value(Var v) const { return nodes_.at(v).value; }
  const Vector& grad(Var v) const { return nodes_.at(v).grad; }
  Vector& grad_mut(Var v) { return nodes_[v].grad; }

  std::size_t size() const { return nodes_.size(); }
  bool empty() const { return nodes_.empty(); }

  /// Seeds d(out)/d(output) and replays the recorded closures in reverse order.
  /// Parameter gradients accumulate into Param::grad; leaf gradients are readable via grad().
  void backward(Var output, std::span<const double> output_grad) {
    if (nodes_.empty()) throw UsageError("backward: empty tape");
    if (output >= nodes_.size()) throw UsageError("backward: output is not on this tape");
    if (output_grad.size() != nodes_[output].value.size()) {
      throw ShapeError("backward: output_grad has size " + std::to_string(output_grad.size()) + ", output has " +
                       std::to_string(nodes_[output].value.size()));
    }
    for (auto& n : nodes_) n.grad.assign(n.value.size(), 0.0);
    std::copy(output_grad.begin(), output_grad.end(), nodes_[output].grad.begin());
    for (std::size_t i = output + 1; i-- > 0;) {
      if (nodes_[i].backward) nodes_[i].backward(*this, i);
    }
  }

 private:
  struct Node {
    Vector value;
    Vector grad;
    BackwardFn backward;
  };
  std::vector<Node> nodes_;
};

inline void backward(Tape& tape, Tape::Var output, std::span<const double> output_grad) {
  tape.backward(output, output_grad);
}

/// y = act(W x + b); gradients flow into x and into the layer's Param::grad.
inline Tape::Var layer_forward(Tape& tape, Layer& layer, Tape::Var x) {
  const Vector& xv = tape.value(x);
  if (xv.size() != layer.in_dim()) {
    throw ShapeError("layer_forward: expected input of size " + std::to_string(layer.in_dim()) + ", got " +
                     std::to_string(xv.size()));
  }
  const std::size_t out = layer.out_dim();
  Vector pre(out);
  Vector y(out);
  for (std::size_t r = 0; r < out; ++r) {
    const auto w = layer.weight.value.row(r);
    double acc = layer.bias.value(r, 0);
    for (std::size_t c = 0; c < xv.size(); ++c) acc += w[c] * xv[c];
    pre[r] = acc;
    y[r] = apply_activation(layer.activation, acc);
  }
  Layer* lp = &layer;
  return tape.record(std::move(y), [lp, x, pre = std::move(pre)](Tape& t, Tape::Var self) {
    const Vector& gy = t.grad(self);
    const Vector& yv = t.value(self);
    const Vector& xin = t.value(x);
    Vector& gx = t.grad_mut(x);
    const std::size_t in = xin.size();
    for (std::size_t r = 0; r < gy.size(); ++r) {
      const double g = gy[r] * activation_derivative(lp->activation, pre[r], yv[r]);
      if (g == 0.0) continue;
      lp->bias.grad(r, 0) += g;
      auto wg = lp->weight.grad.row(r);
      const auto w = lp->weight.value.row(r);
      for (std::size_t c = 0; c < in; ++c) {
        wg[c] += g * xin[c];
        gx[c] += g * w[c];
      }
    }
  });
}

inline Tape::Var mlp_forward(Tape& tape, Mlp& mlp, Tape::Var x) {
  if (mlp.layers.empty()) throw ShapeError("mlp_forward: empty network");
  for (auto& layer : mlp.layers) x = layer_forward(tape, layer, x);
  return x;
}

inline Tape::Var concat(Tape& tape, Tape::Var a, Tape::Var b) {
  Vector out = tape.value(a);
  const Vector& bv = tape.value(b);
  const std::size_t na = out.size();
  out.insert(out.end(), bv.begin(), bv.end());
  return tape.record(std::move(out), [a, b, na](Tape& t, Tape::Var self) {
    const Vector& g = t.grad(self);
    Vector& ga = t.grad_mut(a);
    Vector& gb = t.grad_mut(b);
    for (std::size_t i = 0; i < na; ++i) ga[i] += g[i];
    for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[na + i];
  });
}

/// Gathers scalar nodes into one vector node.
inline Tape::Var stack(Tape& tape, const std::vector<Tape::Var>& scalars) {
  Vector out(scalars.size());
  for (std::size_t i = 0; i < scalars.size(); ++i) {
    const Vector& v = tape.value(scalars[i]);
    if (v.size() != 1) throw ShapeError("stack: expected scalar nodes");
    out[i] = v[0];
  }
  return tape.record(std::move(out), [scalars](Tape& t, Tape::Var self) {
    const Vector g = t.grad(self);
    for (std::size_t i = 0; i < scalars.size(); ++i) t.grad_mut(scalars[i])[0] += g[i];
  });
}

/// Elementwise clamp into [kProbFloor, 1 - kProbFloor]; clamped entries pass no gradient.
inline Tape::Var clamp_probability(Tape& tape, Tape::Var x) {
  Vector out = tape.value(x);
  for (double& p : out) p = clamp_probability(p);
  return tape.record(std::move(out), [x](Tape& t, Tape::Var self) {
    const Vector& in = t.value(x);
    const Vector& g = t.grad(self);
    Vector& gx = t.grad_mut(x);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (in[i] > kProbFloor && in[i] < 1.0 - kProbFloor) gx[i] += g[i];
    }
  });
}

inline Tape::Var attention_fuse(Tape& tape, Tape::Var query, const std::vector<Tape::Var>& keys,
                                const std::vector<Tape::Var>& values, std::size_t scale_dim) {
  if (keys.empty() || keys.size() != values.size()) throw ShapeError("attention: need one value per key");
  std::vector<Vector> kv;
  std::vector<Vector> vv;
  for (auto k : keys) kv.push_back(tape.value(k));
  for (auto v : values) vv.push_back(tape.value(v));
  Vector w = attention_weights(tape.value(query), kv, scale_dim);
  Vector out = attention_fuse(tape.value(query), kv, vv, scale_dim);
  const double scale = 1.0 / std::sqrt(static_cast<double>(scale_dim));
  return tape.record(std::move(out), [query, keys, values, w = std::move(w), scale](Tape& t, Tape::Var self) {
    const Vector g = t.grad(self);
    const std::size_t n = keys.size();
    Vector dw(n);
    for (std::size_t k = 0; k < n; ++k) {
      const Vector& v = t.value(values[k]);
      Vector& gv = t.grad_mut(values[k]);
      double acc = 0.0;
      for (std::size_t d = 0; d < g.size(); ++d) {
        gv[d] += w[k] * g[d];
        acc += g[d] * v[d];
      }
      dw[k] = acc;
    }
    double mean = 0.0;
    for (std::size_t k = 0; k < n; ++k) mean += w[k] * dw[k];
    const Vector q = t.value(query);
    for (std::size_t k = 0; k < n; ++k) {
      const double dlogit = w[k] * (dw[k] - mean) * scale;
      if (dlogit == 0.0) continue;
      const Vector key = t.value(keys[k]);
      Vector& gq = t.grad_mut(query);
      for (std::size_t d = 0; d < q.size(); ++d) gq[d] += dlogit * key[d];
      Vector& gk = t.grad_mut(keys[k]);
      for (std::size_t d = 0; d < q.size(); ++d) gk[d] += dlogit * q[d];
    }
  });
}

// -----------------------------------------------------------------------------
// Flat parameter views
// -----------------------------------------------------------------------------

inline std::size_t parameter_count(std::span<Param* const> params) {
  std::size_t n = 0;
  for (const Param* p : params) n += p->value.size();
  return n;
}

inline Vector flatten_values(std::span<Param* const> params) {
  Vector out;
  out.reserve(parameter_count(params));
  for (const Param* p : params) out.insert(out.end(), p->value.data().begin(), p->value.data().end());
  return out;
}

inline Vector flatten_grads(std::span<Param* const> params) {
  Vector out;
  out.reserve(parameter_count(params));
  for (const Param* p : params) out.insert(out.end(), p->grad.data().begin(), p->grad.data().end());
  return out;
}

inline void assign_values(std::span<Param* const> params, std::span<const double> flat) {
  if (flat.size() != parameter_count(params)) throw ShapeError("assign_values: size mismatch");
  std::size_t off = 0;
  for (Param* p : params) {
    auto dst = p->value.data();
    std::copy(flat.begin() + static_cast<std::ptrdiff_t>(off),
              flat.begin() + static_cast<std::ptrdiff_t>(off + dst.size()), dst.begin());
    off += dst.size();
  }
}

inline void zero_grads(std::span<Param* const> params) {
  for (Param* p : params) p->zero_grad();
}

// -----------------------------------------------------------------------------
// Adam
// -----------------------------------------------------------------------------

struct AdamState {
  std::size_t step = 0;
  Vector m;
  Vector v;
  double lr = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

inline AdamState make_adam(std::size_t n_params, double lr) {
  AdamState s;
  s.m.assign(n_params, 0.0);
  s.v.assign(n_params, 0.0);
  s.lr = lr;
  return s;
}

/// Bias-corrected Adam update in place.
inline void adam_step(AdamState& state, std::span<double> params, std::span<const double> grads) {
  if (params.size() != grads.size()) throw ShapeError("adam_step: params/grads size mismatch");
  if (state.m.empty() && state.v.empty() && state.step == 0) {
    state.m.assign(params.size(), 0.0);
    state.v.assign(params.size(), 0.0);
  }
  if (state.m.size() != params.size() || state.v.size() != params.size()) {
    throw ShapeError("adam_step: moment vectors do not match parameter count");
  }
  if (!(state.beta1 >= 0.0 && state.beta1 < 1.0 && state.beta2 >= 0.0 && state.beta2 < 1.0)) {
    throw UsageError("adam_step: betas must lie in [0, 1)");
  }
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (!std::isfinite(grads[i])) {
      throw NumericError("adam_step: non-finite gradient at index " + std::to_string(i));
    }
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * grads[i];
    state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * grads[i] * grads[i];
    const double mhat = state.m[i] / c1;
    const double vhat = state.v[i] / c2;
    params[i] -= state.lr * mhat / (std::sqrt(vhat) + state.eps);
  }
}

// -----------------------------------------------------------------------------
// Finite-difference gradient check
// -----------------------------------------------------------------------------

/// Returns the loss at theta; writes the analytic gradient when grad is non-null.
using LossFn = std::function<double(std::span<const double> theta, Vector* grad)>;

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t n_params = 0;
  // Same measure restricted to coordinates whose absolute mismatch exceeds the
  // central-difference roundoff bound 8 * eps * max(1, |loss|) / perturbation.
  double max_rel_error_above_noise = 0.0;
  double noise_floor = 0.0;
};

/// Central differences against the analytic gradient. The relative error of each
/// coordinate is |a - fd| / max(|a|, |fd|, 1e-8); the maximum is reported.
inline GradCheckResult gradient_check(const LossFn& loss_fn, std::span<const double> theta, double perturbation = 1e-5) {
  Vector analytic;
  const double base = loss_fn(theta, &analytic);
  if (!std::isfinite(base)) throw NumericError("gradient_check: non-finite loss");
  if (analytic.size() != theta.size()) throw ShapeError("gradient_check: gradient size mismatch");
  GradCheckResult result;
  result.n_params = theta.size();
  result.noise_floor = 8.0 * std::numeric_limits<double>::epsilon() * std::max(1.0, std::abs(base)) / perturbation;
  Vector work(theta.begin(), theta.end());
  for (std::size_t i = 0; i < work.size(); ++i) {
    const double orig = work[i];
    work[i] = orig + perturbation;
    const double up = loss_fn(work, nullptr);
    work[i] = orig - perturbation;
    const double down = loss_fn(work, nullptr);
    work[i] = orig;
    if (!std::isfinite(up) || !std::isfinite(down)) {
      throw NumericError("gradient_check: non-finite loss at index " + std::to_string(i));
    }
    const double fd = (up - down) / (2.0 * perturbation);
    const double denom = std::max({std::abs(analytic[i]), std::abs(fd), 1e-8});
    const double err = std::abs(analytic[i] - fd) / denom;
    if (std::abs(analytic[i] - fd) > result.noise_floor) {
      result.max_rel_error_above_noise = std::max(result.max_rel_error_above_noise, err);
    }
    if (err > result.max_rel_error) {
      result.max_rel_error = err;
      result.worst_index = i;
      result.analytic = analytic[i];
      result.numeric = fd;
    }
  }
  return result;
}

}  // namespace dipt
