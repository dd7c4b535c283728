#pragma once

#include <filesystem>
#include <sstream>
#include <string>
#include <vector>

#include "errors.hpp"
#include "numeric.hpp"
#include "text_io.hpp"
#include "training.hpp"

// Checkpoint text format:
//
//   dipt-checkpoint 1
//   influence learned|cosine
//   nodes N features F latent D
//   mean_seed_count X
//   z_bar none | z_bar v1 .. vD
//   mlp <name> layers L          (influence.encoder, influence.scorer, prior.encoder, prior.decoder)
//   layer OUT IN activation
//   <OUT weight rows of IN values>
//   bias <OUT values>
//   adam step S params P lr beta1 beta2 eps
//   m <P values>
//   v <P values>
//
// Doubles are written in shortest round-trip form, so save/load is exact.

namespace dipt {

namespace detail {

inline void write_values(std::ostringstream& os, const char* tag, std::span<const double> v) {
  os << tag;
  for (double x : v) os << ' ' << text::format_double(x);
  os << '\n';
}

inline void write_mlp(std::ostringstream& os, const std::string& name, const Mlp& mlp) {
  os << "mlp " << name << " layers " << mlp.layers.size() << '\n';
  for (const Layer& layer : mlp.layers) {
    os << "layer " << layer.out_dim() << ' ' << layer.in_dim() << ' ' << to_string(layer.activation) << '\n';
    for (std::size_t r = 0; r < layer.out_dim(); ++r) {
      const auto row = layer.weight.value.row(r);
      for (std::size_t c = 0; c < row.size(); ++c) os << (c ? " " : "") << text::format_double(row[c]);
      os << '\n';
    }
    write_values(os, "bias", layer.bias.value.data());
  }
}

inline Vector read_values(text::LineReader& in, const std::vector<std::string_view>& t, std::size_t first,
                          std::size_t expected, const char* what) {
  if (t.size() != first + expected) {
    in.fail(std::string(what) + ": expected " + std::to_string(expected) + " values, got " +
            std::to_string(t.size() - first));
  }
  Vector v(expected);
  for (std::size_t k = 0; k < expected; ++k) v[k] = in.to_double(t[first + k]);
  return v;
}

inline Mlp read_mlp(text::LineReader& in, const std::string& name) {
  auto t = in.expect("mlp header");
  if (t.size() != 4 || t[0] != "mlp" || t[1] != name || t[2] != "layers") in.fail("expected 'mlp " + name + " layers L'");
  const std::size_t n_layers = in.to_count(t[3]);
  Mlp mlp;
  for (std::size_t l = 0; l < n_layers; ++l) {
    t = in.expect("layer header");
    if (t.size() != 4 || t[0] != "layer") in.fail("expected 'layer OUT IN activation'");
    const std::size_t out = in.to_count(t[1]);
    const std::size_t inn = in.to_count(t[2]);
    Layer layer;
    try {
      layer.activation = activation_from_string(std::string(t[3]));
    } catch (const Error& e) {
      in.fail(e.what());
    }
    DenseMatrix w(out, inn);
    for (std::size_t r = 0; r < out; ++r) {
      t = in.expect("weight row");
      const Vector row = read_values(in, t, 0, inn, "weight row");
      std::copy(row.begin(), row.end(), w.row(r).begin());
    }
    t = in.expect("bias");
    if (t[0] != "bias") in.fail("expected 'bias'");
    const Vector b = read_values(in, t, 1, out, "bias");
    DenseMatrix bias(out, 1);
    std::copy(b.begin(), b.end(), bias.data().begin());
    layer.weight = Param(std::move(w));
    layer.bias = Param(std::move(bias));
    mlp.layers.push_back(std::move(layer));
  }
  try {
    check_mlp_chain(mlp);
  } catch (const Error& e) {
    in.fail(name + ": " + e.what());
  }
  return mlp;
}

}  // namespace detail

inline std::string format_checkpoint(const ModelState& models) {
  std::ostringstream os;
  os << "dipt-checkpoint 1\n";
  os << "influence " << to_string(models.influence) << '\n';
  os << "nodes " << models.prior.n_nodes() << " features " << models.net.feature_dim() << " latent "
     << models.prior.latent_dim << '\n';
  os << "mean_seed_count " << text::format_double(models.mean_seed_count) << '\n';
  if (models.prior.z_bar) {
    detail::write_values(os, "z_bar", *models.prior.z_bar);
  } else {
    os << "z_bar none\n";
  }
  detail::write_mlp(os, "influence.encoder", models.net.encoder);
  detail::write_mlp(os, "influence.scorer", models.net.scorer);
  detail::write_mlp(os, "prior.encoder", models.prior.encoder);
  detail::write_mlp(os, "prior.decoder", models.prior.decoder);
  const AdamState& a = models.adam;
  os << "adam step " << a.step << " params " << a.m.size() << ' ' << text::format_double(a.lr) << ' '
     << text::format_double(a.beta1) << ' ' << text::format_double(a.beta2) << ' ' << text::format_double(a.eps)
     << '\n';
  detail::write_values(os, "m", a.m);
  detail::write_values(os, "v", a.v);
  return os.str();
}

inline ModelState parse_checkpoint(std::istream& stream, const std::string& source) {
  text::LineReader in(stream, source);
  auto t = in.expect("header");
  if (t.size() != 2 || t[0] != "dipt-checkpoint" || t[1] != "1") in.fail("expected header 'dipt-checkpoint 1'");

  ModelState m;
  t = in.expect("influence");
  if (t.size() != 2 || t[0] != "influence") in.fail("expected 'influence learned|cosine'");
  if (t[1] == "learned") m.influence = InfluenceKind::learned;
  else if (t[1] == "cosine") m.influence = InfluenceKind::cosine;
  else in.fail("unknown influence kind '" + std::string(t[1]) + "'");

  t = in.expect("dimensions");
  if (t.size() != 6 || t[0] != "nodes" || t[2] != "features" || t[4] != "latent") {
    in.fail("expected 'nodes N features F latent D'");
  }
  const std::size_t n = in.to_count(t[1]);
  const std::size_t f = in.to_count(t[3]);
  const std::size_t d = in.to_count(t[5]);
  m.prior.latent_dim = d;

  t = in.expect("mean_seed_count");
  if (t.size() != 2 || t[0] != "mean_seed_count") in.fail("expected 'mean_seed_count X'");
  m.mean_seed_count = in.to_double(t[1]);

  t = in.expect("z_bar");
  if (t[0] != "z_bar") in.fail("expected 'z_bar'");
  if (!(t.size() == 2 && t[1] == "none")) m.prior.z_bar = detail::read_values(in, t, 1, d, "z_bar");

  m.net.encoder = detail::read_mlp(in, "influence.encoder");
  m.net.scorer = detail::read_mlp(in, "influence.scorer");
  m.prior.encoder = detail::read_mlp(in, "prior.encoder");
  m.prior.decoder = detail::read_mlp(in, "prior.decoder");
  if (m.net.feature_dim() != f) in.fail("influence encoder input does not match 'features'");
  if (m.prior.encoder.in_dim() != n || m.prior.decoder.out_dim() != n) in.fail("prior dimensions do not match 'nodes'");
  if (m.prior.encoder.out_dim() != 2 * d || m.prior.decoder.in_dim() != d) in.fail("prior dimensions do not match 'latent'");

  t = in.expect("adam");
  if (t.size() != 9 || t[0] != "adam" || t[1] != "step" || t[3] != "params") {
    in.fail("expected 'adam step S params P lr beta1 beta2 eps'");
  }
  AdamState& a = m.adam;
  a.step = in.to_count(t[2]);
  const std::size_t p = in.to_count(t[4]);
  a.lr = in.to_double(t[5]);
  a.beta1 = in.to_double(t[6]);
  a.beta2 = in.to_double(t[7]);
  a.eps = in.to_double(t[8]);
  if (p != parameter_count(m.params())) in.fail("adam state size does not match the parameter count");
  t = in.expect("m");
  if (t[0] != "m") in.fail("expected 'm'");
  a.m = detail::read_values(in, t, 1, p, "m");
  t = in.expect("v");
  if (t[0] != "v") in.fail("expected 'v'");
  a.v = detail::read_values(in, t, 1, p, "v");
  return m;
}

inline void save_checkpoint(const std::filesystem::path& path, const ModelState& models) {
  text::write_atomic(path, format_checkpoint(models));
}

inline ModelState load_checkpoint(const std::filesystem::path& path) {
  auto in = text::open_input(path);
  return parse_checkpoint(in, path.string());
}

}  // namespace dipt
