#pragma once

// Adapter variants: tensor layout, injection, graph application, the
// invertible coupling and STLR1-A sidecars.

#include <algorithm>
#include <cmath>
#include <set>
#include <string>
#include <vector>

#include "stlr/layers.hpp"

namespace stlr {

enum class AdapterSite { attn, ffn };

inline const char* to_string(AdapterSite s) { return s == AdapterSite::attn ? "attn" : "ffn"; }

inline void validate_adapter_config(const ModelConfig& mc, const AdapterConfig& ac) {
  const std::size_t d = mc.d_model, b = ac.bottleneck;
  if (b < 1 || b >= d) throw ConfigError("adapter: bottleneck must satisfy 1 <= b < d_model");
  if (!(ac.init_scale >= 0.0)) throw ConfigError("adapter: init_scale must be >= 0");
  if (ac.variant == AdapterVariant::compacter) {
    const std::size_t n = ac.compacter_n;
    if (n == 0 || d % n != 0 || b % n != 0)
      throw ConfigError("adapter: compacter_n must divide both d_model and bottleneck");
  }
  if (ac.variant == AdapterVariant::invertible && d % 2 != 0)
    throw ConfigError("adapter: invertible coupling needs an even d_model");
  std::set<std::size_t> seen;
  for (std::size_t l : ac.layers) {
    if (l >= mc.n_dec_layers) throw ConfigError("adapter: layer index " + std::to_string(l) + " out of range");
    if (!seen.insert(l).second) throw ConfigError("adapter: duplicate layer index " + std::to_string(l));
  }
}

inline std::vector<std::size_t> injected_decoder_layers(const ModelConfig& mc, const AdapterConfig& ac) {
  if (!ac.layers.empty()) {
    auto l = ac.layers;
    std::sort(l.begin(), l.end());
    return l;
  }
  std::vector<std::size_t> all(mc.n_dec_layers);
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  return all;
}

inline bool variant_has_site(AdapterVariant v, AdapterSite s) {
  if (s == AdapterSite::ffn) return true;
  return v == AdapterVariant::houlsby;
}

inline bool variant_has_norm(AdapterVariant v) {
  return v == AdapterVariant::pfeiffer || v == AdapterVariant::invertible;
}

inline std::string adapter_site_prefix(const std::string& stack, std::size_t layer, AdapterSite s) {
  return "adapter." + stack + "." + std::to_string(layer) + "." + to_string(s);
}

namespace detail {

inline void site_specs(std::vector<TensorSpec>& out, const std::string& pre, const ModelConfig& mc,
                       const AdapterConfig& ac) {
  using I = TensorSpec::Init;
  const auto A = ParamGroup::adapter;
  const std::size_t d = mc.d_model, b = ac.bottleneck;
  const double down_std = ac.init_scale / std::sqrt(static_cast<double>(d));
  switch (ac.variant) {
    case AdapterVariant::parallel:
      out.push_back({pre + ".down", A, d, b, I::normal, down_std});
      out.push_back({pre + ".up", A, b, d, I::zeros, 0.0});
      return;
    case AdapterVariant::compacter: {
      const std::size_t n = ac.compacter_n;
      const double f = std::sqrt(down_std / std::sqrt(static_cast<double>(n)));
      out.push_back({pre + ".down_s", A, n, d / n, I::normal, f});
      out.push_back({pre + ".down_t", A, n, b / n, I::normal, f});
      out.push_back({pre + ".down_b", A, 1, b, I::zeros, 0.0});
      out.push_back({pre + ".up_s", A, n, b / n, I::normal, f});
      out.push_back({pre + ".up_t", A, n, d / n, I::zeros, 0.0});
      out.push_back({pre + ".up_b", A, 1, d, I::zeros, 0.0});
      return;
    }
    default:
      if (variant_has_norm(ac.variant)) {
        out.push_back({pre + ".ln_g", A, 1, d, I::ones, 0.0});
        out.push_back({pre + ".ln_b", A, 1, d, I::zeros, 0.0});
      }
      out.push_back({pre + ".down", A, d, b, I::normal, down_std});
      out.push_back({pre + ".down_b", A, 1, b, I::zeros, 0.0});
      out.push_back({pre + ".up", A, b, d, I::zeros, 0.0});
      out.push_back({pre + ".up_b", A, 1, d, I::zeros, 0.0});
  }
}

inline void coupling_net_specs(std::vector<TensorSpec>& out, const std::string& pre, std::size_t half, std::size_t b,
                               double init_scale) {
  using I = TensorSpec::Init;
  const auto A = ParamGroup::adapter;
  out.push_back({pre + ".down", A, half, b, I::normal, init_scale / std::sqrt(static_cast<double>(half))});
  out.push_back({pre + ".down_b", A, 1, b, I::zeros, 0.0});
  out.push_back({pre + ".up", A, b, half, I::zeros, 0.0});
  out.push_back({pre + ".up_b", A, 1, half, I::zeros, 0.0});
}

}  // namespace detail

inline std::vector<TensorSpec> adapter_tensor_specs(const ModelConfig& mc, const AdapterConfig& ac) {
  validate_adapter_config(mc, ac);
  std::vector<TensorSpec> out;
  if (ac.variant == AdapterVariant::compacter) {
    const std::size_t n = ac.compacter_n;
    out.push_back({"adapter.compacter.slow", ParamGroup::adapter, n, n * n, TensorSpec::Init::normal, 1.0});
  }
  if (ac.variant == AdapterVariant::invertible) {
    detail::coupling_net_specs(out, "adapter.inv.f", mc.d_model / 2, ac.bottleneck, ac.init_scale);
    detail::coupling_net_specs(out, "adapter.inv.g", mc.d_model / 2, ac.bottleneck, ac.init_scale);
  }
  const auto add_stack = [&](const std::string& stack, const std::vector<std::size_t>& layers) {
    for (std::size_t l : layers)
      for (AdapterSite s : {AdapterSite::attn, AdapterSite::ffn})
        if (variant_has_site(ac.variant, s)) detail::site_specs(out, adapter_site_prefix(stack, l, s), mc, ac);
  };
  if (ac.inject_encoder) {
    std::vector<std::size_t> enc(mc.n_enc_layers);
    for (std::size_t i = 0; i < enc.size(); ++i) enc[i] = i;
    add_stack("enc", enc);
  }
  add_stack("dec", injected_decoder_layers(mc, ac));
  return out;
}

template <class T>
Model<T> inject_adapters(const Model<T>& base, const AdapterConfig& ac) {
  if (base.adapters || base.params.has_group(ParamGroup::adapter))
    throw ConfigError("inject_adapters: model already carries adapters");
  Model<T> out = base;
  out.adapters = ac;
  Rng rng(derive_seed(base.config.seed, 0xADA97E55ULL));
  materialize(out.params, adapter_tensor_specs(base.config, ac), rng);
  return out;
}

// Base model without any adapter tensors.
template <class T>
Model<T> strip_adapters(const Model<T>& m) {
  Model<T> out;
  out.config = m.config;
  for (const auto& t : m.params)
    if (t.group != ParamGroup::adapter) out.params.add(t.name, t.group, t.value);
  return out;
}

// Adds N(0, stddev) noise to every adapter tensor; used to move adapters off
// their identity initialisation in tests.
template <class T>
void perturb_adapters(Model<T>& m, double stddev, std::uint64_t seed) {
  Rng rng(seed);
  for (std::size_t i = 0; i < m.params.size(); ++i) {
    auto& t = m.params.at(i);
    if (t.group != ParamGroup::adapter) continue;
    for (T& v : t.value.data) v += static_cast<T>(rng.normal() * stddev);
  }
}

// ---------------------------------------------------------------------------
// Graph application

// Weights of one bottleneck site. Absent pieces are invalid Vars.
struct SiteVars {
  Var down, down_b, up, up_b, ln_g, ln_b;
};

struct CouplingVars {
  SiteVars f, g;
};

template <class T>
Var bottleneck_branch(Graph<T>& g, const SiteVars& w, Var h) {
  Var x = w.ln_g.valid() ? ag::layer_norm(g, h, w.ln_g, w.ln_b) : h;
  Var z = ag::matmul(g, x, w.down);
  if (w.down_b.valid()) z = ag::add_bias(g, z, w.down_b);
  z = ag::matmul(g, ag::relu(g, z), w.up);
  if (w.up_b.valid()) z = ag::add_bias(g, z, w.up_b);
  return z;
}

// Sum_i kron(A_i, s_i t_i^T), with A_i the i-th row of slow reshaped n x n.
template <class T>
Var kron_projection(Graph<T>& g, Var slow, Var s, Var t) {
  const std::size_t n = g.value(slow).rows;
  const std::size_t r = g.value(s).cols;
  Var acc;
  for (std::size_t i = 0; i < n; ++i) {
    Var a = ag::reshape(g, ag::slice_rows(g, slow, i, i + 1), n, n);
    Var outer = ag::matmul(g, ag::reshape(g, ag::slice_rows(g, s, i, i + 1), r, 1), ag::slice_rows(g, t, i, i + 1));
    Var k = ag::kron(g, a, outer);
    acc = acc.valid() ? ag::add(g, acc, k) : k;
  }
  return acc;
}

template <class T>
SiteVars bind_site(ParamBinder<T>& p, const std::string& pre, AdapterVariant v) {
  SiteVars w;
  Graph<T>& g = p.graph();
  if (v == AdapterVariant::compacter) {
    Var slow = p("adapter.compacter.slow");
    w.down = kron_projection(g, slow, p(pre + ".down_s"), p(pre + ".down_t"));
    w.up = kron_projection(g, slow, p(pre + ".up_s"), p(pre + ".up_t"));
    w.down_b = p(pre + ".down_b");
    w.up_b = p(pre + ".up_b");
    return w;
  }
  w.down = p(pre + ".down");
  w.up = p(pre + ".up");
  if (v == AdapterVariant::parallel) return w;
  w.down_b = p(pre + ".down_b");
  w.up_b = p(pre + ".up_b");
  if (variant_has_norm(v)) {
    w.ln_g = p(pre + ".ln_g");
    w.ln_b = p(pre + ".ln_b");
  }
  return w;
}

template <class T>
CouplingVars bind_coupling(ParamBinder<T>& p) {
  const auto net = [&](const std::string& pre) {
    return SiteVars{p(pre + ".down"), p(pre + ".down_b"), p(pre + ".up"), p(pre + ".up_b"), {}, {}};
  };
  return {net("adapter.inv.f"), net("adapter.inv.g")};
}

// y1 = x1 + F(x2); y2 = x2 + G(y1)
template <class T>
Var coupling_forward(Graph<T>& g, const CouplingVars& c, Var x) {
  const std::size_t d = g.value(x).cols;
  if (d % 2 != 0) throw ShapeError("coupling: odd width");
  Var x1 = ag::slice_cols(g, x, 0, d / 2);
  Var x2 = ag::slice_cols(g, x, d / 2, d);
  Var y1 = ag::add(g, x1, bottleneck_branch(g, c.f, x2));
  Var y2 = ag::add(g, x2, bottleneck_branch(g, c.g, y1));
  return ag::concat_cols(g, {y1, y2});
}

// x2 = y2 - G(y1); x1 = y1 - F(x2)
template <class T>
Var coupling_inverse(Graph<T>& g, const CouplingVars& c, Var y) {
  const std::size_t d = g.value(y).cols;
  if (d % 2 != 0) throw ShapeError("coupling: odd width");
  Var y1 = ag::slice_cols(g, y, 0, d / 2);
  Var y2 = ag::slice_cols(g, y, d / 2, d);
  Var x2 = ag::add(g, y2, ag::scale(g, bottleneck_branch(g, c.g, y1), T(-1)));
  Var x1 = ag::add(g, y1, ag::scale(g, bottleneck_branch(g, c.f, x2), T(-1)));
  return ag::concat_cols(g, {x1, x2});
}

// Applies the adapter configured for (stack, layer, site) to a sublayer's
// output. sub_in is the sublayer's normalised input, which the parallel
// variant reads instead of the output.
template <class T>
Var apply_site_adapter(ParamBinder<T>& p, const Model<T>& m, const std::string& stack, std::size_t layer,
                       AdapterSite site, Var sub_out, Var sub_in) {
  if (!m.adapters) return sub_out;
  const AdapterConfig& ac = *m.adapters;
  if (!variant_has_site(ac.variant, site)) return sub_out;
  const std::string pre = adapter_site_prefix(stack, layer, site);
  if (!p.has(pre + (ac.variant == AdapterVariant::compacter ? ".down_s" : ".down"))) return sub_out;
  Graph<T>& g = p.graph();
  const SiteVars w = bind_site(p, pre, ac.variant);
  if (ac.variant == AdapterVariant::parallel) return ag::add(g, sub_out, bottleneck_branch(g, w, sub_in));
  return ag::add(g, sub_out, bottleneck_branch(g, w, sub_out));
}

// ---------------------------------------------------------------------------
// Value-level transforms

template <class T>
struct BottleneckWeights {
  Matrix<T> down, down_b, up, up_b, ln_g, ln_b;  // empty = absent
};

template <class T>
struct CouplingWeights {
  BottleneckWeights<T> f, g;
};

namespace detail {

template <class T>
Var opt_const(Graph<T>& g, const Matrix<T>& m) {
  return m.empty() ? Var{} : g.constant(m);
}

template <class T>
SiteVars site_consts(Graph<T>& g, const BottleneckWeights<T>& w) {
  return {g.constant(w.down), opt_const(g, w.down_b), g.constant(w.up), opt_const(g, w.up_b), opt_const(g, w.ln_g),
          opt_const(g, w.ln_b)};
}

}  // namespace detail

// h -> h + U f(D h' + b1) + b2 (h' = LN(h) when norm weights are present). For
// the parallel variant pass the sublayer output as `sublayer` and the
// sublayer input as `hidden`; the result is sublayer + U f(D hidden).
template <class T>
Matrix<T> adapter_transform(AdapterVariant v, const BottleneckWeights<T>& w, const Matrix<T>& hidden,
                            const Matrix<T>* sublayer = nullptr) {
  if (hidden.cols != w.down.rows || w.up.cols != hidden.cols) throw ShapeError("adapter_transform: width mismatch");
  Graph<T> g(false);
  const Var h = g.constant(hidden);
  const SiteVars sv = detail::site_consts(g, w);
  if (v == AdapterVariant::parallel) {
    if (!sublayer || !sublayer->same_shape(hidden)) throw ShapeError("adapter_transform: parallel needs sublayer output");
    return g.value(ag::add(g, g.constant(*sublayer), bottleneck_branch(g, sv, h)));
  }
  return g.value(ag::add(g, h, bottleneck_branch(g, sv, h)));
}

template <class T>
Matrix<T> coupling_forward(const CouplingWeights<T>& w, const Matrix<T>& x) {
  Graph<T> g(false);
  CouplingVars c{detail::site_consts(g, w.f), detail::site_consts(g, w.g)};
  return g.value(coupling_forward(g, c, g.constant(x)));
}

template <class T>
Matrix<T> coupling_inverse(const CouplingWeights<T>& w, const Matrix<T>& y) {
  Graph<T> g(false);
  CouplingVars c{detail::site_consts(g, w.f), detail::site_consts(g, w.g)};
  return g.value(coupling_inverse(g, c, g.constant(y)));
}

template <class T>
Matrix<T> kron_projection(const Matrix<T>& slow, const Matrix<T>& s, const Matrix<T>& t) {
  Graph<T> g(false);
  return g.value(kron_projection(g, g.constant(slow), g.constant(s), g.constant(t)));
}

// Effective weights of one injected site, with compacter projections expanded.
template <class T>
BottleneckWeights<T> site_weights(const Model<T>& m, const std::string& stack, std::size_t layer, AdapterSite site) {
  if (!m.adapters) throw ConfigError("site_weights: model has no adapters");
  const AdapterVariant v = m.adapters->variant;
  const std::string pre = adapter_site_prefix(stack, layer, site);
  const auto& P = m.params;
  BottleneckWeights<T> w;
  if (v == AdapterVariant::compacter) {
    const auto& slow = P.get("adapter.compacter.slow");
    w.down = kron_projection(slow, P.get(pre + ".down_s"), P.get(pre + ".down_t"));
    w.up = kron_projection(slow, P.get(pre + ".up_s"), P.get(pre + ".up_t"));
  } else {
    w.down = P.get(pre + ".down");
    w.up = P.get(pre + ".up");
  }
  if (v != AdapterVariant::parallel) {
    w.down_b = P.get(pre + ".down_b");
    w.up_b = P.get(pre + ".up_b");
  }
  if (variant_has_norm(v)) {
    w.ln_g = P.get(pre + ".ln_g");
    w.ln_b = P.get(pre + ".ln_b");
  }
  return w;
}

template <class T>
CouplingWeights<T> coupling_weights(const Model<T>& m) {
  const auto net = [&](const std::string& pre) {
    BottleneckWeights<T> w;
    w.down = m.params.get(pre + ".down");
    w.down_b = m.params.get(pre + ".down_b");
    w.up = m.params.get(pre + ".up");
    w.up_b = m.params.get(pre + ".up_b");
    return w;
  };
  return {net("adapter.inv.f"), net("adapter.inv.g")};
}

// ---------------------------------------------------------------------------
// STLR1-A sidecars

inline constexpr const char* kSidecarFormat = "STLR1-A";

template <class T>
void save_adapter_sidecar(const std::string& dir, const Model<T>& m) {
  if (!m.adapters) throw ConfigError("save_adapter_sidecar: model has no adapters");
  std::vector<NamedTensor> tensors;
  for (const auto& t : m.params)
    if (t.group == ParamGroup::adapter) tensors.push_back({t.name, to_string(t.group), matrix_cast<float>(t.value)});
  nlohmann::json man;
  man["format"] = kSidecarFormat;
  man["adapter_config"] = *m.adapters;
  man["base"] = {{"vocab_size", m.config.vocab_size},
                 {"d_model", m.config.d_model},
                 {"n_enc_layers", m.config.n_enc_layers},
                 {"n_dec_layers", m.config.n_dec_layers}};
  write_bundle(dir, std::move(man), tensors);
}

inline AdapterConfig read_sidecar_config(const std::string& dir) {
  const auto man = nlohmann::json::parse(detail::read_text_file(std::filesystem::path(dir) / "manifest.json"));
  if (man.value("format", "") != kSidecarFormat) throw DataError("'" + dir + "' is not an STLR1-A adapter sidecar");
  return man.at("adapter_config").get<AdapterConfig>();
}

// Injects the sidecar's adapter layout into `base` and loads its values.
template <class T>
Model<T> attach_adapter_sidecar(const Model<T>& base, const std::string& dir) {
  const TensorBundle b = read_bundle(dir);
  if (b.manifest.value("format", "") != kSidecarFormat)
    throw DataError("'" + dir + "' is not an STLR1-A adapter sidecar");
  const auto& bm = b.manifest.at("base");
  if (bm.at("vocab_size").get<std::size_t>() != base.config.vocab_size ||
      bm.at("d_model").get<std::size_t>() != base.config.d_model ||
      bm.at("n_dec_layers").get<std::size_t>() != base.config.n_dec_layers ||
      bm.at("n_enc_layers").get<std::size_t>() != base.config.n_enc_layers)
    throw ShapeError("adapter sidecar '" + dir + "' does not match the base model's shape");
  Model<T> out = inject_adapters(strip_adapters(base), b.manifest.at("adapter_config").get<AdapterConfig>());
  std::size_t loaded = 0;
  for (std::size_t i = 0; i < out.params.size(); ++i) {
    auto& t = out.params.at(i);
    if (t.group != ParamGroup::adapter) continue;
    const NamedTensor* src = b.find(t.name);
    if (!src || src->value.rows != t.value.rows || src->value.cols != t.value.cols)
      throw ShapeError("adapter sidecar '" + dir + "': tensor '" + t.name + "' missing or misshaped");
    t.value = matrix_cast<T>(src->value);
    ++loaded;
  }
  if (loaded != b.tensors.size()) throw ShapeError("adapter sidecar '" + dir + "' has unexpected tensors");
  return out;
}

// Copies adapter values from `src` into `dst`; both must share the layout.
template <class T>
void copy_adapter_values(Model<T>& dst, const Model<T>& src) {
  for (std::size_t i = 0; i < dst.params.size(); ++i) {
    auto& t = dst.params.at(i);
    if (t.group != ParamGroup::adapter) continue;
    const auto j = src.params.find(t.name);
    if (!j || !src.params.at(*j).value.same_shape(t.value))
      throw ShapeError("adapter tensor '" + t.name + "' missing or misshaped in source");
    t.value = src.params.at(*j).value;
  }
}

}  // namespace stlr
