#pragma once

// Transformer encoder-decoder: parameter layout, forward passes, teacher
// forcing losses and STLR1 checkpoints.

#include <cmath>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "stlr/adapters.hpp"
#include "stlr/textpipe.hpp"

namespace stlr {

inline std::vector<TensorSpec> model_tensor_specs(const ModelConfig& c) {
  c.validate();
  std::vector<TensorSpec> out;
  const std::size_t V = c.vocab_size, d = c.d_model, f = c.ffn_dim;
  const double sd = 1.0 / std::sqrt(static_cast<double>(d));
  const double sf = 1.0 / std::sqrt(static_cast<double>(f));
  const auto attn = [&](const std::string& pre, ParamGroup g) {
    for (const char* m : {"q", "k", "v", "o"}) {
      out.push_back({pre + ".w" + m, g, d, d, TensorSpec::Init::normal, sd});
      out.push_back({pre + ".b" + m, g, 1, d, TensorSpec::Init::zeros, 0.0});
    }
  };
  const auto ffn = [&](const std::string& pre, ParamGroup g) {
    out.push_back({pre + ".w1", g, d, f, TensorSpec::Init::normal, sd});
    out.push_back({pre + ".b1", g, 1, f, TensorSpec::Init::zeros, 0.0});
    out.push_back({pre + ".w2", g, f, d, TensorSpec::Init::normal, sf});
    out.push_back({pre + ".b2", g, 1, d, TensorSpec::Init::zeros, 0.0});
  };
  {
    const auto G = ParamGroup::encoder;
    out.push_back({"enc.embed", G, V, d, TensorSpec::Init::normal, 1.0});
    for (std::size_t l = 0; l < c.n_enc_layers; ++l) {
      const std::string pre = "enc." + std::to_string(l);
      layers::norm_specs(out, pre + ".ln1", G, d);
      attn(pre + ".attn", G);
      layers::norm_specs(out, pre + ".ln2", G, d);
      ffn(pre + ".ffn", G);
    }
    layers::norm_specs(out, "enc.ln_f", G, d);
  }
  {
    const auto G = ParamGroup::decoder_base;
    out.push_back({"dec.embed", G, V, d, TensorSpec::Init::normal, 1.0});
    for (std::size_t l = 0; l < c.n_dec_layers; ++l) {
      const std::string pre = "dec." + std::to_string(l);
      layers::norm_specs(out, pre + ".ln1", G, d);
      attn(pre + ".self", G);
      layers::norm_specs(out, pre + ".ln2", G, d);
      attn(pre + ".cross", G);
      layers::norm_specs(out, pre + ".ln3", G, d);
      ffn(pre + ".ffn", G);
    }
    layers::norm_specs(out, "dec.ln_f", G, d);
  }
  out.push_back({"lm.w", ParamGroup::lm_head, d, V, TensorSpec::Init::normal, sd});
  out.push_back({"lm.b", ParamGroup::lm_head, 1, V, TensorSpec::Init::zeros, 0.0});
  return out;
}

template <class T = float>
Model<T> init_model(const ModelConfig& config) {
  Model<T> m;
  m.config = config;
  Rng rng(derive_seed(config.seed, 0x5E02));
  materialize(m.params, model_tensor_specs(config), rng);
  return m;
}

// Encoder output for a batch: states are (batch * length) x d.
template <class T>
struct ContextEmbeddings {
  Matrix<T> states;
  std::size_t batch = 0;
  std::size_t length = 0;
  std::vector<std::uint8_t> mask;

  // Picks (and possibly repeats) batch rows.
  ContextEmbeddings select(const std::vector<std::size_t>& rows) const {
    ContextEmbeddings out;
    out.batch = rows.size();
    out.length = length;
    out.states = Matrix<T>(rows.size() * length, states.cols);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const std::size_t r = rows[i];
      if (r >= batch) throw ShapeError("ContextEmbeddings::select: row out of range");
      std::copy_n(states.data.begin() + static_cast<std::ptrdiff_t>(r * length * states.cols), length * states.cols,
                  out.states.data.begin() + static_cast<std::ptrdiff_t>(i * length * states.cols));
      out.mask.insert(out.mask.end(), mask.begin() + static_cast<std::ptrdiff_t>(r * length),
                      mask.begin() + static_cast<std::ptrdiff_t>((r + 1) * length));
    }
    return out;
  }
};

struct NullContext {};
inline constexpr NullContext null_context{};

// Encoder states living in a graph.
struct GraphContext {
  Var states;
  std::size_t batch = 0;
  std::size_t length = 0;
  std::vector<std::uint8_t> mask;
};

namespace detail {

inline void check_ids(const Batch& b, std::size_t vocab) {
  for (int id : b.ids)
    if (id < 0 || static_cast<std::size_t>(id) >= vocab)
      throw DataError("token id " + std::to_string(id) + " out of range for vocabulary of " + std::to_string(vocab));
}

template <class T>
Var maybe_dropout(Graph<T>& g, Var x, double rate, Rng* rng) {
  return rng && rate > 0.0 ? ag::dropout(g, x, rate, rng) : x;
}

template <class T>
Var attention_block(ParamBinder<T>& p, const std::string& pre, Var xq, Var xkv, const ag::AttentionShape& s,
                    const std::vector<std::uint8_t>& key_valid) {
  Graph<T>& g = p.graph();
  Var q = ag::linear(g, xq, p(pre + ".wq"), p(pre + ".bq"));
  Var k = ag::linear(g, xkv, p(pre + ".wk"), p(pre + ".bk"));
  Var v = ag::linear(g, xkv, p(pre + ".wv"), p(pre + ".bv"));
  Var a = ag::attention(g, q, k, v, s, key_valid);
  return ag::linear(g, a, p(pre + ".wo"), p(pre + ".bo"));
}

template <class T>
Var ffn_block(ParamBinder<T>& p, const std::string& pre, Var x) {
  Graph<T>& g = p.graph();
  Var h = ag::gelu(g, ag::linear(g, x, p(pre + ".w1"), p(pre + ".b1")));
  return ag::linear(g, h, p(pre + ".w2"), p(pre + ".b2"));
}

template <class T>
Var embed_with_positions(ParamBinder<T>& p, const Model<T>& m, const std::string& table, const Batch& b,
                         bool couple) {
  if (b.width > m.config.max_positions)
    throw DataError("sequence width " + std::to_string(b.width) + " exceeds max_positions");
  detail::check_ids(b, m.config.vocab_size);
  Graph<T>& g = p.graph();
  Var e = ag::embedding(g, p(table), b.ids);
  if (couple) e = coupling_forward(g, bind_coupling(p), e);
  return ag::add(g, e, g.constant(layers::tiled_positions<T>(b.rows, b.width, m.config.d_model)));
}

inline bool uses_coupling(const std::optional<AdapterConfig>& a) {
  return a && a->variant == AdapterVariant::invertible;
}

}  // namespace detail

template <class T>
GraphContext encoder_graph(ParamBinder<T>& p, const Model<T>& m, const Batch& src, Rng* drop = nullptr) {
  Graph<T>& g = p.graph();
  const auto& c = m.config;
  Var x = detail::maybe_dropout(g, detail::embed_with_positions(p, m, "enc.embed", src, false), c.dropout, drop);
  const ag::AttentionShape s{src.rows, src.width, src.width, c.n_heads, false};
  for (std::size_t l = 0; l < c.n_enc_layers; ++l) {
    const std::string pre = "enc." + std::to_string(l);
    Var h = layers::norm(p, pre + ".ln1", x);
    Var a = detail::attention_block(p, pre + ".attn", h, h, s, src.mask);
    a = apply_site_adapter(p, m, "enc", l, AdapterSite::attn, a, h);
    x = ag::add(g, x, detail::maybe_dropout(g, a, c.dropout, drop));
    h = layers::norm(p, pre + ".ln2", x);
    Var f = detail::ffn_block(p, pre + ".ffn", h);
    f = apply_site_adapter(p, m, "enc", l, AdapterSite::ffn, f, h);
    x = ag::add(g, x, detail::maybe_dropout(g, f, c.dropout, drop));
  }
  return {layers::norm(p, "enc.ln_f", x), src.rows, src.width, src.mask};
}

// Next-token logits, (rows * width) x vocab. ctx == nullptr is the null
// context: cross-attention sublayers contribute nothing.
template <class T>
Var decoder_graph(ParamBinder<T>& p, const Model<T>& m, const GraphContext* ctx, const Batch& prefix,
                  Rng* drop = nullptr) {
  Graph<T>& g = p.graph();
  const auto& c = m.config;
  if (ctx && ctx->batch != prefix.rows) throw ShapeError("decoder: context batch does not match prefix batch");
  const bool couple = detail::uses_coupling(m.adapters);
  Var x = detail::maybe_dropout(g, detail::embed_with_positions(p, m, "dec.embed", prefix, couple), c.dropout, drop);
  const ag::AttentionShape self{prefix.rows, prefix.width, prefix.width, c.n_heads, true};
  for (std::size_t l = 0; l < c.n_dec_layers; ++l) {
    const std::string pre = "dec." + std::to_string(l);
    Var h = layers::norm(p, pre + ".ln1", x);
    Var a = detail::attention_block(p, pre + ".self", h, h, self, prefix.mask);
    a = apply_site_adapter(p, m, "dec", l, AdapterSite::attn, a, h);
    x = ag::add(g, x, detail::maybe_dropout(g, a, c.dropout, drop));
    if (ctx) {
      h = layers::norm(p, pre + ".ln2", x);
      const ag::AttentionShape cross{prefix.rows, prefix.width, ctx->length, c.n_heads, false};
      Var ca = detail::attention_block(p, pre + ".cross", h, ctx->states, cross, ctx->mask);
      x = ag::add(g, x, detail::maybe_dropout(g, ca, c.dropout, drop));
    }
    h = layers::norm(p, pre + ".ln3", x);
    Var f = detail::ffn_block(p, pre + ".ffn", h);
    f = apply_site_adapter(p, m, "dec", l, AdapterSite::ffn, f, h);
    x = ag::add(g, x, detail::maybe_dropout(g, f, c.dropout, drop));
  }
  x = layers::norm(p, "dec.ln_f", x);
  if (couple) x = coupling_inverse(g, bind_coupling(p), x);
  return ag::linear(g, x, p("lm.w"), p("lm.b"));
}

// Teacher forcing split of a BOS...EOS target batch: the decoder reads
// columns [0, W-1) and predicts columns [1, W).
struct ShiftedTarget {
  Batch input;
  std::vector<int> labels;
  std::vector<std::uint8_t> weights;
};

inline ShiftedTarget shift_target(const Batch& target) {
  if (target.width < 2) throw DataError("teacher forcing needs targets of width >= 2");
  ShiftedTarget s;
  const std::size_t w = target.width - 1;
  s.input.rows = target.rows;
  s.input.width = w;
  for (std::size_t r = 0; r < target.rows; ++r) {
    std::size_t len = 0;
    for (std::size_t c = 0; c < w; ++c) {
      const int in = target.at(r, c);
      const int lab = target.at(r, c + 1);
      s.input.ids.push_back(in);
      s.input.mask.push_back(in != kPad);
      if (in != kPad) ++len;
      s.labels.push_back(lab);
      s.weights.push_back(lab != kPad && in != kPad);
    }
    s.input.lengths.push_back(len);
  }
  bool any = false;
  for (auto wt : s.weights) any = any || wt;
  if (!any) throw DataError("teacher forcing target is all padding");
  return s;
}

template <class T>
Var teacher_forcing_graph(ParamBinder<T>& p, const Model<T>& m, const GraphContext* ctx, const Batch& target,
                          Rng* drop = nullptr) {
  const ShiftedTarget s = shift_target(target);
  Var logits = decoder_graph(p, m, ctx, s.input, drop);
  return ag::cross_entropy(p.graph(), logits, s.labels, s.weights);
}

// ---------------------------------------------------------------------------
// Value-level API (no gradients)

template <class T>
ContextEmbeddings<T> encode_context(const Model<T>& m, const Batch& src) {
  Graph<T> g(false);
  ParamBinder<T> p(g, m.params);
  const GraphContext gc = encoder_graph(p, m, src);
  return {g.value(gc.states), gc.batch, gc.length, gc.mask};
}

namespace detail {

template <class T>
std::optional<GraphContext> to_graph(Graph<T>& g, const ContextEmbeddings<T>* ctx) {
  if (!ctx) return std::nullopt;
  return GraphContext{g.constant(ctx->states), ctx->batch, ctx->length, ctx->mask};
}

template <class T>
Matrix<T> softmax_rows(Matrix<T> x) {
  for (std::size_t r = 0; r < x.rows; ++r) {
    auto row = x.row(r);
    T mx = row[0];
    for (T v : row) mx = std::max(mx, v);
    T z = 0;
    for (T& v : row) z += (v = std::exp(v - mx));
    for (T& v : row) v /= z;
  }
  return x;
}

}  // namespace detail

template <class T>
Matrix<T> decoder_logits(const Model<T>& m, const ContextEmbeddings<T>* ctx, const Batch& prefix) {
  Graph<T> g(false);
  ParamBinder<T> p(g, m.params);
  const auto gc = detail::to_graph(g, ctx);
  return g.value(decoder_graph(p, m, gc ? &*gc : nullptr, prefix));
}

// Per-position next-token distributions, (rows * width) x vocab.
template <class T>
Matrix<T> decoder_forward(const Model<T>& m, const ContextEmbeddings<T>& ctx, const Batch& prefix) {
  return detail::softmax_rows(decoder_logits(m, &ctx, prefix));
}

template <class T>
Matrix<T> decoder_forward(const Model<T>& m, NullContext, const Batch& prefix) {
  return detail::softmax_rows(decoder_logits<T>(m, nullptr, prefix));
}

template <class T>
T teacher_forcing_loss(const Model<T>& m, const ContextEmbeddings<T>* ctx, const Batch& target) {
  Graph<T> g(false);
  ParamBinder<T> p(g, m.params);
  const auto gc = detail::to_graph(g, ctx);
  return g.value(teacher_forcing_graph(p, m, gc ? &*gc : nullptr, target)).data[0];
}

template <class T>
T teacher_forcing_loss(const Model<T>& m, const ContextEmbeddings<T>& ctx, const Batch& target) {
  return teacher_forcing_loss(m, &ctx, target);
}

template <class T>
T teacher_forcing_loss(const Model<T>& m, NullContext, const Batch& target) {
  return teacher_forcing_loss<T>(m, nullptr, target);
}

// Story-ending loss straight from a source batch.
template <class T>
T story_loss(const Model<T>& m, const Batch& src, const Batch& target) {
  Graph<T> g(false);
  ParamBinder<T> p(g, m.params);
  const GraphContext gc = encoder_graph(p, m, src);
  return g.value(teacher_forcing_graph(p, m, &gc, target)).data[0];
}

template <class T>
T lm_loss(const Model<T>& m, const Batch& target) {
  return teacher_forcing_loss(m, null_context, target);
}

template <class T>
struct LossAndGrad {
  T loss = 0;
  Gradients<T> grads;
};

// Loss and gradients for the tensors enabled in `mask`. src == nullptr trains
// the decoder as a language model under the null context.
template <class T>
LossAndGrad<T> loss_and_grad(const Model<T>& m, const TrainMask& mask, const Batch* src, const Batch& target,
                             Rng* drop = nullptr) {
  Graph<T> g;
  ParamBinder<T> p(g, m.params, &mask);
  std::optional<GraphContext> gc;
  if (src) gc = encoder_graph(p, m, *src, drop);
  Var loss = teacher_forcing_graph(p, m, gc ? &*gc : nullptr, target, drop);
  g.backward(loss);
  return {g.value(loss).data[0], p.gradients()};
}

// ---------------------------------------------------------------------------
// Checkpoints

inline constexpr const char* kCheckpointFormat = "STLR1";
inline constexpr int kCheckpointVersion = 1;

template <class T>
std::vector<NamedTensor> named_tensors(const Model<T>& m) {
  std::vector<NamedTensor> out;
  for (const auto& t : m.params) out.push_back({t.name, to_string(t.group), matrix_cast<float>(t.value)});
  return out;
}

// Hash of the float32 image of all parameters (what a checkpoint would store).
template <class T>
std::string params_hash(const Model<T>& m) {
  Fnv1a h;
  std::string buf;
  for (const auto& t : m.params) {
    buf.clear();
    for (T v : t.value.data) detail::put_f32_le(buf, static_cast<float>(v));
    h.update(buf);
  }
  return h.hex();
}

template <class T>
void save_checkpoint(const std::string& dir, const Model<T>& m, const Vocabulary* vocab = nullptr) {
  nlohmann::json man;
  man["format"] = kCheckpointFormat;
  man["version"] = kCheckpointVersion;
  man["model_config"] = m.config;
  man["adapter_config"] = m.adapters ? nlohmann::json(*m.adapters) : nlohmann::json(nullptr);
  write_bundle(dir, std::move(man), named_tensors(m));
  if (vocab) vocab->save((std::filesystem::path(dir) / "vocab.json").string());
}

template <class T = float>
Model<T> load_checkpoint(const std::string& dir) {
  const TensorBundle b = read_bundle(dir);
  if (b.manifest.value("format", "") != kCheckpointFormat) throw DataError("'" + dir + "' is not an STLR1 checkpoint");
  if (b.manifest.value("version", 0) != kCheckpointVersion) throw DataError("'" + dir + "': unsupported version");
  Model<T> m;
  try {
    m.config = b.manifest.at("model_config").get<ModelConfig>();
    if (!b.manifest.at("adapter_config").is_null()) m.adapters = b.manifest.at("adapter_config").get<AdapterConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError("'" + dir + "': bad manifest: " + e.what());
  }
  auto specs = model_tensor_specs(m.config);
  if (m.adapters) {
    const auto a = adapter_tensor_specs(m.config, *m.adapters);
    specs.insert(specs.end(), a.begin(), a.end());
  }
  if (specs.size() != b.tensors.size()) throw ShapeError("'" + dir + "': tensor count does not match its config");
  for (std::size_t i = 0; i < specs.size(); ++i) {
    const auto& s = specs[i];
    const auto& t = b.tensors[i];
    if (t.name != s.name || t.value.rows != s.rows || t.value.cols != s.cols || t.group != to_string(s.group))
      throw ShapeError("'" + dir + "': tensor '" + t.name + "' does not match the configured layout");
    m.params.add(s.name, s.group, matrix_cast<T>(t.value));
  }
  return m;
}

inline Vocabulary load_checkpoint_vocab(const std::string& dir) {
  return Vocabulary::load((std::filesystem::path(dir) / "vocab.json").string());
}

}  // namespace stlr
