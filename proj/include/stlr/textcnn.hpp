#pragma once

// Convolutional text classifier (windows 2/3/4, max-pool, linear head) used
// by the style discriminator and every judge.

#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "stlr/layers.hpp"
#include "stlr/optim.hpp"
#include "stlr/textpipe.hpp"

namespace stlr {

struct TextCNNConfig {
  std::size_t vocab_size = 0;
  std::size_t embed_dim = 16;
  std::size_t filters = 16;  // per window
  std::vector<std::size_t> windows{2, 3, 4};
  std::size_t n_classes = 1;  // 1 = binary with a sigmoid output
  std::size_t max_len = 96;
  std::uint64_t seed = 1;

  void validate() const {
    if (vocab_size < 2 || embed_dim == 0 || filters == 0 || windows.empty() || max_len == 0)
      throw ConfigError("textcnn: vocab_size, embed_dim, filters, windows and max_len must be positive");
    for (auto w : windows)
      if (w == 0) throw ConfigError("textcnn: window sizes must be >= 1");
    if (n_classes == 0) throw ConfigError("textcnn: n_classes must be >= 1");
  }
  std::size_t feature_dim() const { return filters * windows.size(); }
  bool operator==(const TextCNNConfig&) const = default;
};

inline void to_json(nlohmann::json& j, const TextCNNConfig& c) {
  j = {{"vocab_size", c.vocab_size}, {"embed_dim", c.embed_dim}, {"filters", c.filters}, {"windows", c.windows},
       {"n_classes", c.n_classes},   {"max_len", c.max_len},     {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, TextCNNConfig& c) {
  c.vocab_size = j.at("vocab_size").get<std::size_t>();
  c.embed_dim = j.at("embed_dim").get<std::size_t>();
  c.filters = j.at("filters").get<std::size_t>();
  c.windows = j.at("windows").get<std::vector<std::size_t>>();
  c.n_classes = j.at("n_classes").get<std::size_t>();
  c.max_len = j.at("max_len").get<std::size_t>();
  c.seed = j.at("seed").get<std::uint64_t>();
}

template <class T>
struct TextCNN {
  TextCNNConfig config;
  ParamStore<T> params;
};

inline std::vector<TensorSpec> textcnn_specs(const TextCNNConfig& c) {
  c.validate();
  std::vector<TensorSpec> out;
  const auto G = ParamGroup::encoder;
  out.push_back({"cnn.embed", G, c.vocab_size, c.embed_dim, TensorSpec::Init::normal, 1.0});
  for (auto w : c.windows)
    layers::dense_specs(out, "cnn.conv" + std::to_string(w), G, w * c.embed_dim, c.filters,
                        1.0 / std::sqrt(static_cast<double>(w * c.embed_dim)));
  // zero head: label-swapped training then mirrors exactly
  out.push_back({"cnn.head.w", G, c.feature_dim(), c.n_classes, TensorSpec::Init::zeros, 0.0});
  out.push_back({"cnn.head.b", G, 1, c.n_classes, TensorSpec::Init::zeros, 0.0});
  return out;
}

template <class T = float>
TextCNN<T> init_textcnn(const TextCNNConfig& c) {
  TextCNN<T> m;
  m.config = c;
  Rng rng(derive_seed(c.seed, 0xC22));
  materialize(m.params, textcnn_specs(c), rng);
  return m;
}

template <class To, class From>
TextCNN<To> textcnn_cast(const TextCNN<From>& m) {
  TextCNN<To> out;
  out.config = m.config;
  for (const auto& t : m.params) out.params.add(t.name, t.group, matrix_cast<To>(t.value));
  return out;
}

// Sequences laid out as consecutive rows.
struct SeqLayout {
  std::vector<int> ids;
  std::vector<std::size_t> offsets;
  std::vector<std::size_t> lengths;
};

inline SeqLayout layout_sequences(const std::vector<std::vector<int>>& seqs, std::size_t max_len) {
  SeqLayout l;
  for (const auto& s : seqs) {
    if (s.empty()) throw DataError("classifier input sequence is empty");
    const std::size_t n = std::min(s.size(), max_len);
    l.offsets.push_back(l.ids.size());
    l.lengths.push_back(n);
    l.ids.insert(l.ids.end(), s.begin(), s.begin() + static_cast<std::ptrdiff_t>(n));
  }
  return l;
}

namespace detail {

template <class T>
Var cnn_features(ParamBinder<T>& p, const TextCNNConfig& c, Var x, const std::vector<std::size_t>& offsets,
                 const std::vector<std::size_t>& lengths) {
  std::vector<Var> parts;
  for (auto w : c.windows) {
    const std::string pre = "cnn.conv" + std::to_string(w);
    parts.push_back(ag::conv_maxpool(p.graph(), x, offsets, lengths, w, p(pre + ".w"), p(pre + ".b")));
  }
  return parts.size() == 1 ? parts.front() : ag::concat_cols(p.graph(), parts);
}

template <class T>
Var cnn_logits(ParamBinder<T>& p, const TextCNNConfig& c, Var x, const std::vector<std::size_t>& offsets,
               const std::vector<std::size_t>& lengths) {
  return ag::linear(p.graph(), cnn_features(p, c, x, offsets, lengths), p("cnn.head.w"), p("cnn.head.b"));
}

template <class T>
void check_ids(const TextCNN<T>& m, const SeqLayout& l) {
  for (int id : l.ids)
    if (id < 0 || static_cast<std::size_t>(id) >= m.config.vocab_size)
      throw DataError("classifier token id " + std::to_string(id) + " out of range");
}

}  // namespace detail

// Logits (n x n_classes), evaluated in chunks.
template <class T>
Matrix<T> textcnn_logits(const TextCNN<T>& m, const std::vector<std::vector<int>>& seqs, std::size_t chunk = 256) {
  Matrix<T> out(seqs.size(), m.config.n_classes);
  for (std::size_t lo = 0; lo < seqs.size(); lo += chunk) {
    const std::size_t hi = std::min(seqs.size(), lo + chunk);
    const SeqLayout l = layout_sequences({seqs.begin() + static_cast<std::ptrdiff_t>(lo),
                                          seqs.begin() + static_cast<std::ptrdiff_t>(hi)},
                                         m.config.max_len);
    detail::check_ids(m, l);
    Graph<T> g(false);
    ParamBinder<T> p(g, m.params);
    const Matrix<T>& z = g.value(detail::cnn_logits(p, m.config, ag::embedding(g, p("cnn.embed"), l.ids), l.offsets, l.lengths));
    std::copy(z.data.begin(), z.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(lo * m.config.n_classes));
  }
  return out;
}

// Pooled convolutional features (n x feature_dim).
template <class T>
Matrix<T> textcnn_features(const TextCNN<T>& m, const std::vector<std::vector<int>>& seqs) {
  const SeqLayout l = layout_sequences(seqs, m.config.max_len);
  detail::check_ids(m, l);
  Graph<T> g(false);
  ParamBinder<T> p(g, m.params);
  return g.value(detail::cnn_features(p, m.config, ag::embedding(g, p("cnn.embed"), l.ids), l.offsets, l.lengths));
}

inline double sigmoid(double z) { return z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z)); }

// Positive-class probabilities of a binary classifier.
template <class T>
std::vector<double> binary_probs(const TextCNN<T>& m, const std::vector<std::vector<int>>& seqs) {
  if (m.config.n_classes != 1) throw ConfigError("binary_probs needs a binary classifier");
  const Matrix<T> z = textcnn_logits(m, seqs);
  std::vector<double> out;
  for (T v : z.data) out.push_back(sigmoid(static_cast<double>(v)));
  return out;
}

template <class T>
std::vector<int> predict_classes(const TextCNN<T>& m, const std::vector<std::vector<int>>& seqs) {
  const Matrix<T> z = textcnn_logits(m, seqs);
  std::vector<int> out;
  for (std::size_t r = 0; r < z.rows; ++r) {
    if (m.config.n_classes == 1) {
      out.push_back(z(r, 0) > T(0) ? 1 : 0);
      continue;
    }
    std::size_t best = 0;
    for (std::size_t c = 1; c < z.cols; ++c)
      if (z(r, c) > z(r, best)) best = c;
    out.push_back(static_cast<int>(best));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training

struct LabeledSeq {
  std::vector<int> ids;
  int label = 0;
};

struct ClassifierTrainConfig {
  std::size_t epochs = 8;
  std::size_t batch_size = 32;
  double lr = 2e-3;
  double holdout = 0.2;
  std::uint64_t seed = 1;

  void validate() const {
    if (epochs == 0 || batch_size == 0) throw ConfigError("classifier: epochs and batch_size must be >= 1");
    if (!(lr > 0.0)) throw ConfigError("classifier: lr must be > 0");
    if (holdout < 0.0 || holdout >= 1.0) throw ConfigError("classifier: holdout must be in [0,1)");
  }
  bool operator==(const ClassifierTrainConfig&) const = default;
};

inline void to_json(nlohmann::json& j, const ClassifierTrainConfig& c) {
  j = {{"epochs", c.epochs}, {"batch_size", c.batch_size}, {"lr", c.lr}, {"holdout", c.holdout}, {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, ClassifierTrainConfig& c) {
  c.epochs = j.at("epochs").get<std::size_t>();
  c.batch_size = j.at("batch_size").get<std::size_t>();
  c.lr = j.at("lr").get<double>();
  c.holdout = j.at("holdout").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
}

struct ClassifierMetrics {
  double train_accuracy = 0.0;
  double heldout_accuracy = 0.0;  // NaN when there is no held-out part
  std::size_t n_train = 0;
  std::size_t n_heldout = 0;
};

inline void to_json(nlohmann::json& j, const ClassifierMetrics& m) {
  j = {{"train_accuracy", m.train_accuracy},
       {"heldout_accuracy", std::isnan(m.heldout_accuracy) ? nlohmann::json(nullptr) : nlohmann::json(m.heldout_accuracy)},
       {"n_train", m.n_train},
       {"n_heldout", m.n_heldout}};
}

template <class T>
double accuracy(const TextCNN<T>& m, const std::vector<LabeledSeq>& data) {
  if (data.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::vector<std::vector<int>> seqs;
  for (const auto& d : data) seqs.push_back(d.ids);
  const auto pred = predict_classes(m, seqs);
  std::size_t ok = 0;
  for (std::size_t i = 0; i < data.size(); ++i) ok += pred[i] == data[i].label;
  return static_cast<double>(ok) / static_cast<double>(data.size());
}

// Held-out rows are chosen from a seeded permutation of indices, independent
// of labels.
inline std::pair<std::vector<LabeledSeq>, std::vector<LabeledSeq>> holdout_split(const std::vector<LabeledSeq>& data,
                                                                                 double holdout, std::uint64_t seed) {
  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(derive_seed(seed, 0x401D));
  rng.shuffle(order.begin(), order.end());
  const auto n_hold = static_cast<std::size_t>(std::floor(holdout * static_cast<double>(data.size())));
  std::pair<std::vector<LabeledSeq>, std::vector<LabeledSeq>> out;
  for (std::size_t i = 0; i < order.size(); ++i) (i < n_hold ? out.second : out.first).push_back(data[order[i]]);
  return out;
}

template <class T>
ClassifierMetrics train_textcnn(TextCNN<T>& m, const std::vector<LabeledSeq>& data, const ClassifierTrainConfig& tc) {
  tc.validate();
  if (data.empty()) throw DataError("classifier: no training data");
  const std::size_t C = m.config.n_classes;
  for (const auto& d : data)
    if (d.label < 0 || static_cast<std::size_t>(d.label) >= std::max<std::size_t>(C, 2))
      throw DataError("classifier: label " + std::to_string(d.label) + " out of range");
  auto [train, held] = holdout_split(data, tc.holdout, tc.seed);
  if (train.empty()) throw DataError("classifier: held-out fraction leaves no training data");
  TrainMask mask;
  mask.trainable.assign(m.params.size(), true);
  AdamConfig ac;
  ac.lr = tc.lr;
  Adam<T> opt(m.params, ac);
  for (std::size_t ep = 0; ep < tc.epochs; ++ep) {
    std::vector<std::size_t> order(train.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(derive_seed(tc.seed, 0xE90C0000ULL + ep));
    rng.shuffle(order.begin(), order.end());
    for (std::size_t lo = 0; lo < order.size(); lo += tc.batch_size) {
      std::vector<std::vector<int>> seqs;
      std::vector<int> labels;
      for (std::size_t i = lo; i < std::min(order.size(), lo + tc.batch_size); ++i) {
        seqs.push_back(train[order[i]].ids);
        labels.push_back(train[order[i]].label);
      }
      const SeqLayout l = layout_sequences(seqs, m.config.max_len);
      detail::check_ids(m, l);
      Graph<T> g;
      ParamBinder<T> p(g, m.params, &mask);
      Var z = detail::cnn_logits(p, m.config, ag::embedding(g, p("cnn.embed"), l.ids), l.offsets, l.lengths);
      Var loss = C == 1 ? ag::bce_with_logits(g, z, labels)
                        : ag::cross_entropy(g, z, labels, std::vector<std::uint8_t>(labels.size(), 1));
      g.backward(loss);
      if (!std::isfinite(static_cast<double>(g.value(loss).data[0])))
        throw NumericError("classifier training loss is not finite");
      opt.step(m.params, p.gradients(), mask);
    }
  }
  return {accuracy(m, train), accuracy(m, held), train.size(), held.size()};
}

// ---------------------------------------------------------------------------
// Soft embedding

// Distribution-weighted average of embedding rows. Rows of `probs` must lie
// on the simplex (tolerance 1e-4).
template <class T>
Matrix<T> soft_embed(const Matrix<T>& probs, const Matrix<T>& table) {
  if (probs.cols != table.rows) throw ShapeError("soft_embed: distribution width does not match the table");
  for (std::size_t r = 0; r < probs.rows; ++r) {
    double s = 0.0;
    for (T v : probs.row(r)) {
      if (v < T(-1e-4)) throw DataError("soft_embed: negative probability in row " + std::to_string(r));
      s += static_cast<double>(v);
    }
    if (std::abs(s - 1.0) > 1e-4) throw DataError("soft_embed: row " + std::to_string(r) + " does not sum to 1");
  }
  Graph<T> g(false);
  return g.value(ag::matmul(g, g.constant(probs), g.constant(table)));
}

// ---------------------------------------------------------------------------
// Serialization (STLR1 bundle with a judge-type tag)

template <class T>
void save_textcnn(const std::string& dir, const TextCNN<T>& m, const std::string& judge_type, nlohmann::json extra = {}) {
  nlohmann::json man = extra.is_null() ? nlohmann::json::object() : std::move(extra);
  man["format"] = "STLR1";
  man["version"] = 1;
  man["judge_type"] = judge_type;
  man["textcnn_config"] = m.config;
  std::vector<NamedTensor> ts;
  for (const auto& t : m.params) ts.push_back({t.name, "judge", matrix_cast<float>(t.value)});
  write_bundle(dir, std::move(man), ts);
}

struct LoadedTextCNN {
  TextCNN<float> model;
  nlohmann::json manifest;
};

inline LoadedTextCNN load_textcnn(const std::string& dir, const std::string& expected_type) {
  const TensorBundle b = read_bundle(dir);
  if (b.manifest.value("format", "") != "STLR1" || b.manifest.value("judge_type", "") != expected_type)
    throw DataError("'" + dir + "' is not a " + expected_type + " judge");
  LoadedTextCNN out;
  out.manifest = b.manifest;
  out.model.config = b.manifest.at("textcnn_config").get<TextCNNConfig>();
  const auto specs = textcnn_specs(out.model.config);
  if (specs.size() != b.tensors.size()) throw ShapeError("'" + dir + "': tensor count does not match its config");
  for (std::size_t i = 0; i < specs.size(); ++i) {
    const auto& t = b.tensors[i];
    if (t.name != specs[i].name || t.value.rows != specs[i].rows || t.value.cols != specs[i].cols)
      throw ShapeError("'" + dir + "': tensor '" + t.name + "' does not match the configured layout");
    out.model.params.add(t.name, specs[i].group, t.value);
  }
  return out;
}

}  // namespace stlr
