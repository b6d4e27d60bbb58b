#pragma once

// Judges behind the metrics: style classifier, cloze classifier, persona
// embedder and agglomerative clustering of style embeddings.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "stlr/corpus.hpp"
#include "stlr/textcnn.hpp"

namespace stlr {

struct JudgeConfig {
  std::string architecture = "textcnn";
  TextCNNConfig cnn;  // vocab_size and n_classes are filled in at training time
  ClassifierTrainConfig train;
  double threshold = 0.5;
  // Cloze judge only: chance per context of one extra negative made by
  // corrupting the true ending (a token dropped or two neighbours swapped).
  double corrupted_negatives = 0.0;

  void validate() const {
    if (architecture != "textcnn") throw ConfigError("judge architecture '" + architecture + "' is not available");
    train.validate();
    if (threshold <= 0.0 || threshold >= 1.0) throw ConfigError("judge threshold must be in (0,1)");
    if (corrupted_negatives < 0.0 || corrupted_negatives > 1.0) throw ConfigError("corrupted_negatives must be in [0,1]");
  }
  bool operator==(const JudgeConfig&) const = default;
};

inline void to_json(nlohmann::json& j, const JudgeConfig& c) {
  j = {{"architecture", c.architecture}, {"cnn", c.cnn}, {"train", c.train}, {"threshold", c.threshold},
       {"corrupted_negatives", c.corrupted_negatives}};
}

inline void from_json(const nlohmann::json& j, JudgeConfig& c) {
  c.architecture = j.at("architecture").get<std::string>();
  c.cnn = j.at("cnn").get<TextCNNConfig>();
  c.train = j.at("train").get<ClassifierTrainConfig>();
  c.threshold = j.at("threshold").get<double>();
  c.corrupted_negatives = j.at("corrupted_negatives").get<double>();
}

template <class T>
std::string textcnn_hash(const TextCNN<T>& m) {
  Fnv1a h;
  std::string buf;
  for (const auto& t : m.params) {
    buf.clear();
    for (T v : t.value.data) detail::put_f32_le(buf, static_cast<float>(v));
    h.update(buf);
  }
  return h.hex();
}

// ---------------------------------------------------------------------------
// Style judge

struct StyleJudge {
  std::string style;
  double threshold = 0.5;
  Vocabulary vocab;
  TextCNN<float> model;

  std::vector<double> probs(const std::vector<std::string>& texts) const {
    std::vector<std::vector<int>> seqs;
    for (const auto& t : texts) {
      auto ids = encode(vocab, t);
      if (ids.empty()) ids.push_back(kUnk);  // an empty ending is scored like an unknown token
      seqs.push_back(std::move(ids));
    }
    return binary_probs(model, seqs);
  }

  std::vector<bool> flags(const std::vector<std::string>& texts) const {
    std::vector<bool> out;
    for (double p : probs(texts)) out.push_back(p > threshold);
    return out;
  }
};

struct JudgeTraining {
  ClassifierMetrics metrics;
  std::vector<std::string> warnings;
};

inline std::pair<StyleJudge, JudgeTraining> train_style_judge(const Vocabulary& v,
                                                              const std::vector<StyleCaption>& positives,
                                                              const std::vector<std::string>& negatives,
                                                              const std::string& style, const JudgeConfig& jc) {
  jc.validate();
  if (positives.empty() || negatives.empty()) throw DataError("style judge: a class is empty");
  if (positives.size() < 20 || negatives.size() < 20) throw DataError("style judge: each class needs >= 20 examples");
  JudgeTraining tr;
  const double ratio = static_cast<double>(std::max(positives.size(), negatives.size())) /
                       static_cast<double>(std::min(positives.size(), negatives.size()));
  if (ratio > 100.0) tr.warnings.push_back("style judge: class imbalance exceeds 100:1");
  std::vector<LabeledSeq> data;
  for (const auto& c : positives) data.push_back({encode(v, c.text), 1});
  for (const auto& t : negatives) data.push_back({encode(v, t), 0});
  for (const auto& d : data)
    if (d.ids.empty()) throw DataError("style judge: empty text");
  TextCNNConfig cc = jc.cnn;
  cc.vocab_size = v.size();
  cc.n_classes = 1;
  StyleJudge j{style, jc.threshold, v, init_textcnn<float>(cc)};
  tr.metrics = train_textcnn(j.model, data, jc.train);
  return {std::move(j), tr};
}

// ---------------------------------------------------------------------------
// Cloze judge

// "context SEP ending" with the context sentences run together.
template <class Range>
std::vector<int> cloze_input(const Vocabulary& v, const Range& context, const std::string& ending) {
  std::vector<int> ids;
  for (const auto& s : context) {
    const auto part = encode(v, s);
    ids.insert(ids.end(), part.begin(), part.end());
  }
  ids.push_back(kSep);
  const auto e = encode(v, ending);
  ids.insert(ids.end(), e.begin(), e.end());
  if (std::count(ids.begin(), ids.end(), kSep) != 1) throw DataError("cloze input must contain exactly one SEP");
  return ids;
}

struct ClozeJudge {
  Vocabulary vocab;
  TextCNN<float> model;

  // P(ending is the true ending of context), one per pair.
  std::vector<double> scores(const std::vector<StoryExample>& contexts, const std::vector<std::string>& endings) const {
    if (contexts.size() != endings.size()) throw DataError("cloze scores: length mismatch");
    std::vector<std::vector<int>> seqs;
    for (std::size_t i = 0; i < contexts.size(); ++i) seqs.push_back(cloze_input(vocab, contexts[i].context, endings[i]));
    return binary_probs(model, seqs);
  }
};

// Pairs every context with the ending of a different story whose text differs.
inline std::vector<std::size_t> mismatched_partners(const std::vector<StoryExample>& xs, std::uint64_t seed) {
  if (xs.size() < 2) throw DataError("need at least 2 contexts to build mismatched endings");
  Rng rng(derive_seed(seed, 0xC102E));
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    std::size_t j = i;
    for (int attempt = 0; attempt < 64 && (j == i || xs[j].ending == xs[i].ending); ++attempt) j = rng.below(xs.size());
    if (j == i) j = (i + 1) % xs.size();
    out.push_back(j);
  }
  return out;
}

// Drops one token or swaps two differing neighbours. Returns the input
// unchanged when neither is possible.
inline std::string corrupt_ending(const std::string& ending, Rng& rng) {
  auto t = tokenize(ending);
  std::vector<std::size_t> swaps;
  for (std::size_t i = 0; i + 1 < t.size(); ++i)
    if (t[i] != t[i + 1]) swaps.push_back(i);
  if (t.size() >= 2 && (swaps.empty() || rng.below(2) == 0)) {
    t.erase(t.begin() + static_cast<std::ptrdiff_t>(rng.below(t.size())));
  } else if (!swaps.empty()) {
    const std::size_t i = swaps[rng.below(swaps.size())];
    std::swap(t[i], t[i + 1]);
  }
  std::string out;
  for (const auto& w : t) out += (out.empty() ? "" : " ") + w;
  return out;
}

inline std::pair<ClozeJudge, JudgeTraining> train_cloze_judge(const Vocabulary& v, const std::vector<StoryExample>& xs,
                                                              const JudgeConfig& jc, std::uint64_t seed) {
  jc.validate();
  const auto partner = mismatched_partners(xs, seed);
  std::vector<LabeledSeq> data;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    data.push_back({cloze_input(v, xs[i].context, xs[i].ending), 1});
    data.push_back({cloze_input(v, xs[i].context, xs[partner[i]].ending), 0});
  }
  if (jc.corrupted_negatives > 0.0) {
    Rng rng(derive_seed(seed, 0xC0DE));
    for (const auto& x : xs) {
      if (rng.uniform() >= jc.corrupted_negatives) continue;
      const std::string bad = corrupt_ending(x.ending, rng);
      if (bad != x.ending && !bad.empty()) data.push_back({cloze_input(v, x.context, bad), 0});
    }
  }
  TextCNNConfig cc = jc.cnn;
  cc.vocab_size = v.size();
  cc.n_classes = 1;
  ClozeJudge j{v, init_textcnn<float>(cc)};
  JudgeTraining tr;
  tr.metrics = train_textcnn(j.model, data, jc.train);
  return {std::move(j), tr};
}

// ---------------------------------------------------------------------------
// Persona embedder

enum class StylePooling { head_rows, caption_mean };

struct StyleEmbedder {
  std::vector<std::string> styles;  // class order
  Matrix<double> embeddings;        // styles x feature_dim
  ClassifierMetrics metrics;
  TextCNN<float> model;
};

inline StyleEmbedder train_style_embedder(const Vocabulary& v, const std::vector<StyleCaption>& captions,
                                          const JudgeConfig& jc, StylePooling pooling = StylePooling::head_rows) {
  jc.validate();
  std::map<std::string, int> index;
  for (const auto& c : captions) index.emplace(c.style, 0);
  if (index.size() < 2) throw DataError("style embedder needs at least 2 personas");
  StyleEmbedder e;
  for (auto& [name, id] : index) {
    id = static_cast<int>(e.styles.size());
    e.styles.push_back(name);
  }
  std::vector<LabeledSeq> data;
  for (const auto& c : captions) data.push_back({encode(v, c.text), index.at(c.style)});
  TextCNNConfig cc = jc.cnn;
  cc.vocab_size = v.size();
  cc.n_classes = e.styles.size();
  e.model = init_textcnn<float>(cc);
  e.metrics = train_textcnn(e.model, data, jc.train);
  const std::size_t F = cc.feature_dim();
  e.embeddings = Matrix<double>(e.styles.size(), F);
  if (pooling == StylePooling::head_rows) {
    const auto& w = e.model.params.get("cnn.head.w");  // F x C
    for (std::size_t c = 0; c < e.styles.size(); ++c)
      for (std::size_t f = 0; f < F; ++f) e.embeddings(c, f) = w(f, c);
  } else {
    std::vector<std::vector<int>> seqs;
    for (const auto& d : data) seqs.push_back(d.ids);
    const Matrix<float> feats = textcnn_features(e.model, seqs);
    std::vector<double> count(e.styles.size(), 0.0);
    for (std::size_t i = 0; i < data.size(); ++i) {
      const auto c = static_cast<std::size_t>(data[i].label);
      count[c] += 1.0;
      for (std::size_t f = 0; f < F; ++f) e.embeddings(c, f) += feats(i, f);
    }
    for (std::size_t c = 0; c < e.styles.size(); ++c)
      for (std::size_t f = 0; f < F; ++f) e.embeddings(c, f) /= count[c];
  }
  return e;
}

// ---------------------------------------------------------------------------
// Agglomerative clustering

enum class Linkage { average, single, complete };
enum class Distance { cosine, euclidean };

inline Linkage parse_linkage(std::string_view s) {
  if (s == "average") return Linkage::average;
  if (s == "single") return Linkage::single;
  if (s == "complete") return Linkage::complete;
  throw ConfigError("unknown linkage '" + std::string(s) + "'");
}

inline Distance parse_distance(std::string_view s) {
  if (s == "cosine") return Distance::cosine;
  if (s == "euclidean") return Distance::euclidean;
  throw ConfigError("unknown distance '" + std::string(s) + "'");
}

// Merge a and b (ids < n are styles, id n + i is the cluster formed by merge i).
struct Merge {
  std::size_t a = 0;
  std::size_t b = 0;
  double height = 0.0;
  std::size_t size = 0;
};

struct StyleClusterResult {
  std::vector<Merge> merges;  // n - 1 entries
  std::vector<int> groups;    // flat assignment per style, numbered by first appearance
  std::size_t n_groups = 0;
};

inline double vector_distance(std::span<const double> x, std::span<const double> y, Distance d) {
  if (d == Distance::euclidean) {
    double s = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) s += (x[i] - y[i]) * (x[i] - y[i]);
    return std::sqrt(s);
  }
  double dot = 0.0, nx = 0.0, ny = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    dot += x[i] * y[i];
    nx += x[i] * x[i];
    ny += y[i] * y[i];
  }
  if (nx == 0.0 || ny == 0.0) return nx == ny ? 0.0 : 1.0;
  return std::max(0.0, 1.0 - dot / std::sqrt(nx * ny));
}

inline std::vector<Merge> agglomerate(const Matrix<double>& emb, Linkage linkage, Distance distance) {
  const std::size_t n = emb.rows;
  if (n < 2) throw DataError("clustering needs at least 2 styles");
  std::vector<std::vector<double>> D(n, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) D[i][j] = D[j][i] = vector_distance(emb.row(i), emb.row(j), distance);
  std::vector<std::size_t> id(n), size(n, 1);
  std::vector<bool> alive(n, true);
  for (std::size_t i = 0; i < n; ++i) id[i] = i;
  std::vector<Merge> merges;
  for (std::size_t step = 0; step + 1 < n; ++step) {
    std::size_t bi = 0, bj = 0;
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < n; ++i) {
      if (!alive[i]) continue;
      for (std::size_t j = i + 1; j < n; ++j)
        if (alive[j] && D[i][j] < best) {
          best = D[i][j];
          bi = i;
          bj = j;
        }
    }
    merges.push_back({std::min(id[bi], id[bj]), std::max(id[bi], id[bj]), best, size[bi] + size[bj]});
    for (std::size_t k = 0; k < n; ++k) {
      if (!alive[k] || k == bi || k == bj) continue;
      double nd = 0.0;
      switch (linkage) {
        case Linkage::average:
          nd = (D[bi][k] * static_cast<double>(size[bi]) + D[bj][k] * static_cast<double>(size[bj])) /
               static_cast<double>(size[bi] + size[bj]);
          break;
        case Linkage::single: nd = std::min(D[bi][k], D[bj][k]); break;
        case Linkage::complete: nd = std::max(D[bi][k], D[bj][k]); break;
      }
      D[bi][k] = D[k][bi] = nd;
    }
    alive[bj] = false;
    size[bi] += size[bj];
    id[bi] = n + step;
  }
  return merges;
}

// Flat assignment after applying the first `n_merges` merges.
inline std::vector<int> flat_groups(std::size_t n, const std::vector<Merge>& merges, std::size_t n_merges) {
  std::vector<std::size_t> parent(2 * n);
  for (std::size_t i = 0; i < parent.size(); ++i) parent[i] = i;
  for (std::size_t m = 0; m < n_merges; ++m) parent[merges[m].a] = parent[merges[m].b] = n + m;
  const auto root = [&](std::size_t x) {
    while (parent[x] != x) x = parent[x];
    return x;
  };
  std::map<std::size_t, int> label;
  std::vector<int> out;
  for (std::size_t i = 0; i < n; ++i) {
    auto [it, ins] = label.emplace(root(i), static_cast<int>(label.size()));
    out.push_back(it->second);
  }
  return out;
}

inline StyleClusterResult cluster_styles(const Matrix<double>& emb, std::size_t k, Linkage linkage = Linkage::average,
                                         Distance distance = Distance::cosine) {
  if (k == 0 || k > emb.rows) throw ConfigError("cluster count must be in [1, n_styles]");
  StyleClusterResult r;
  r.merges = agglomerate(emb, linkage, distance);
  r.groups = flat_groups(emb.rows, r.merges, emb.rows - k);
  r.n_groups = k;
  return r;
}

// Cut at a height: merges with height <= h are applied.
inline StyleClusterResult cluster_styles_at_height(const Matrix<double>& emb, double h, Linkage linkage = Linkage::average,
                                                   Distance distance = Distance::cosine) {
  StyleClusterResult r;
  r.merges = agglomerate(emb, linkage, distance);
  std::size_t m = 0;
  while (m < r.merges.size() && r.merges[m].height <= h) ++m;
  r.groups = flat_groups(emb.rows, r.merges, m);
  r.n_groups = emb.rows - m;
  return r;
}

inline nlohmann::json dendrogram_json(const StyleClusterResult& r, const std::vector<std::string>& names) {
  nlohmann::json merges = nlohmann::json::array();
  for (const auto& m : r.merges) merges.push_back({m.a, m.b, m.height, m.size});
  nlohmann::json groups = nlohmann::json::object();
  for (std::size_t i = 0; i < names.size() && i < r.groups.size(); ++i) groups[names[i]] = r.groups[i];
  return {{"styles", names}, {"merges", merges}, {"groups", groups}, {"n_groups", r.n_groups}};
}

// ---------------------------------------------------------------------------
// Serialization

inline void save_style_judge(const std::string& dir, const StyleJudge& j) {
  save_textcnn(dir, j.model, "style", {{"style", j.style}, {"threshold", j.threshold}});
  j.vocab.save((std::filesystem::path(dir) / "vocab.json").string());
}

inline StyleJudge load_style_judge(const std::string& dir) {
  auto l = load_textcnn(dir, "style");
  StyleJudge j;
  j.style = l.manifest.at("style").get<std::string>();
  j.threshold = l.manifest.at("threshold").get<double>();
  j.vocab = Vocabulary::load((std::filesystem::path(dir) / "vocab.json").string());
  j.model = std::move(l.model);
  return j;
}

inline void save_cloze_judge(const std::string& dir, const ClozeJudge& j) {
  save_textcnn(dir, j.model, "cloze");
  j.vocab.save((std::filesystem::path(dir) / "vocab.json").string());
}

inline ClozeJudge load_cloze_judge(const std::string& dir) {
  auto l = load_textcnn(dir, "cloze");
  ClozeJudge j;
  j.vocab = Vocabulary::load((std::filesystem::path(dir) / "vocab.json").string());
  j.model = std::move(l.model);
  return j;
}

}  // namespace stlr
