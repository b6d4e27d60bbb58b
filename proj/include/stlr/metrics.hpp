#pragma once

// Overlap metrics (BLEU-1, ROUGE-L, CIDEr), judge-based ratios (RIS, RBAE,
// RBAR), quadrant counts and report assembly.

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "stlr/judges.hpp"

namespace stlr {

using Tokens = std::vector<std::string>;

namespace detail {

inline void check_aligned(std::size_t a, std::size_t b, const char* what) {
  if (a != b) throw DataError(std::string(what) + ": hypothesis and reference lists differ in length");
  if (a == 0) throw DataError(std::string(what) + ": empty input");
}

inline std::map<std::vector<std::string>, std::size_t> ngram_counts(const Tokens& t, std::size_t n) {
  std::map<std::vector<std::string>, std::size_t> out;
  for (std::size_t i = 0; i + n <= t.size(); ++i) ++out[Tokens(t.begin() + static_cast<std::ptrdiff_t>(i), t.begin() + static_cast<std::ptrdiff_t>(i + n))];
  return out;
}

inline std::size_t lcs_length(const Tokens& a, const Tokens& b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

}  // namespace detail

// Corpus-level clipped unigram precision times the brevity penalty.
inline double bleu1(const std::vector<Tokens>& hyps, const std::vector<Tokens>& refs) {
  detail::check_aligned(hyps.size(), refs.size(), "bleu1");
  std::size_t match = 0, c = 0, r = 0;
  for (std::size_t i = 0; i < hyps.size(); ++i) {
    const auto h = detail::ngram_counts(hyps[i], 1);
    const auto g = detail::ngram_counts(refs[i], 1);
    for (const auto& [tok, n] : h) {
      auto it = g.find(tok);
      if (it != g.end()) match += std::min(n, it->second);
    }
    c += hyps[i].size();
    r += refs[i].size();
  }
  if (c == 0) return 0.0;
  const double p = static_cast<double>(match) / static_cast<double>(c);
  const double bp = c > r ? 1.0 : std::exp(1.0 - static_cast<double>(r) / static_cast<double>(c));
  return p * bp;
}

// Mean per-pair LCS F1.
inline double rouge_l(const std::vector<Tokens>& hyps, const std::vector<Tokens>& refs) {
  detail::check_aligned(hyps.size(), refs.size(), "rouge_l");
  double sum = 0.0;
  for (std::size_t i = 0; i < hyps.size(); ++i) {
    const auto l = static_cast<double>(detail::lcs_length(hyps[i], refs[i]));
    if (l == 0.0) continue;
    const double p = l / static_cast<double>(hyps[i].size());
    const double r = l / static_cast<double>(refs[i].size());
    sum += 2.0 * p * r / (p + r);
  }
  return sum / static_cast<double>(hyps.size());
}

// TF-IDF n-gram cosine for n = 1..4, averaged over n and scaled by 10.
// idf(g) = ln((N + 1) / (df(g) + 1)) + 1 over the N references of the run.
// Orders where neither side has an n-gram are left out of the average; a
// pair with no n-grams at all scores 0.
inline double cider(const std::vector<Tokens>& hyps, const std::vector<Tokens>& refs) {
  detail::check_aligned(hyps.size(), refs.size(), "cider");
  constexpr std::size_t kMaxN = 4;
  const auto N = static_cast<double>(refs.size());
  std::array<std::map<Tokens, double>, kMaxN + 1> df;
  for (const auto& r : refs)
    for (std::size_t n = 1; n <= kMaxN; ++n)
      for (const auto& [g, cnt] : detail::ngram_counts(r, n)) df[n][g] += 1.0;
  const auto idf = [&](std::size_t n, const Tokens& g) {
    auto it = df[n].find(g);
    const double d = it == df[n].end() ? 0.0 : it->second;
    return std::log((N + 1.0) / (d + 1.0)) + 1.0;
  };
  double total = 0.0;
  for (std::size_t i = 0; i < hyps.size(); ++i) {
    double sum = 0.0;
    std::size_t orders = 0;
    for (std::size_t n = 1; n <= kMaxN; ++n) {
      const auto h = detail::ngram_counts(hyps[i], n);
      const auto r = detail::ngram_counts(refs[i], n);
      if (h.empty() && r.empty()) continue;
      ++orders;
      if (h.empty() || r.empty()) continue;
      double dot = 0.0, nh = 0.0, nr = 0.0;
      for (const auto& [g, c] : h) {
        const double w = static_cast<double>(c) * idf(n, g);
        nh += w * w;
        auto it = r.find(g);
        if (it != r.end()) dot += w * static_cast<double>(it->second) * idf(n, g);
      }
      for (const auto& [g, c] : r) {
        const double w = static_cast<double>(c) * idf(n, g);
        nr += w * w;
      }
      sum += dot / std::sqrt(nh * nr);
    }
    if (orders > 0) total += sum / static_cast<double>(orders);
  }
  return 10.0 * total / static_cast<double>(hyps.size());
}

inline std::vector<Tokens> tokenize_all(const std::vector<std::string>& texts) {
  std::vector<Tokens> out;
  for (const auto& t : texts) out.push_back(tokenize(t));
  return out;
}

// ---------------------------------------------------------------------------
// Judge ratios

inline double ris_from_scores(const std::vector<double>& scores, double threshold = 0.5) {
  if (scores.empty()) throw DataError("ris: no endings");
  std::size_t k = 0;
  for (double s : scores) k += s > threshold;
  return static_cast<double>(k) / static_cast<double>(scores.size());
}

inline double ris(const std::vector<std::string>& endings, const StyleJudge& judge) {
  if (endings.empty()) throw DataError("ris: no endings");
  return ris_from_scores(judge.probs(endings), judge.threshold);
}

// Fraction of pairs where the model score is strictly higher.
inline double rbae_from_scores(const std::vector<double>& model, const std::vector<double>& baseline) {
  if (model.size() != baseline.size()) throw DataError("rbae: length mismatch");
  if (model.empty()) throw DataError("rbae: empty input");
  std::size_t k = 0;
  for (std::size_t i = 0; i < model.size(); ++i) k += model[i] > baseline[i];
  return static_cast<double>(k) / static_cast<double>(model.size());
}

inline double rbae(const std::vector<StoryExample>& contexts, const std::vector<std::string>& model_endings,
                   const std::vector<std::string>& baseline_endings, const ClozeJudge& judge) {
  if (contexts.size() != model_endings.size() || contexts.size() != baseline_endings.size())
    throw DataError("rbae: length mismatch");
  return rbae_from_scores(judge.scores(contexts, model_endings), judge.scores(contexts, baseline_endings));
}

// For each context a human ending from a different story, chosen from the
// pool by a generator keyed on the context's content, so the choice does not
// depend on list order.
inline std::vector<std::string> sample_random_endings(const std::vector<StoryExample>& contexts,
                                                      const std::vector<std::string>& pool, std::uint64_t seed) {
  if (pool.size() < contexts.size()) throw DataError("rbar: human ending pool is smaller than the context list");
  std::vector<std::string> sorted = pool;
  std::sort(sorted.begin(), sorted.end());
  std::vector<std::string> out;
  for (const auto& c : contexts) {
    Fnv1a h;
    for (const auto& s : c.context) {
      h.update(s);
      h.update("\n");
    }
    h.update(c.ending);
    Rng rng(derive_seed(seed, h.digest()));
    std::optional<std::size_t> pick;
    for (int attempt = 0; attempt < 64 && !pick; ++attempt) {
      const std::size_t j = rng.below(sorted.size());
      if (sorted[j] != c.ending) pick = j;
    }
    if (!pick)
      for (std::size_t j = 0; j < sorted.size() && !pick; ++j)
        if (sorted[j] != c.ending) pick = j;
    if (!pick) throw DataError("rbar: pool holds no ending different from the gold ending");
    out.push_back(sorted[*pick]);
  }
  return out;
}

inline double rbar(const std::vector<StoryExample>& contexts, const std::vector<std::string>& model_endings,
                   const std::vector<std::string>& pool, const ClozeJudge& judge, std::uint64_t seed) {
  if (contexts.size() != model_endings.size()) throw DataError("rbar: length mismatch");
  const auto random = sample_random_endings(contexts, pool, seed);
  for (std::size_t i = 0; i < contexts.size(); ++i)
    if (random[i] == contexts[i].ending) throw DataError("rbar: sampled the context's own ending");
  return rbae_from_scores(judge.scores(contexts, model_endings), judge.scores(contexts, random));
}

// ---------------------------------------------------------------------------
// Quadrants

struct Quadrants {
  std::size_t tt = 0;  // styled and valid
  std::size_t tf = 0;  // styled, not valid
  std::size_t ft = 0;  // not styled, valid
  std::size_t ff = 0;
  std::size_t n() const { return tt + tf + ft + ff; }
  // NaN when the condition never holds
  double p_valid_given_styled() const {
    return tt + tf ? static_cast<double>(tt) / static_cast<double>(tt + tf) : std::numeric_limits<double>::quiet_NaN();
  }
  double p_styled_given_valid() const {
    return tt + ft ? static_cast<double>(tt) / static_cast<double>(tt + ft) : std::numeric_limits<double>::quiet_NaN();
  }
};

inline Quadrants quadrants(const std::vector<bool>& styled, const std::vector<bool>& valid) {
  if (styled.size() != valid.size()) throw DataError("quadrants: length mismatch");
  Quadrants q;
  for (std::size_t i = 0; i < styled.size(); ++i) {
    if (styled[i])
      ++(valid[i] ? q.tt : q.tf);
    else
      ++(valid[i] ? q.ft : q.ff);
  }
  return q;
}

// ---------------------------------------------------------------------------
// Reports

inline nlohmann::json nullable(double v) { return std::isnan(v) ? nlohmann::json(nullptr) : nlohmann::json(v); }

struct EvalReport {
  std::string model;
  double bleu1 = 0.0;
  double rouge_l = 0.0;
  double cider = 0.0;
  double ris = 0.0;
  std::optional<double> rbae;  // absent for the baseline itself
  double rbar = 0.0;
  Quadrants quadrants;
  std::size_t n_samples = 0;
  std::string config_hash;
  std::map<std::string, std::string> judge_hashes;
};

inline nlohmann::json to_json(const EvalReport& r) {
  const auto& q = r.quadrants;
  return {{"model", r.model},
          {"bleu1", r.bleu1},
          {"rougeL", r.rouge_l},
          {"cider", r.cider},
          {"ris", r.ris},
          {"rbae", r.rbae ? nlohmann::json(*r.rbae) : nlohmann::json(nullptr)},
          {"rbar", r.rbar},
          {"quadrants",
           {{"styled_valid", q.tt},
            {"styled_invalid", q.tf},
            {"unstyled_valid", q.ft},
            {"unstyled_invalid", q.ff},
            {"p_valid_given_styled", nullable(q.p_valid_given_styled())},
            {"p_styled_given_valid", nullable(q.p_styled_given_valid())}}},
          {"n_samples", r.n_samples},
          {"config_hash", r.config_hash},
          {"judge_hashes", r.judge_hashes},
          {"cider_idf", "references of this run, smoothed"}};
}

struct ReportInputs {
  std::string model;
  std::vector<StoryExample> contexts;  // gold endings inside
  std::vector<std::string> endings;
  std::optional<std::vector<std::string>> baseline_endings;  // none: RBAE is NA
  std::vector<std::string> human_pool;
  std::uint64_t seed = 0;
  std::string config_hash;
};

inline EvalReport full_report(const ReportInputs& in, const StyleJudge& style, const ClozeJudge& cloze) {
  if (in.contexts.size() != in.endings.size()) throw DataError("report: contexts and endings differ in length");
  EvalReport r;
  r.model = in.model;
  r.n_samples = in.endings.size();
  std::vector<std::string> gold;
  for (const auto& c : in.contexts) gold.push_back(c.ending);
  const auto hyp = tokenize_all(in.endings);
  const auto ref = tokenize_all(gold);
  r.bleu1 = bleu1(hyp, ref);
  r.rouge_l = rouge_l(hyp, ref);
  r.cider = cider(hyp, ref);
  const auto style_scores = style.probs(in.endings);
  r.ris = ris_from_scores(style_scores, style.threshold);
  const auto model_cloze = cloze.scores(in.contexts, in.endings);
  std::vector<bool> styled, valid;
  for (double s : style_scores) styled.push_back(s > style.threshold);
  if (in.baseline_endings) {
    const auto base_cloze = cloze.scores(in.contexts, *in.baseline_endings);
    r.rbae = rbae_from_scores(model_cloze, base_cloze);
    for (std::size_t i = 0; i < model_cloze.size(); ++i) valid.push_back(model_cloze[i] > base_cloze[i]);
  }
  const auto random = sample_random_endings(in.contexts, in.human_pool, in.seed);
  const auto rand_cloze = cloze.scores(in.contexts, random);
  r.rbar = rbae_from_scores(model_cloze, rand_cloze);
  if (!in.baseline_endings)
    for (std::size_t i = 0; i < model_cloze.size(); ++i) valid.push_back(model_cloze[i] > rand_cloze[i]);
  r.quadrants = quadrants(styled, valid);
  r.config_hash = in.config_hash;
  r.judge_hashes = {{"style", textcnn_hash(style.model)}, {"cloze", textcnn_hash(cloze.model)}};
  return r;
}

// Table-shaped CSV; missing values print as NA.
inline std::string format_metric(const nlohmann::json& v) {
  if (v.is_null()) return "NA";
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(4);
  os << v.get<double>();
  return os.str();
}

inline const std::vector<std::pair<std::string, std::string>>& table_columns() {
  static const std::vector<std::pair<std::string, std::string>> c{{"BLEU/1", "bleu1"}, {"cider", "cider"},
                                                                  {"ROUGE-L", "rougeL"}, {"RIS", "ris"},
                                                                  {"RBAE", "rbae"},     {"RBAR", "rbar"}};
  return c;
}

inline std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

inline std::string reports_to_csv(const std::vector<nlohmann::json>& reports) {
  std::ostringstream os;
  os << "model";
  for (const auto& [h, k] : table_columns()) os << ',' << h;
  os << '\n';
  for (const auto& r : reports) {
    os << csv_escape(r.value("model", std::string("?")));
    for (const auto& [h, k] : table_columns()) os << ',' << format_metric(r.contains(k) ? r.at(k) : nlohmann::json(nullptr));
    os << '\n';
  }
  return os.str();
}

inline std::string reports_to_markdown(const std::vector<nlohmann::json>& reports) {
  std::ostringstream os;
  os << "| model |";
  for (const auto& [h, k] : table_columns()) os << ' ' << h << " |";
  os << "\n|---|";
  for (std::size_t i = 0; i < table_columns().size(); ++i) os << "---|";
  os << '\n';
  for (const auto& r : reports) {
    os << "| " << r.value("model", std::string("?")) << " |";
    for (const auto& [h, k] : table_columns()) os << ' ' << format_metric(r.contains(k) ? r.at(k) : nlohmann::json(nullptr)) << " |";
    os << '\n';
  }
  return os.str();
}

}  // namespace stlr
