#pragma once

// Ending generation: greedy, beam and top-k decoding, sidecar selection and
// probability-sum fusion with a style language model.

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "stlr/corpus.hpp"
#include "stlr/seq2seq.hpp"

namespace stlr {

enum class DecodeStrategy { greedy, beam, top_k };

inline const char* to_string(DecodeStrategy s) {
  switch (s) {
    case DecodeStrategy::greedy: return "greedy";
    case DecodeStrategy::beam: return "beam";
    case DecodeStrategy::top_k: return "top_k";
  }
  return "?";
}

inline DecodeStrategy parse_decode_strategy(std::string_view s) {
  for (auto v : {DecodeStrategy::greedy, DecodeStrategy::beam, DecodeStrategy::top_k})
    if (s == to_string(v)) return v;
  throw ConfigError("unknown decoding strategy '" + std::string(s) + "'");
}

struct DecodeSettings {
  DecodeStrategy strategy = DecodeStrategy::greedy;
  std::size_t k = 1;  // beam width or top-k cutoff
  double temperature = 1.0;
  std::size_t max_new_tokens = 32;
  std::uint64_t seed = 0;
  std::size_t max_source_len = 64;
  std::size_t chunk = 64;  // contexts decoded together

  void validate() const {
    if (max_new_tokens == 0) throw ConfigError("decode: max_new_tokens must be >= 1");
    if (k == 0) throw ConfigError("decode: k must be >= 1");
    if (!(temperature > 0.0)) throw ConfigError("decode: temperature must be > 0");
    if (chunk == 0 || max_source_len == 0) throw ConfigError("decode: chunk and max_source_len must be >= 1");
  }
  bool operator==(const DecodeSettings&) const = default;
};

inline void to_json(nlohmann::json& j, const DecodeSettings& s) {
  j = {{"strategy", to_string(s.strategy)},     {"k", s.k},       {"temperature", s.temperature},
       {"max_new_tokens", s.max_new_tokens}, {"seed", s.seed}, {"max_source_len", s.max_source_len},
       {"chunk", s.chunk}};
}

inline void from_json(const nlohmann::json& j, DecodeSettings& s) {
  s.strategy = parse_decode_strategy(j.at("strategy").get<std::string>());
  s.k = j.at("k").get<std::size_t>();
  s.temperature = j.at("temperature").get<double>();
  s.max_new_tokens = j.at("max_new_tokens").get<std::size_t>();
  s.seed = j.at("seed").get<std::uint64_t>();
  s.max_source_len = j.at("max_source_len").get<std::size_t>();
  s.chunk = j.at("chunk").get<std::size_t>();
}

// Tokens a generated ending may never contain.
inline bool is_banned_output(int id) { return id == kPad || id == kBos || id == kSep; }

// Argmax with the lowest id winning ties, skipping banned tokens.
template <class Row>
int argmax_allowed(const Row& row) {
  int best = -1;
  for (std::size_t v = 0; v < row.size(); ++v) {
    if (is_banned_output(static_cast<int>(v))) continue;
    if (best < 0 || row[v] > row[static_cast<std::size_t>(best)]) best = static_cast<int>(v);
  }
  if (best < 0) throw ConfigError("vocabulary has no generatable token");
  return best;
}

// Next token under probability-sum fusion: argmax of p_s2s + lambda * p_lm,
// lowest id on ties. skip_banned excludes PAD, BOS and SEP.
inline int fuse_next_token(const std::vector<double>& p_s2s, const std::vector<double>& p_lm, double lambda = 1.0,
                           bool skip_banned = false) {
  if (p_s2s.size() != p_lm.size() || p_s2s.empty()) throw ConfigError("fusion: vocabulary size mismatch");
  int best = -1;
  double best_v = 0.0;
  for (std::size_t v = 0; v < p_s2s.size(); ++v) {
    if (skip_banned && is_banned_output(static_cast<int>(v))) continue;
    const double x = p_s2s[v] + lambda * p_lm[v];
    if (best < 0 || x > best_v) {
      best = static_cast<int>(v);
      best_v = x;
    }
  }
  if (best < 0) throw ConfigError("vocabulary has no generatable token");
  return best;
}

namespace detail {

inline std::vector<double> log_softmax(std::span<const double> logits) {
  double mx = -std::numeric_limits<double>::infinity();
  for (double v : logits) mx = std::max(mx, v);
  double z = 0.0;
  for (double v : logits) z += std::exp(v - mx);
  const double lse = mx + std::log(z);
  std::vector<double> out(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - lse;
  return out;
}

inline std::vector<double> softmax(std::span<const double> logits) {
  auto out = log_softmax(logits);
  for (double& v : out) v = std::exp(v);
  return out;
}

// Last-position logits for every row of a prefix batch.
template <class T>
std::vector<std::vector<double>> last_logits(const Model<T>& m, const ContextEmbeddings<T>* ctx,
                                             const std::vector<std::vector<int>>& prefixes) {
  const std::size_t width = prefixes.front().size();
  Batch b = pad_batch(prefixes, width);
  for (std::size_t i = 0; i < b.ids.size(); ++i) b.mask[i] = b.ids[i] != kPad;
  const Matrix<T> logits = decoder_logits(m, ctx, b);
  std::vector<std::vector<double>> out(prefixes.size());
  for (std::size_t r = 0; r < prefixes.size(); ++r) {
    const auto row = logits.row(r * width + width - 1);
    out[r].assign(row.begin(), row.end());
  }
  return out;
}

template <class T>
ContextEmbeddings<T> encode_contexts(const Model<T>& m, const std::vector<std::vector<int>>& contexts,
                                     std::size_t max_len) {
  return encode_context(m, pad_batch(contexts, max_len, true));
}

// Greedy or top-k decoding for a chunk of contexts (ctx == nullptr: null context).
template <class T>
std::vector<std::vector<int>> sample_chunk(const Model<T>& m, const ContextEmbeddings<T>* ctx, std::size_t n,
                                           const DecodeSettings& s, std::size_t first_index) {
  std::vector<std::vector<int>> prefixes(n, std::vector<int>{kBos});
  std::vector<bool> done(n, false);
  std::vector<Rng> rngs;
  for (std::size_t i = 0; i < n; ++i) rngs.emplace_back(derive_seed(s.seed, first_index + i));
  for (std::size_t t = 0; t < s.max_new_tokens; ++t) {
    const auto logits = last_logits(m, ctx, prefixes);
    bool all_done = true;
    for (std::size_t r = 0; r < n; ++r) {
      if (done[r]) {
        prefixes[r].push_back(kPad);
        continue;
      }
      int next;
      if (s.strategy == DecodeStrategy::top_k) {
        std::vector<double> scaled(logits[r]);
        for (double& v : scaled) v /= s.temperature;
        for (std::size_t v = 0; v < scaled.size(); ++v)
          if (is_banned_output(static_cast<int>(v))) scaled[v] = -std::numeric_limits<double>::infinity();
        std::vector<int> ids(scaled.size());
        for (std::size_t v = 0; v < ids.size(); ++v) ids[v] = static_cast<int>(v);
        std::stable_sort(ids.begin(), ids.end(), [&](int a, int b) { return scaled[static_cast<std::size_t>(a)] > scaled[static_cast<std::size_t>(b)]; });
        ids.resize(std::min(s.k, ids.size()));
        std::vector<double> top;
        for (int id : ids) top.push_back(scaled[static_cast<std::size_t>(id)]);
        const auto p = softmax(top);
        double u = rngs[r].uniform(), acc = 0.0;
        next = ids.back();
        for (std::size_t j = 0; j < p.size(); ++j) {
          acc += p[j];
          if (u < acc) {
            next = ids[j];
            break;
          }
        }
      } else {
        next = argmax_allowed(logits[r]);
      }
      prefixes[r].push_back(next);
      if (next == kEos)
        done[r] = true;
      else
        all_done = false;
    }
    if (all_done) break;
  }
  std::vector<std::vector<int>> out(n);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 1; c < prefixes[r].size() && prefixes[r][c] != kEos && prefixes[r][c] != kPad; ++c)
      out[r].push_back(prefixes[r][c]);
  return out;
}

// Beam search for one context; scores are summed log-probabilities.
template <class T>
std::vector<int> beam_one(const Model<T>& m, const ContextEmbeddings<T>* ctx, const DecodeSettings& s) {
  struct Hyp {
    std::vector<int> ids;
    double score;
  };
  std::vector<Hyp> live{{{kBos}, 0.0}};
  std::vector<Hyp> finished;
  for (std::size_t t = 0; t < s.max_new_tokens && !live.empty(); ++t) {
    std::vector<std::vector<int>> prefixes;
    for (const auto& h : live) prefixes.push_back(h.ids);
    std::optional<ContextEmbeddings<T>> sel;
    if (ctx) sel = ctx->select(std::vector<std::size_t>(live.size(), 0));
    const auto logits = last_logits(m, sel ? &*sel : nullptr, prefixes);
    std::vector<Hyp> cand;
    for (std::size_t h = 0; h < live.size(); ++h) {
      const auto lp = log_softmax(logits[h]);
      std::vector<int> ids;
      for (std::size_t v = 0; v < lp.size(); ++v)
        if (!is_banned_output(static_cast<int>(v))) ids.push_back(static_cast<int>(v));
      std::stable_sort(ids.begin(), ids.end(), [&](int a, int b) {
        return logits[h][static_cast<std::size_t>(a)] > logits[h][static_cast<std::size_t>(b)];
      });
      ids.resize(std::min(s.k, ids.size()));
      for (int id : ids) {
        Hyp n{live[h].ids, live[h].score + lp[static_cast<std::size_t>(id)]};
        n.ids.push_back(id);
        cand.push_back(std::move(n));
      }
    }
    std::stable_sort(cand.begin(), cand.end(), [](const Hyp& a, const Hyp& b) { return a.score > b.score; });
    live.clear();
    for (auto& c : cand) {
      if (live.size() == s.k) break;
      (c.ids.back() == kEos ? finished : live).push_back(std::move(c));
    }
    if (finished.size() >= s.k) {
      std::stable_sort(finished.begin(), finished.end(), [](const Hyp& a, const Hyp& b) { return a.score > b.score; });
      finished.resize(s.k);
      // scores only decrease, so live beams below the k-th finished one are dead
      const double kth = finished.back().score;
      std::erase_if(live, [&](const Hyp& h) { return h.score <= kth; });
    }
  }
  for (auto& h : live) finished.push_back(std::move(h));
  const Hyp* top = &finished.front();
  for (const auto& h : finished)
    if (h.score > top->score) top = &h;
  std::vector<int> out;
  for (std::size_t c = 1; c < top->ids.size() && top->ids[c] != kEos; ++c) out.push_back(top->ids[c]);
  return out;
}

}  // namespace detail

// Generated ending ids (no BOS/EOS) for each context. An empty context list
// entry is rejected; use generate_unconditional for the null context.
template <class T>
std::vector<std::vector<int>> generate_ids(const Model<T>& m, const std::vector<std::vector<int>>& contexts,
                                           const DecodeSettings& s) {
  s.validate();
  std::vector<std::vector<int>> out;
  out.reserve(contexts.size());
  for (std::size_t lo = 0; lo < contexts.size(); lo += s.chunk) {
    const std::size_t hi = std::min(contexts.size(), lo + s.chunk);
    const std::vector<std::vector<int>> part(contexts.begin() + static_cast<std::ptrdiff_t>(lo),
                                             contexts.begin() + static_cast<std::ptrdiff_t>(hi));
    const auto ctx = detail::encode_contexts(m, part, s.max_source_len);
    if (s.strategy == DecodeStrategy::beam) {
      for (std::size_t i = 0; i < part.size(); ++i) {
        const auto one = ctx.select({i});
        out.push_back(detail::beam_one(m, &one, s));
      }
    } else {
      auto ids = detail::sample_chunk(m, &ctx, part.size(), s, lo);
      for (auto& x : ids) out.push_back(std::move(x));
    }
  }
  return out;
}

// Samples from the decoder under the null context.
template <class T>
std::vector<std::vector<int>> generate_unconditional(const Model<T>& m, std::size_t n, const DecodeSettings& s) {
  s.validate();
  if (s.strategy == DecodeStrategy::beam) {
    std::vector<std::vector<int>> out;
    for (std::size_t i = 0; i < n; ++i) out.push_back(detail::beam_one<T>(m, nullptr, s));
    return out;
  }
  return detail::sample_chunk<T>(m, nullptr, n, s, 0);
}

inline std::vector<std::vector<int>> encode_contexts_text(const Vocabulary& v, const std::vector<std::string>& contexts) {
  std::vector<std::vector<int>> out;
  for (const auto& c : contexts) {
    const auto ids = encode(v, c);
    if (ids.empty()) throw DataError("empty context");
    out.push_back(ids);
  }
  return out;
}

inline std::vector<std::vector<int>> encode_contexts_examples(const Vocabulary& v, const std::vector<StoryExample>& xs) {
  std::vector<std::vector<int>> out;
  for (const auto& x : xs) out.push_back(encode_context_sentences(v, x.context));
  return out;
}

template <class T>
std::vector<std::string> generate_endings(const Model<T>& m, const Vocabulary& v,
                                          const std::vector<std::vector<int>>& contexts, const DecodeSettings& s) {
  if (v.size() != m.config.vocab_size) throw ConfigError("vocabulary does not match the model");
  std::vector<std::string> out;
  for (const auto& ids : generate_ids(m, contexts, s)) out.push_back(decode(v, ids));
  return out;
}

// Base checkpoint plus an optional adapter sidecar directory ("" = none).
inline std::string generate_ending(const Model<float>& base, const std::string& sidecar_dir, const Vocabulary& v,
                                   const StoryExample& context, const DecodeSettings& s) {
  const Model<float> m = sidecar_dir.empty() ? base : attach_adapter_sidecar(base, sidecar_dir);
  return generate_endings(m, v, {encode_context_sentences(v, context.context)}, s).front();
}

// Greedy decoding on P_s2s(v | ctx, prefix) + lambda * P_lm(v | prefix). The
// style LM is run under the null context.
template <class T>
std::vector<std::vector<int>> fusion_generate_ids(const Model<T>& s2s, const Model<T>& lm,
                                                  const std::vector<std::vector<int>>& contexts,
                                                  std::size_t max_new_tokens, double lambda = 1.0,
                                                  std::size_t max_source_len = 64, std::size_t chunk = 64) {
  if (s2s.config.vocab_size != lm.config.vocab_size) throw ConfigError("fusion: vocabulary size mismatch");
  if (max_new_tokens == 0) throw ConfigError("fusion: max_new_tokens must be >= 1");
  if (lambda < 0.0) throw ConfigError("fusion: lambda must be >= 0");
  std::vector<std::vector<int>> out;
  for (std::size_t lo = 0; lo < contexts.size(); lo += chunk) {
    const std::size_t hi = std::min(contexts.size(), lo + chunk);
    const std::vector<std::vector<int>> part(contexts.begin() + static_cast<std::ptrdiff_t>(lo),
                                             contexts.begin() + static_cast<std::ptrdiff_t>(hi));
    const auto ctx = detail::encode_contexts(s2s, part, max_source_len);
    const std::size_t n = part.size();
    std::vector<std::vector<int>> prefixes(n, std::vector<int>{kBos});
    std::vector<bool> done(n, false);
    for (std::size_t t = 0; t < max_new_tokens; ++t) {
      const auto a = detail::last_logits(s2s, &ctx, prefixes);
      const auto b = detail::last_logits<T>(lm, nullptr, prefixes);
      bool all_done = true;
      for (std::size_t r = 0; r < n; ++r) {
        if (done[r]) {
          prefixes[r].push_back(kPad);
          continue;
        }
        const int next = fuse_next_token(detail::softmax(a[r]), detail::softmax(b[r]), lambda, true);
        prefixes[r].push_back(next);
        if (next == kEos)
          done[r] = true;
        else
          all_done = false;
      }
      if (all_done) break;
    }
    for (std::size_t r = 0; r < n; ++r) {
      std::vector<int> ids;
      for (std::size_t c = 1; c < prefixes[r].size() && prefixes[r][c] != kEos && prefixes[r][c] != kPad; ++c)
        ids.push_back(prefixes[r][c]);
      out.push_back(std::move(ids));
    }
  }
  return out;
}

}  // namespace stlr
