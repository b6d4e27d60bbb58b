#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "stlr/errors.hpp"

namespace stlr {

inline constexpr int kPad = 0;
inline constexpr int kBos = 1;
inline constexpr int kEos = 2;
inline constexpr int kSep = 3;
inline constexpr int kUnk = 4;
inline constexpr int kNumSpecials = 5;

inline const std::array<std::string, kNumSpecials>& special_tokens() {
  static const std::array<std::string, kNumSpecials> s{"<pad>", "<bos>", "<eos>", "<sep>", "<unk>"};
  return s;
}

inline bool is_special_string(std::string_view tok) {
  const auto& s = special_tokens();
  return std::find(s.begin(), s.end(), tok) != s.end();
}

// Whitespace tokenisation with punctuation split off as separate tokens.
inline std::vector<std::string> tokenize(std::string_view text) {
  static constexpr std::string_view punct = ".,!?;:\"()";
  std::vector<std::string> out;
  std::string cur;
  const auto flush = [&] {
    if (!cur.empty()) out.push_back(std::move(cur));
    cur.clear();
  };
  for (char c : text) {
    if (c == ' ' || c == '\t' || c == '\n' || c == '\r') {
      flush();
    } else if (punct.find(c) != std::string_view::npos) {
      flush();
      out.emplace_back(1, c);
    } else {
      cur.push_back(c);
    }
  }
  flush();
  return out;
}

class Vocabulary {
 public:
  Vocabulary() {
    for (const auto& s : special_tokens()) add(s);
  }

  std::size_t size() const noexcept { return id_to_token_.size(); }

  int id(std::string_view token) const {
    if (is_special_string(token)) return kUnk;
    auto it = token_to_id_.find(std::string(token));
    return it == token_to_id_.end() ? kUnk : it->second;
  }

  bool contains(std::string_view token) const { return id(token) != kUnk; }

  const std::string& token(int id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= id_to_token_.size())
      throw DataError("token id " + std::to_string(id) + " out of range");
    return id_to_token_[static_cast<std::size_t>(id)];
  }

  const std::vector<std::string>& tokens() const noexcept { return id_to_token_; }

  nlohmann::json to_json() const {
    nlohmann::json j = nlohmann::json::object();
    for (std::size_t i = 0; i < id_to_token_.size(); ++i) j[id_to_token_[i]] = i;
    return j;
  }

  static Vocabulary from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw DataError("vocabulary JSON must be an object");
    std::vector<std::string> by_id(j.size());
    std::vector<bool> seen(j.size(), false);
    for (auto it = j.begin(); it != j.end(); ++it) {
      const auto id = it.value().get<std::int64_t>();
      if (id < 0 || static_cast<std::size_t>(id) >= by_id.size() || seen[static_cast<std::size_t>(id)])
        throw DataError("vocabulary ids must be a permutation of 0..n-1");
      seen[static_cast<std::size_t>(id)] = true;
      by_id[static_cast<std::size_t>(id)] = it.key();
    }
    for (int i = 0; i < kNumSpecials; ++i)
      if (by_id.size() <= static_cast<std::size_t>(i) || by_id[static_cast<std::size_t>(i)] != special_tokens()[static_cast<std::size_t>(i)])
        throw DataError("vocabulary must reserve special tokens at ids 0-4");
    Vocabulary v;
    for (std::size_t i = kNumSpecials; i < by_id.size(); ++i) v.add(by_id[i]);
    return v;
  }

  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write '" + path + "'");
    out << to_json().dump(1) << '\n';
  }

  static Vocabulary load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open vocabulary '" + path + "'");
    nlohmann::json j;
    in >> j;
    return from_json(j);
  }

  bool operator==(const Vocabulary& o) const { return id_to_token_ == o.id_to_token_; }

  // Appends a token if absent and returns its id.
  int add(const std::string& tok) {
    auto it = token_to_id_.find(tok);
    if (it != token_to_id_.end()) return it->second;
    const int id = static_cast<int>(id_to_token_.size());
    token_to_id_.emplace(tok, id);
    id_to_token_.push_back(tok);
    return id;
  }

 private:
  std::unordered_map<std::string, int> token_to_id_;
  std::vector<std::string> id_to_token_;
};

// Ranks tokens by descending frequency with lexicographic tie-break; keeps
// those with count >= min_freq, at most max_size of them.
inline Vocabulary build_vocab(const std::vector<std::string>& texts, std::size_t min_freq, std::size_t max_size) {
  if (texts.empty()) throw DataError("build_vocab: empty corpus");
  std::map<std::string, std::size_t> counts;
  for (const auto& t : texts)
    for (auto& tok : tokenize(t))
      if (!is_special_string(tok)) ++counts[tok];
  if (counts.empty()) throw DataError("build_vocab: corpus has no tokens");
  std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
  std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  Vocabulary v;
  for (const auto& [tok, c] : ranked) {
    if (v.size() - kNumSpecials >= max_size) break;
    if (c >= min_freq) v.add(tok);
  }
  return v;
}

inline std::vector<int> encode(const Vocabulary& v, std::string_view text) {
  std::vector<int> ids;
  for (const auto& tok : tokenize(text)) ids.push_back(v.id(tok));
  return ids;
}

// Skips PAD and BOS, stops at the first EOS.
inline std::string decode(const Vocabulary& v, const std::vector<int>& ids) {
  std::string out;
  for (int id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= v.size())
      throw DataError("decode: token id " + std::to_string(id) + " out of range");
    if (id == kEos) break;
    if (id == kPad || id == kBos) continue;
    if (!out.empty()) out.push_back(' ');
    out += v.token(id);
  }
  return out;
}

// BOS text EOS
inline std::vector<int> encode_target(const Vocabulary& v, std::string_view text) {
  std::vector<int> ids{kBos};
  const auto body = encode(v, text);
  ids.insert(ids.end(), body.begin(), body.end());
  ids.push_back(kEos);
  return ids;
}

// Encoder input: context sentences joined with SEP.
template <class Range>
std::vector<int> encode_context_sentences(const Vocabulary& v, const Range& sentences) {
  std::vector<int> ids;
  bool first = true;
  for (const auto& s : sentences) {
    if (!first) ids.push_back(kSep);
    first = false;
    const auto part = encode(v, s);
    ids.insert(ids.end(), part.begin(), part.end());
  }
  if (ids.empty()) ids.push_back(kUnk);
  return ids;
}

struct Batch {
  std::size_t rows = 0;
  std::size_t width = 0;
  std::vector<int> ids;           // rows * width, PAD-filled
  std::vector<std::uint8_t> mask; // 1 = real token
  std::vector<std::size_t> lengths;

  int at(std::size_t r, std::size_t c) const { return ids[r * width + c]; }
};

// Pads (or truncates) every sequence to exactly max_len columns, or to the
// longest sequence when pad_to_longest is set. Truncation keeps a trailing EOS.
inline Batch pad_batch(const std::vector<std::vector<int>>& seqs, std::size_t max_len, bool pad_to_longest = false) {
  if (max_len == 0) throw ConfigError("pad_batch: max_len must be >= 1");
  Batch b;
  b.rows = seqs.size();
  std::size_t width = max_len;
  if (pad_to_longest) {
    std::size_t longest = 1;
    for (const auto& s : seqs) longest = std::max(longest, s.size());
    width = std::min(longest, max_len);
  }
  b.width = width;
  b.ids.assign(b.rows * width, kPad);
  b.mask.assign(b.rows * width, 0);
  for (std::size_t r = 0; r < seqs.size(); ++r) {
    const auto& s = seqs[r];
    if (s.empty()) throw DataError("pad_batch: empty sequence");
    std::vector<int> row(s.begin(), s.begin() + static_cast<std::ptrdiff_t>(std::min(s.size(), width)));
    if (s.size() > width && s.back() == kEos) row.back() = kEos;
    for (std::size_t c = 0; c < row.size(); ++c) {
      b.ids[r * width + c] = row[c];
      b.mask[r * width + c] = row[c] == kPad ? 0 : 1;
    }
    b.lengths.push_back(row.size());
  }
  return b;
}

}  // namespace stlr
