#pragma once

// Story and style corpora: loading, validation, splitting, and a seeded
// synthetic generator with the same shapes as the real datasets.

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "stlr/errors.hpp"
#include "stlr/tensor.hpp"

namespace stlr {

inline std::string trim(std::string_view s) {
  const auto ws = [](char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v'; };
  std::size_t b = 0, e = s.size();
  while (b < e && ws(s[b])) ++b;
  while (e > b && ws(s[e - 1])) --e;
  return std::string(s.substr(b, e - b));
}

struct StoryRecord {
  std::array<std::string, 5> sentences;
  bool operator==(const StoryRecord&) const = default;
};

struct StoryExample {
  std::array<std::string, 4> context;
  std::string ending;
  bool operator==(const StoryExample&) const = default;
};

struct StyleCaption {
  std::string text;
  std::string style;
  bool operator==(const StyleCaption&) const = default;
};

enum class StoryFormat { jsonl, csv5 };

inline StoryFormat parse_story_format(std::string_view s) {
  if (s == "jsonl") return StoryFormat::jsonl;
  if (s == "csv" || s == "csv-5col") return StoryFormat::csv5;
  throw ConfigError("unknown story format '" + std::string(s) + "' (expected jsonl or csv-5col)");
}

namespace detail {

inline StoryRecord make_story(const std::vector<std::string>& raw, std::size_t line) {
  if (raw.size() != 5)
    throw DataError("line " + std::to_string(line) + ": story has " + std::to_string(raw.size()) +
                    " sentences, expected 5");
  StoryRecord r;
  for (std::size_t i = 0; i < 5; ++i) {
    r.sentences[i] = trim(raw[i]);
    if (r.sentences[i].empty())
      throw DataError("line " + std::to_string(line) + ": sentence " + std::to_string(i + 1) + " is empty");
  }
  return r;
}

// RFC-4180 style field splitting; quotes may contain commas and "" escapes.
inline std::vector<std::string> split_csv_line(const std::string& line, std::size_t lineno) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          cur.push_back('"');
          ++i;
        } else {
          quoted = false;
        }
      } else {
        cur.push_back(c);
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.push_back(std::move(cur));
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  if (quoted) throw DataError("line " + std::to_string(lineno) + ": unterminated quoted field");
  out.push_back(std::move(cur));
  return out;
}

inline std::ifstream open_input(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open '" + path + "'");
  return in;
}

}  // namespace detail

// JSONL: {"sentences": [s1..s5]} per line. CSV: either exactly five columns,
// or a header naming sentence1..sentence5 (the ROC Stories layout).
inline std::vector<StoryRecord> parse_story_corpus(std::istream& in, StoryFormat format) {
  std::vector<StoryRecord> out;
  std::string line;
  std::size_t lineno = 0;
  if (format == StoryFormat::jsonl) {
    while (std::getline(in, line)) {
      ++lineno;
      if (trim(line).empty()) continue;
      nlohmann::json j;
      try {
        j = nlohmann::json::parse(line);
      } catch (const nlohmann::json::exception& e) {
        throw DataError("line " + std::to_string(lineno) + ": malformed JSON: " + e.what());
      }
      if (!j.is_object() || !j.contains("sentences") || !j["sentences"].is_array())
        throw DataError("line " + std::to_string(lineno) + ": expected object with a 'sentences' array");
      std::vector<std::string> raw;
      for (const auto& s : j["sentences"]) {
        if (!s.is_string()) throw DataError("line " + std::to_string(lineno) + ": sentence is not a string");
        raw.push_back(s.get<std::string>());
      }
      out.push_back(detail::make_story(raw, lineno));
    }
    return out;
  }
  std::vector<std::size_t> columns;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    auto fields = detail::split_csv_line(line, lineno);
    if (lineno == 1 || (columns.empty() && out.empty())) {
      std::vector<std::size_t> found;
      for (int k = 1; k <= 5; ++k) {
        const auto name = "sentence" + std::to_string(k);
        for (std::size_t c = 0; c < fields.size(); ++c)
          if (trim(fields[c]) == name) found.push_back(c);
      }
      if (found.size() == 5) {
        columns = found;
        continue;
      }
    }
    std::vector<std::string> raw;
    if (!columns.empty()) {
      for (std::size_t c : columns) {
        if (c >= fields.size()) throw DataError("line " + std::to_string(lineno) + ": missing column");
        raw.push_back(fields[c]);
      }
    } else {
      raw = std::move(fields);
    }
    out.push_back(detail::make_story(raw, lineno));
  }
  return out;
}

inline std::vector<StoryRecord> load_story_corpus(const std::string& path, StoryFormat format) {
  auto in = detail::open_input(path);
  return parse_story_corpus(in, format);
}

inline std::string story_to_jsonl(const StoryRecord& r) {
  nlohmann::json j;
  j["sentences"] = r.sentences;
  return j.dump();
}

inline void write_story_corpus(const std::string& path, const std::vector<StoryRecord>& records) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write '" + path + "'");
  for (const auto& r : records) out << story_to_jsonl(r) << '\n';
}

inline StoryExample split_story(const StoryRecord& r) {
  StoryExample ex;
  std::copy(r.sentences.begin(), r.sentences.begin() + 4, ex.context.begin());
  ex.ending = r.sentences[4];
  return ex;
}

inline std::vector<StoryExample> split_stories(const std::vector<StoryRecord>& records) {
  std::vector<StoryExample> out;
  out.reserve(records.size());
  for (const auto& r : records) out.push_back(split_story(r));
  return out;
}

inline StoryRecord join_story(const StoryExample& ex) {
  StoryRecord r;
  std::copy(ex.context.begin(), ex.context.end(), r.sentences.begin());
  r.sentences[4] = ex.ending;
  return r;
}

// umbrella style -> fine persona labels
using StyleGrouping = std::map<std::string, std::vector<std::string>>;

inline StyleGrouping load_grouping(const std::string& path) {
  auto in = detail::open_input(path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("grouping file '" + path + "': " + e.what());
  }
  if (!j.is_object()) throw ConfigError("grouping file must be a JSON object {style: [personas]}");
  StyleGrouping g;
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!it.value().is_array()) throw ConfigError("grouping entry '" + it.key() + "' must be an array");
    for (const auto& p : it.value()) g[it.key()].push_back(p.get<std::string>());
  }
  return g;
}

struct StyleCorpusLoad {
  std::vector<StyleCaption> captions;
  std::size_t dropped = 0;
};

// Keeps captions whose persona belongs to some group, relabelled with the
// group's name.
inline StyleCorpusLoad group_captions(const std::vector<StyleCaption>& raw, const StyleGrouping& grouping) {
  std::map<std::string, std::string> persona_to_style;
  for (const auto& [style, personas] : grouping)
    for (const auto& p : personas) {
      auto [it, inserted] = persona_to_style.emplace(p, style);
      if (!inserted && it->second != style)
        throw ConfigError("persona '" + p + "' appears in groups '" + it->second + "' and '" + style + "'");
    }
  StyleCorpusLoad res;
  for (const auto& c : raw) {
    auto it = persona_to_style.find(c.style);
    if (it == persona_to_style.end()) {
      ++res.dropped;
      continue;
    }
    res.captions.push_back({c.text, it->second});
  }
  if (res.captions.empty()) throw DataError("style corpus is empty after applying the persona grouping");
  return res;
}

inline std::vector<StyleCaption> parse_caption_jsonl(std::istream& in) {
  std::vector<StyleCaption> raw;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw DataError("line " + std::to_string(lineno) + ": malformed JSON: " + e.what());
    }
    if (!j.is_object() || !j.contains("text") || !j.contains("persona") || !j["text"].is_string() ||
        !j["persona"].is_string())
      throw DataError("line " + std::to_string(lineno) + ": expected {\"text\": ..., \"persona\": ...}");
    StyleCaption c{trim(j["text"].get<std::string>()), trim(j["persona"].get<std::string>())};
    if (c.text.empty()) throw DataError("line " + std::to_string(lineno) + ": empty caption text");
    raw.push_back(std::move(c));
  }
  return raw;
}

inline StyleCorpusLoad load_style_corpus(const std::string& path, const StyleGrouping& grouping) {
  auto in = detail::open_input(path);
  return group_captions(parse_caption_jsonl(in), grouping);
}

inline void write_captions(const std::string& path, const std::vector<StyleCaption>& captions) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write '" + path + "'");
  for (const auto& c : captions) {
    nlohmann::json j;
    j["text"] = c.text;
    j["persona"] = c.style;
    out << j.dump() << '\n';
  }
}

// ---------------------------------------------------------------------------
// Synthetic corpora

struct SyntheticTopic {
  std::string noun;
  std::string place;
  std::string verb;                         // "wanted to <verb> the <noun>"
  std::vector<std::string> ending_phrases;  // "<name> <phrase> the <noun> ."
};

struct SyntheticSpec {
  std::uint64_t seed = 7;
  std::size_t n_stories = 600;
  std::size_t n_captions_per_style = 150;
  std::map<std::string, std::vector<std::string>> style_lexicons;
  std::vector<std::string> names;
  std::vector<SyntheticTopic> topics;
  std::vector<std::string> adjectives;
  std::vector<std::string> fillers;
  // Number of filler tokens appended to the fourth sentence.
  std::size_t min_filler = 0;
  std::size_t max_filler = 2;
  // Fraction of captions shaped like story endings (the rest are free-form).
  double story_like_caption_fraction = 0.5;
};

// Every token a synthetic story can contain.
inline std::vector<std::string> synthetic_base_vocab(const SyntheticSpec& spec) {
  std::set<std::string> v{"wanted", "to", "the", "went", "was", "worked", "on", "it", ".", "what", "a", ",", "so"};
  for (const auto& n : spec.names) v.insert(n);
  for (const auto& a : spec.adjectives) v.insert(a);
  for (const auto& f : spec.fillers) v.insert(f);
  for (const auto& t : spec.topics) {
    v.insert(t.noun);
    v.insert(t.place);
    v.insert(t.verb);
    for (const auto& p : t.ending_phrases) {
      std::istringstream is(p);
      std::string tok;
      while (is >> tok) v.insert(tok);
    }
  }
  return {v.begin(), v.end()};
}

inline void validate_synthetic_spec(const SyntheticSpec& spec) {
  if (spec.names.empty() || spec.topics.empty() || spec.adjectives.empty())
    throw ConfigError("synthetic spec needs names, topics and adjectives");
  if (spec.min_filler > spec.max_filler || (spec.max_filler > 0 && spec.fillers.empty()))
    throw ConfigError("synthetic spec: invalid filler range");
  if (spec.story_like_caption_fraction < 0.0 || spec.story_like_caption_fraction > 1.0)
    throw ConfigError("synthetic spec: story_like_caption_fraction must be in [0,1]");
  const auto base = synthetic_base_vocab(spec);
  const std::set<std::string> base_set(base.begin(), base.end());
  std::map<std::string, std::string> owner;
  for (const auto& [style, lex] : spec.style_lexicons) {
    if (lex.empty()) throw ConfigError("style '" + style + "' has an empty lexicon");
    for (const auto& tok : lex) {
      if (base_set.count(tok)) throw ConfigError("style token '" + tok + "' also occurs in the base vocabulary");
      auto [it, inserted] = owner.emplace(tok, style);
      if (!inserted && it->second != style)
        throw ConfigError("style lexicons of '" + it->second + "' and '" + style + "' share token '" + tok + "'");
    }
  }
}

struct SyntheticCorpus {
  std::vector<StoryRecord> stories;
  std::vector<StyleCaption> captions;
};

inline SyntheticCorpus generate_synthetic(const SyntheticSpec& spec) {
  validate_synthetic_spec(spec);
  Rng rng(spec.seed);
  const auto pick = [&rng](const std::vector<std::string>& v) -> const std::string& { return v[rng.below(v.size())]; };
  SyntheticCorpus out;
  out.stories.reserve(spec.n_stories);
  for (std::size_t i = 0; i < spec.n_stories; ++i) {
    const std::string& name = pick(spec.names);
    const SyntheticTopic& t = spec.topics[rng.below(spec.topics.size())];
    StoryRecord r;
    r.sentences[0] = name + " wanted to " + t.verb + " the " + t.noun + " .";
    r.sentences[1] = name + " went to the " + t.place + " .";
    r.sentences[2] = "the " + t.noun + " was " + pick(spec.adjectives) + " .";
    std::string s4 = name + " worked on it";
    const std::size_t nfill = spec.min_filler + rng.below(spec.max_filler - spec.min_filler + 1);
    for (std::size_t k = 0; k < nfill; ++k) s4 += " " + pick(spec.fillers);
    r.sentences[3] = s4 + " .";
    r.sentences[4] = name + " " + pick(t.ending_phrases) + " the " + t.noun + " .";
    out.stories.push_back(std::move(r));
  }
  for (const auto& [style, lex] : spec.style_lexicons) {
    for (std::size_t i = 0; i < spec.n_captions_per_style; ++i) {
      const SyntheticTopic& t = spec.topics[rng.below(spec.topics.size())];
      std::string text;
      if (rng.uniform() < spec.story_like_caption_fraction) {
        text = pick(spec.names) + " " + pick(t.ending_phrases) + " the " + pick(lex) + " " + t.noun + " .";
      } else {
        text = "what a " + pick(lex) + " " + t.noun + " , so " + pick(lex) + " .";
      }
      out.captions.push_back({std::move(text), style});
    }
  }
  return out;
}

inline void to_json(nlohmann::json& j, const SyntheticTopic& t) {
  j = {{"noun", t.noun}, {"place", t.place}, {"verb", t.verb}, {"ending_phrases", t.ending_phrases}};
}

inline void from_json(const nlohmann::json& j, SyntheticTopic& t) {
  t.noun = j.at("noun").get<std::string>();
  t.place = j.at("place").get<std::string>();
  t.verb = j.at("verb").get<std::string>();
  t.ending_phrases = j.at("ending_phrases").get<std::vector<std::string>>();
  if (t.ending_phrases.empty()) throw ConfigError("synthetic topic '" + t.noun + "' needs ending phrases");
}

inline void to_json(nlohmann::json& j, const SyntheticSpec& s) {
  j = {{"seed", s.seed},
       {"n_stories", s.n_stories},
       {"n_captions_per_style", s.n_captions_per_style},
       {"style_lexicons", s.style_lexicons},
       {"names", s.names},
       {"topics", s.topics},
       {"adjectives", s.adjectives},
       {"fillers", s.fillers},
       {"min_filler", s.min_filler},
       {"max_filler", s.max_filler},
       {"story_like_caption_fraction", s.story_like_caption_fraction}};
}

inline void from_json(const nlohmann::json& j, SyntheticSpec& s) {
  s.seed = j.at("seed").get<std::uint64_t>();
  s.n_stories = j.at("n_stories").get<std::size_t>();
  s.n_captions_per_style = j.at("n_captions_per_style").get<std::size_t>();
  s.style_lexicons = j.at("style_lexicons").get<std::map<std::string, std::vector<std::string>>>();
  s.names = j.at("names").get<std::vector<std::string>>();
  s.topics = j.at("topics").get<std::vector<SyntheticTopic>>();
  s.adjectives = j.at("adjectives").get<std::vector<std::string>>();
  s.fillers = j.at("fillers").get<std::vector<std::string>>();
  s.min_filler = j.at("min_filler").get<std::size_t>();
  s.max_filler = j.at("max_filler").get<std::size_t>();
  s.story_like_caption_fraction = j.at("story_like_caption_fraction").get<double>();
}

// The bundled desk-scale lexicon: 12 names, 8 topics, 9 personas.
inline SyntheticSpec default_synthetic_spec(std::uint64_t seed = 7) {
  SyntheticSpec s;
  s.seed = seed;
  s.names = {"tom", "anna", "mike", "lucy", "john", "emma", "paul", "kate", "sam", "nina", "jack", "mia"};
  s.topics = {
      {"car", "garage", "fix", {"finally fixed", "proudly drove"}},
      {"cake", "kitchen", "bake", {"happily baked", "shared"}},
      {"dog", "park", "walk", {"happily walked", "played with"}},
      {"song", "studio", "record", {"finally recorded", "sang"}},
      {"garden", "yard", "plant", {"finally planted", "watered"}},
      {"boat", "lake", "sail", {"proudly sailed", "rowed"}},
      {"book", "library", "read", {"finally read", "enjoyed"}},
      {"bike", "shop", "ride", {"happily rode", "cleaned"}},
  };
  s.adjectives = {"old", "big", "new", "small", "red", "heavy"};
  s.fillers = {"all", "day", "for", "hours", "again"};
  s.style_lexicons = {
      {"gloomy", {"gloomy", "dreary", "bleak"}},
      {"irritable", {"annoying", "rotten", "awful"}},
      {"fatalistic", {"doomed", "hopeless", "ruined"}},
      {"arrogant", {"pathetic", "inferior", "worthless"}},
      {"boyish", {"stinky", "yucky", "gross"}},
      {"peaceful", {"calm", "serene", "gentle"}},
      {"questioning", {"doubtful", "dubious", "questionable"}},
      {"money-minded", {"costly", "pricey", "profitable"}},
      {"intelligent", {"clever", "insightful", "brilliant"}},
  };
  return s;
}

inline StyleGrouping default_grouping() {
  return {{"negative", {"arrogant", "boyish", "irritable", "gloomy", "fatalistic"}}};
}

// ---------------------------------------------------------------------------
// Splits

template <class T>
struct Splits {
  std::vector<T> train;
  std::vector<T> val;
  std::vector<T> test;
};

template <class T>
Splits<T> make_splits(const std::vector<T>& items, std::array<double, 3> ratios, std::uint64_t seed) {
  for (double r : ratios)
    if (r < 0.0) throw ConfigError("split ratios must be non-negative");
  if (std::abs(ratios[0] + ratios[1] + ratios[2] - 1.0) > 1e-9) throw ConfigError("split ratios must sum to 1");
  std::vector<std::size_t> order(items.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(seed);
  rng.shuffle(order.begin(), order.end());
  const std::size_t n = items.size();
  const auto n_train = static_cast<std::size_t>(std::floor(ratios[0] * static_cast<double>(n) + 1e-9));
  const auto n_val = std::min(n - n_train, static_cast<std::size_t>(std::floor(ratios[1] * static_cast<double>(n) + 1e-9)));
  Splits<T> s;
  for (std::size_t i = 0; i < n; ++i) {
    const T& item = items[order[i]];
    if (i < n_train)
      s.train.push_back(item);
    else if (i < n_train + n_val)
      s.val.push_back(item);
    else
      s.test.push_back(item);
  }
  return s;
}

}  // namespace stlr
