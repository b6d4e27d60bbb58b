#pragma once

// Experiment orchestration: strict experiment configs with named profiles,
// the staged pipeline behind `stlr run` (with a resumable manifest), and the
// compare / plot-data bundles.

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <set>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "stlr/adapters.hpp"
#include "stlr/corpus.hpp"
#include "stlr/decoding.hpp"
#include "stlr/discbase.hpp"
#include "stlr/judges.hpp"
#include "stlr/metrics.hpp"
#include "stlr/seq2seq.hpp"
#include "stlr/trainer.hpp"

namespace stlr {

// ---------------------------------------------------------------------------
// Config

struct DataConfig {
  std::string source = "synthetic";  // "synthetic" or "files"
  SyntheticSpec synthetic = default_synthetic_spec();
  std::string stories;  // files mode
  std::string story_format = "jsonl";
  std::string captions;  // files mode, JSONL {"text", "persona"}
  StyleGrouping grouping = default_grouping();
  std::string style = "negative";
  std::vector<double> story_splits{0.7, 0.1, 0.2};
  double caption_val_fraction = 0.1;
  std::size_t vocab_min_freq = 1;
  std::size_t vocab_max_size = 512;

  void validate() const {
    if (source != "synthetic" && source != "files") throw ConfigError("data.source must be 'synthetic' or 'files'");
    if (source == "files") {
      if (stories.empty() || captions.empty()) throw ConfigError("data: files mode needs 'stories' and 'captions'");
      parse_story_format(story_format);
    } else {
      validate_synthetic_spec(synthetic);
      if (synthetic.n_stories < 20) throw ConfigError("data.synthetic: n_stories must be >= 20");
    }
    if (!grouping.count(style)) throw ConfigError("data.style '" + style + "' is not a group in data.grouping");
    if (story_splits.size() != 3) throw ConfigError("data.story_splits needs three ratios (train, val, test)");
    if (story_splits[0] <= 0.0 || story_splits[1] <= 0.0 || story_splits[2] <= 0.0)
      throw ConfigError("data.story_splits: every split must be non-empty");
    if (std::abs(story_splits[0] + story_splits[1] + story_splits[2] - 1.0) > 1e-9)
      throw ConfigError("data.story_splits must sum to 1");
    if (caption_val_fraction <= 0.0 || caption_val_fraction >= 1.0)
      throw ConfigError("data.caption_val_fraction must be in (0,1)");
    if (vocab_min_freq == 0 || vocab_max_size <= kNumSpecials) throw ConfigError("data: invalid vocabulary limits");
  }
};

inline void to_json(nlohmann::json& j, const DataConfig& c) {
  j = {{"source", c.source},
       {"synthetic", c.synthetic},
       {"stories", c.stories},
       {"story_format", c.story_format},
       {"captions", c.captions},
       {"grouping", c.grouping},
       {"style", c.style},
       {"story_splits", c.story_splits},
       {"caption_val_fraction", c.caption_val_fraction},
       {"vocab_min_freq", c.vocab_min_freq},
       {"vocab_max_size", c.vocab_max_size}};
}

inline void from_json(const nlohmann::json& j, DataConfig& c) {
  c.source = j.at("source").get<std::string>();
  c.synthetic = j.at("synthetic").get<SyntheticSpec>();
  c.stories = j.at("stories").get<std::string>();
  c.story_format = j.at("story_format").get<std::string>();
  c.captions = j.at("captions").get<std::string>();
  c.grouping = j.at("grouping").get<StyleGrouping>();
  c.style = j.at("style").get<std::string>();
  c.story_splits = j.at("story_splits").get<std::vector<double>>();
  c.caption_val_fraction = j.at("caption_val_fraction").get<double>();
  c.vocab_min_freq = j.at("vocab_min_freq").get<std::size_t>();
  c.vocab_max_size = j.at("vocab_max_size").get<std::size_t>();
}

struct JudgesConfig {
  JudgeConfig style;
  JudgeConfig cloze;
};

inline void to_json(nlohmann::json& j, const JudgesConfig& c) { j = {{"style", c.style}, {"cloze", c.cloze}}; }

inline void from_json(const nlohmann::json& j, JudgesConfig& c) {
  c.style = j.at("style").get<JudgeConfig>();
  c.cloze = j.at("cloze").get<JudgeConfig>();
}

struct BaselinesConfig {
  bool fusion = true;  // S2S+LM with the phase-2 model as the style LM
  double fusion_lambda = 1.0;
  bool disc = true;
  TextCNNConfig disc_cnn;
  ClassifierTrainConfig disc_train;
  DiscBaselineConfig disc_baseline;
};

inline void to_json(nlohmann::json& j, const BaselinesConfig& c) {
  j = {{"fusion", c.fusion},     {"fusion_lambda", c.fusion_lambda}, {"disc", c.disc},
       {"disc_cnn", c.disc_cnn}, {"disc_train", c.disc_train},       {"disc_baseline", c.disc_baseline}};
}

inline void from_json(const nlohmann::json& j, BaselinesConfig& c) {
  c.fusion = j.at("fusion").get<bool>();
  c.fusion_lambda = j.at("fusion_lambda").get<double>();
  c.disc = j.at("disc").get<bool>();
  c.disc_cnn = j.at("disc_cnn").get<TextCNNConfig>();
  c.disc_train = j.at("disc_train").get<ClassifierTrainConfig>();
  c.disc_baseline = j.at("disc_baseline").get<DiscBaselineConfig>();
}

struct ExperimentConfig {
  std::string name = "experiment";
  std::string profile = "desk";
  std::uint64_t seed = 1;  // every other seed is derived from this one
  DataConfig data;
  ModelConfig model;  // vocab_size 0 = taken from the prepared vocabulary
  AdapterConfig adapter;
  PhasePlan phase1 = PhasePlan::defaults(1);
  PhasePlan phase2 = PhasePlan::defaults(2);
  PhasePlan phase3 = PhasePlan::defaults(3);
  std::size_t forgetting_multiplier = 5;  // extended phase-3 budget for the forgetting curve
  DecodeSettings decode;
  JudgesConfig judges;
  BaselinesConfig baselines;

  void validate() const {
    if (name.empty()) throw ConfigError("experiment name must not be empty");
    data.validate();
    ModelConfig mc = model;
    if (mc.vocab_size == 0) mc.vocab_size = data.vocab_max_size;
    mc.validate();
    validate_adapter_config(mc, adapter);
    phase1.validate();
    phase2.validate();
    phase3.validate();
    if (phase1.phase_id != 1 || phase2.phase_id != 2 || phase3.phase_id != 3)
      throw ConfigError("phase1/phase2/phase3 must carry phase ids 1, 2 and 3");
    if (forgetting_multiplier < 1) throw ConfigError("forgetting_multiplier must be >= 1");
    decode.validate();
    judges.style.validate();
    judges.cloze.validate();
    if (baselines.fusion_lambda < 0.0) throw ConfigError("baselines.fusion_lambda must be >= 0");
    baselines.disc_train.validate();
    baselines.disc_baseline.validate();
  }
};

inline void to_json(nlohmann::json& j, const ExperimentConfig& c) {
  j = {{"name", c.name},
       {"profile", c.profile},
       {"seed", c.seed},
       {"data", c.data},
       {"model", c.model},
       {"adapter", c.adapter},
       {"phase1", c.phase1},
       {"phase2", c.phase2},
       {"phase3", c.phase3},
       {"forgetting_multiplier", c.forgetting_multiplier},
       {"decode", c.decode},
       {"judges", c.judges},
       {"baselines", c.baselines}};
}

inline void from_json(const nlohmann::json& j, ExperimentConfig& c) {
  c.name = j.at("name").get<std::string>();
  c.profile = j.at("profile").get<std::string>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.data = j.at("data").get<DataConfig>();
  c.model = j.at("model").get<ModelConfig>();
  c.adapter = j.at("adapter").get<AdapterConfig>();
  c.phase1 = j.at("phase1").get<PhasePlan>();
  c.phase2 = j.at("phase2").get<PhasePlan>();
  c.phase3 = j.at("phase3").get<PhasePlan>();
  c.forgetting_multiplier = j.at("forgetting_multiplier").get<std::size_t>();
  c.decode = j.at("decode").get<DecodeSettings>();
  c.judges = j.at("judges").get<JudgesConfig>();
  c.baselines = j.at("baselines").get<BaselinesConfig>();
}

// Overwrites every nested seed from the top-level one. Seeds that feed
// independent streams reuse it directly; the rest are derived.
inline void apply_seeds(ExperimentConfig& c) {
  const std::uint64_t s = c.seed;
  c.data.synthetic.seed = s;
  c.model.seed = derive_seed(s, 3);
  c.phase1.seed = c.phase2.seed = c.phase3.seed = s;
  c.decode.seed = s;
  c.judges.style.cnn.seed = c.judges.style.train.seed = s;
  c.judges.cloze.cnn.seed = c.judges.cloze.train.seed = s;
  c.baselines.disc_cnn.seed = c.baselines.disc_train.seed = derive_seed(s, 11);
  c.baselines.disc_baseline.seed = derive_seed(s, 12);
}

inline std::uint64_t story_split_seed(const ExperimentConfig& c) { return derive_seed(c.seed, 1); }
inline std::uint64_t caption_split_seed(const ExperimentConfig& c) { return derive_seed(c.seed, 2); }

// Desk scale: small enough that the whole pipeline runs in a few minutes on
// one CPU core. Paper scale: BERT/GPT-2-base sized model, lr 5e-5, batch 16,
// 3 epochs / plateau / 1 epoch, adapter reduction factor 16.
inline ExperimentConfig profile_config(const std::string& profile) {
  ExperimentConfig c;
  c.profile = profile;
  if (profile == "desk") {
    c.data.synthetic.n_stories = 1500;
    c.data.synthetic.n_captions_per_style = 150;
    c.data.synthetic.story_like_caption_fraction = 0.7;
    c.model.d_model = 64;
    c.model.n_enc_layers = 2;
    c.model.n_dec_layers = 2;
    c.model.n_heads = 2;
    c.model.ffn_dim = 128;
    c.model.max_positions = 64;
    c.adapter.bottleneck = 32;
    c.phase1.epochs = 2;
    c.phase1.adam.lr = 3e-3;
    c.phase2.epochs = 20;
    c.phase2.adam.lr = 2e-2;
    c.phase3.max_steps = 200;
    c.phase3.adam.lr = 5e-4;
    c.decode.max_new_tokens = 16;
    for (JudgeConfig* jc : {&c.judges.style, &c.judges.cloze}) {
      jc->train.lr = 5e-3;
      jc->train.epochs = 8;
    }
    c.judges.cloze.train.epochs = 12;
    c.judges.cloze.corrupted_negatives = 1.0;
    c.baselines.disc_cnn.embed_dim = 16;
    c.baselines.disc_train.lr = 5e-3;
    c.baselines.disc_baseline.steps = 100;
    c.baselines.disc_baseline.lr = 1e-3;
  } else if (profile == "paper") {
    c.data.vocab_max_size = 50000;
    c.model.d_model = 768;
    c.model.n_enc_layers = 12;
    c.model.n_dec_layers = 12;
    c.model.n_heads = 12;
    c.model.ffn_dim = 3072;
    c.model.max_positions = 512;
    c.model.dropout = 0.1;
    c.adapter.bottleneck = 48;
    for (PhasePlan* p : {&c.phase1, &c.phase2, &c.phase3}) {
      p->max_source_len = 512;
      p->max_target_len = 128;
    }
    c.decode.max_source_len = 512;
  } else {
    throw ConfigError("unknown profile '" + profile + "' (expected desk or paper)");
  }
  apply_seeds(c);
  return c;
}

namespace detail {

inline bool free_form_key(const std::string& path) {
  return path == "/data/synthetic/style_lexicons" || path == "/data/grouping";
}

inline const char* json_kind(const nlohmann::json& v) {
  if (v.is_object()) return "object";
  if (v.is_array()) return "array";
  if (v.is_string()) return "string";
  if (v.is_boolean()) return "boolean";
  if (v.is_number()) return "number";
  return "null";
}

// Merges `over` into `base`, rejecting keys that `base` does not have.
inline void merge_strict(nlohmann::json& base, const nlohmann::json& over, const std::string& path,
                         std::vector<std::pair<std::string, nlohmann::json>>& nested_seeds) {
  if (!over.is_object()) throw ConfigError("config" + path + ": expected an object");
  for (auto it = over.begin(); it != over.end(); ++it) {
    const std::string p = path + "/" + it.key();
    if (!base.contains(it.key())) throw ConfigError("unknown config key '" + p + "'");
    nlohmann::json& slot = base[it.key()];
    if (std::string(json_kind(slot)) != json_kind(it.value()))
      throw ConfigError("config key '" + p + "' must be " + json_kind(slot));
    if (!path.empty() && it.key() == "seed") nested_seeds.emplace_back(p, it.value());
    if (slot.is_object() && !free_form_key(p))
      merge_strict(slot, it.value(), p, nested_seeds);
    else
      slot = it.value();
  }
}

}  // namespace detail

// Parses a user config: profile defaults first, then the file's keys on top.
// Unknown keys are rejected. Nested seed fields are accepted only when they
// equal the value derived from the top-level seed.
inline ExperimentConfig experiment_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("experiment config must be a JSON object");
  const std::string profile = j.contains("profile") && j["profile"].is_string() ? j["profile"].get<std::string>() : "desk";
  nlohmann::json merged = profile_config(profile);
  std::vector<std::pair<std::string, nlohmann::json>> nested_seeds;
  detail::merge_strict(merged, j, "", nested_seeds);
  ExperimentConfig c;
  try {
    c = merged.get<ExperimentConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("experiment config: ") + e.what());
  }
  apply_seeds(c);
  const nlohmann::json derived = c;
  for (const auto& [path, value] : nested_seeds)
    if (derived.at(nlohmann::json::json_pointer(path)) != value)
      throw ConfigError("config key '" + path + "': nested seeds are derived from the top-level seed");
  c.validate();
  return c;
}

// Relative corpus paths are resolved against the config file's directory.
inline ExperimentConfig load_experiment_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config '" + path + "': " + e.what());
  }
  ExperimentConfig c = experiment_config_from_json(j);
  const auto base = std::filesystem::path(path).parent_path();
  for (std::string* p : {&c.data.stories, &c.data.captions})
    if (!p->empty() && std::filesystem::path(*p).is_relative()) *p = (base / *p).lexically_normal().string();
  return c;
}

inline std::string json_hash(const nlohmann::json& j) {
  Fnv1a h;
  h.update(j.dump());
  return h.hex();
}

inline std::string config_hash(const ExperimentConfig& c) { return json_hash(nlohmann::json(c)); }

inline bool reference_mode() {
  const char* v = std::getenv("STLR_REFERENCE_MODE");
  return v && std::string(v) == "1";
}

// ---------------------------------------------------------------------------
// Prepared data

struct PreparedData {
  Vocabulary vocab;
  Splits<StoryExample> stories;
  std::vector<StyleCaption> style_train;  // captions of the target style
  std::vector<StyleCaption> style_val;
  std::vector<StyleCaption> other_captions;  // personas outside the target style
  std::size_t dropped_captions = 0;          // personas in no group
};

inline PreparedData prepare_data(const ExperimentConfig& c) {
  std::vector<StoryRecord> records;
  std::vector<StyleCaption> raw;
  if (c.data.source == "synthetic") {
    auto syn = generate_synthetic(c.data.synthetic);
    records = std::move(syn.stories);
    raw = std::move(syn.captions);
  } else {
    records = load_story_corpus(c.data.stories, parse_story_format(c.data.story_format));
    auto in = detail::open_input(c.data.captions);
    raw = parse_caption_jsonl(in);
  }
  if (records.size() < 20) throw DataError("story corpus has fewer than 20 stories");
  const auto grouped = group_captions(raw, c.data.grouping);
  const auto& members = c.data.grouping.at(c.data.style);
  const std::set<std::string> own(members.begin(), members.end());
  PreparedData d;
  std::vector<StyleCaption> styled;
  for (const auto& cap : grouped.captions)
    if (cap.style == c.data.style) styled.push_back(cap);
  for (const auto& cap : raw)
    if (!own.count(cap.style)) d.other_captions.push_back(cap);
  d.dropped_captions = grouped.dropped;
  if (styled.size() < 20) throw DataError("style '" + c.data.style + "' has fewer than 20 captions");

  std::vector<std::string> texts;
  for (const auto& r : records)
    for (const auto& s : r.sentences) texts.push_back(s);
  for (const auto& cap : raw) texts.push_back(cap.text);
  d.vocab = build_vocab(texts, c.data.vocab_min_freq, c.data.vocab_max_size);

  const auto& r = c.data.story_splits;
  d.stories = make_splits(split_stories(records), {r[0], r[1], r[2]}, story_split_seed(c));
  const auto cs = make_splits(styled, {1.0 - c.data.caption_val_fraction, c.data.caption_val_fraction, 0.0},
                              caption_split_seed(c));
  d.style_train = cs.train;
  d.style_val = cs.val;
  if (d.stories.train.empty() || d.stories.val.empty() || d.stories.test.empty() || d.style_val.empty())
    throw DataError("a data split came out empty; use more data or larger ratios");
  return d;
}

namespace detail {

inline void write_examples(const std::filesystem::path& p, const std::vector<StoryExample>& xs) {
  std::vector<StoryRecord> rs;
  for (const auto& x : xs) rs.push_back(join_story(x));
  write_story_corpus(p.string(), rs);
}

inline std::vector<StyleCaption> read_captions(const std::filesystem::path& p) {
  auto in = open_input(p.string());
  return parse_caption_jsonl(in);
}

}  // namespace detail

inline void save_prepared(const std::string& dir, const PreparedData& d) {
  namespace fs = std::filesystem;
  const fs::path p(dir);
  fs::create_directories(p);
  d.vocab.save((p / "vocab.json").string());
  detail::write_examples(p / "stories_train.jsonl", d.stories.train);
  detail::write_examples(p / "stories_val.jsonl", d.stories.val);
  detail::write_examples(p / "stories_test.jsonl", d.stories.test);
  write_captions((p / "style_train.jsonl").string(), d.style_train);
  write_captions((p / "style_val.jsonl").string(), d.style_val);
  write_captions((p / "other_captions.jsonl").string(), d.other_captions);
  const nlohmann::json summary = {{"vocab_size", d.vocab.size()},
                                  {"stories", {d.stories.train.size(), d.stories.val.size(), d.stories.test.size()}},
                                  {"style_captions", {d.style_train.size(), d.style_val.size()}},
                                  {"other_captions", d.other_captions.size()},
                                  {"dropped_captions", d.dropped_captions}};
  detail::write_text_file(p / "summary.json", summary.dump(2) + "\n");
}

inline PreparedData load_prepared(const std::string& dir) {
  namespace fs = std::filesystem;
  const fs::path p(dir);
  PreparedData d;
  d.vocab = Vocabulary::load((p / "vocab.json").string());
  const auto stories = [&](const char* f) { return split_stories(load_story_corpus((p / f).string(), StoryFormat::jsonl)); };
  d.stories.train = stories("stories_train.jsonl");
  d.stories.val = stories("stories_val.jsonl");
  d.stories.test = stories("stories_test.jsonl");
  d.style_train = detail::read_captions(p / "style_train.jsonl");
  d.style_val = detail::read_captions(p / "style_val.jsonl");
  d.other_captions = detail::read_captions(p / "other_captions.jsonl");
  return d;
}

inline std::vector<std::string> caption_texts(const std::vector<StyleCaption>& cs) {
  std::vector<std::string> out;
  for (const auto& c : cs) out.push_back(c.text);
  return out;
}

inline std::vector<std::string> endings_of(const std::vector<StoryExample>& xs) {
  std::vector<std::string> out;
  for (const auto& x : xs) out.push_back(x.ending);
  return out;
}

// ---------------------------------------------------------------------------
// Judges

struct TrainedJudges {
  StyleJudge style;
  ClozeJudge cloze;
  nlohmann::json metrics;
};

// Style judge: target-style captions against the other personas' captions
// and training story endings. Cloze judge: training stories against
// mismatched (and optionally corrupted) endings.
inline TrainedJudges train_judges(const PreparedData& d, const ExperimentConfig& c) {
  std::vector<StyleCaption> pos = d.style_train;
  pos.insert(pos.end(), d.style_val.begin(), d.style_val.end());
  std::vector<std::string> neg = caption_texts(d.other_captions);
  for (const auto& x : d.stories.train) neg.push_back(x.ending);
  auto [sj, st] = train_style_judge(d.vocab, pos, neg, c.data.style, c.judges.style);
  auto [cj, ct] = train_cloze_judge(d.vocab, d.stories.train, c.judges.cloze, c.seed);
  const auto m = [](const JudgeTraining& t) {
    return nlohmann::json{{"train_accuracy", nullable(t.metrics.train_accuracy)},
                          {"heldout_accuracy", nullable(t.metrics.heldout_accuracy)},
                          {"n_train", t.metrics.n_train},
                          {"n_heldout", t.metrics.n_heldout},
                          {"warnings", t.warnings}};
  };
  return {std::move(sj), std::move(cj), {{"style", m(st)}, {"cloze", m(ct)}}};
}

// ---------------------------------------------------------------------------
// Forgetting monitor

struct ForgettingPoint {
  std::size_t step = 0;
  double ris = 0.0;
};

// RIS of the endings each snapshot generates for the given contexts.
inline std::vector<ForgettingPoint> monitor_forgetting(const std::vector<std::pair<std::size_t, Model<float>>>& snapshots,
                                                       const StyleJudge* judge, const Vocabulary& v,
                                                       const std::vector<StoryExample>& contexts,
                                                       const DecodeSettings& s) {
  if (!judge) throw ConfigError("forgetting monitor needs a style judge");
  if (snapshots.size() < 2) throw DataError("forgetting monitor needs at least 2 snapshots");
  const auto ids = encode_contexts_examples(v, contexts);
  std::vector<ForgettingPoint> out;
  for (const auto& [step, m] : snapshots) out.push_back({step, ris(generate_endings(m, v, ids, s), *judge)});
  return out;
}

inline std::string forgetting_csv(const std::vector<ForgettingPoint>& pts) {
  std::ostringstream os;
  os << "step,ris\n";
  for (const auto& p : pts) os << p.step << ',' << format_metric(p.ris) << '\n';
  return os.str();
}

// ---------------------------------------------------------------------------
// Experiment directory

inline const std::vector<std::string>& stage_names() {
  static const std::vector<std::string> s{"prepare", "phase1",   "phase2",   "phase3",
                                          "baselines", "judges", "evaluate", "report"};
  return s;
}

// Files and directories a stage owns inside the experiment directory.
inline std::vector<std::string> stage_outputs(const std::string& stage) {
  if (stage == "prepare") return {"data"};
  if (stage == "phase1" || stage == "phase2") return {stage};
  if (stage == "phase3") return {"phase3", "snapshots"};
  if (stage == "baselines") return {"baselines"};
  if (stage == "judges") return {"judges"};
  if (stage == "evaluate") return {"eval", "forgetting.csv"};
  if (stage == "report") return {"report.json", "table.csv", "table.md"};
  throw ConfigError("unknown stage '" + stage + "'");
}

// Hash of everything a stage's outputs depend on, upstream stages included.
inline std::string stage_key(const ExperimentConfig& c, const std::string& stage) {
  const nlohmann::json j = c;
  nlohmann::json k{{"stage", stage}, {"seed", j["seed"]}, {"data", j["data"]}};
  const auto add = [&](std::initializer_list<const char*> keys) {
    for (const char* key : keys) k[key] = j[key];
  };
  if (stage == "prepare") {
  } else if (stage == "phase1") {
    add({"model", "phase1"});
  } else if (stage == "phase2") {
    add({"model", "phase1", "adapter", "phase2"});
  } else if (stage == "phase3") {
    add({"model", "phase1", "adapter", "phase2", "phase3", "forgetting_multiplier"});
  } else if (stage == "baselines") {
    add({"model", "phase1", "baselines"});
  } else if (stage == "judges") {
    add({"judges"});
  } else if (stage == "evaluate" || stage == "report") {
    k = j;
    k["stage"] = stage;
  } else {
    throw ConfigError("unknown stage '" + stage + "'");
  }
  return json_hash(k);
}

struct ExperimentPaths {
  std::filesystem::path root;
  std::filesystem::path operator/(const std::string& rel) const { return root / rel; }
  std::string str(const std::string& rel) const { return (root / rel).string(); }
};

struct Manifest {
  std::string config_hash;
  nlohmann::json config;
  std::map<std::string, std::string> done;  // stage -> stage key
  nlohmann::json artifacts = nlohmann::json::object();

  nlohmann::json to_json() const {
    nlohmann::json stages = nlohmann::json::object();
    for (const auto& [s, k] : done) stages[s] = {{"key", k}};
    return {{"format", "stlr-experiment"}, {"config_hash", config_hash}, {"config", config},
            {"stages", stages},            {"artifacts", artifacts}};
  }

  static Manifest from_json(const nlohmann::json& j) {
    if (j.value("format", "") != "stlr-experiment") throw DataError("not an stlr experiment manifest");
    Manifest m;
    m.config_hash = j.at("config_hash").get<std::string>();
    m.config = j.at("config");
    for (const auto& [s, v] : j.at("stages").items()) m.done[s] = v.at("key").get<std::string>();
    m.artifacts = j.value("artifacts", nlohmann::json::object());
    return m;
  }
};

inline std::optional<Manifest> read_manifest(const std::string& dir) {
  const auto p = std::filesystem::path(dir) / "manifest.json";
  if (!std::filesystem::exists(p)) return std::nullopt;
  try {
    return Manifest::from_json(nlohmann::json::parse(detail::read_text_file(p)));
  } catch (const nlohmann::json::exception& e) {
    throw DataError("manifest '" + p.string() + "': " + e.what());
  }
}

inline void write_manifest(const std::string& dir, const Manifest& m) {
  const auto p = std::filesystem::path(dir) / "manifest.json";
  const auto tmp = std::filesystem::path(dir) / "manifest.json.tmp";
  detail::write_text_file(tmp, m.to_json().dump(2) + "\n");
  std::filesystem::rename(tmp, p);
}

// ---------------------------------------------------------------------------
// Stages

namespace detail {

inline void log_line(std::ostream* log, const std::string& s) {
  if (log) *log << s << std::endl;
}

inline PhaseHooks logging_hooks(std::ostream* log, const std::string& phase) {
  PhaseHooks h;
  if (log)
    h.on_eval = [log, phase](const LossRecord& r) {
      *log << "  " << phase << " step " << r.step << " val_loss " << std::fixed << std::setprecision(4) << r.val_loss
           << std::defaultfloat << std::endl;
    };
  return h;
}

inline std::string snapshot_dir_name(std::size_t step) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "step_%06zu", step);
  return buf;
}

inline Model<float> load_phase1(const ExperimentPaths& p) { return load_checkpoint(p.str("phase1/model")); }

inline std::vector<std::pair<std::size_t, Model<float>>> load_snapshots(const ExperimentPaths& p, const Model<float>& base) {
  const auto idx_path = p / "snapshots/index.json";
  if (!std::filesystem::exists(idx_path))
    throw DataError("no phase-3 snapshots in '" + p.root.string() + "' (run the phase3 stage first)");
  const auto idx = nlohmann::json::parse(read_text_file(idx_path));
  std::vector<std::pair<std::size_t, Model<float>>> out;
  for (const auto& s : idx.at("steps")) {
    const auto step = s.get<std::size_t>();
    const auto dir = p / ("snapshots/" + snapshot_dir_name(step));
    if (!std::filesystem::exists(dir)) throw DataError("snapshot '" + dir.string() + "' is missing");
    out.emplace_back(step, attach_adapter_sidecar(base, dir.string()));
  }
  if (out.empty()) throw DataError("snapshot index in '" + p.root.string() + "' lists no snapshots");
  return out;
}

}  // namespace detail

inline void stage_prepare(const ExperimentConfig& c, const ExperimentPaths& p, std::ostream* log) {
  const PreparedData d = prepare_data(c);
  save_prepared(p.str("data"), d);
  detail::log_line(log, "  vocab " + std::to_string(d.vocab.size()) + ", stories " +
                            std::to_string(d.stories.train.size()) + "/" + std::to_string(d.stories.val.size()) + "/" +
                            std::to_string(d.stories.test.size()) + ", style captions " +
                            std::to_string(d.style_train.size() + d.style_val.size()));
}

inline ModelConfig resolved_model_config(const ExperimentConfig& c, const Vocabulary& v) {
  ModelConfig mc = c.model;
  if (mc.vocab_size != 0 && mc.vocab_size != v.size())
    throw ConfigError("model.vocab_size " + std::to_string(mc.vocab_size) + " does not match the vocabulary (" +
                      std::to_string(v.size()) + ")");
  mc.vocab_size = v.size();
  return mc;
}

inline void stage_phase1(const ExperimentConfig& c, const ExperimentPaths& p, std::ostream* log) {
  const PreparedData d = load_prepared(p.str("data"));
  const auto r = run_phase1(c.phase1, init_model(resolved_model_config(c, d.vocab)),
                            encode_story_pairs(d.vocab, d.stories.train), encode_story_pairs(d.vocab, d.stories.val),
                            detail::logging_hooks(log, "phase1"));
  save_checkpoint(p.str("phase1/model"), r.model, &d.vocab);
  write_loss_csv(p.str("phase1/loss.csv"), r.history);
}

inline void stage_phase2(const ExperimentConfig& c, const ExperimentPaths& p, std::ostream* log) {
  const PreparedData d = load_prepared(p.str("data"));
  const auto r = run_phase2(c.phase2, inject_adapters(detail::load_phase1(p), c.adapter),
                            encode_lm_pairs(d.vocab, caption_texts(d.style_train)),
                            encode_lm_pairs(d.vocab, caption_texts(d.style_val)), detail::logging_hooks(log, "phase2"));
  save_checkpoint(p.str("phase2/model"), r.model, &d.vocab);
  save_adapter_sidecar(p.str("phase2/adapter"), r.model);
  write_loss_csv(p.str("phase2/loss.csv"), r.history);
}

// Nominal phase 3, then the extended run whose snapshots feed the forgetting
// curve.
inline void stage_phase3(const ExperimentConfig& c, const ExperimentPaths& p, std::ostream* log) {
  const PreparedData d = load_prepared(p.str("data"));
  const Model<float> start = load_checkpoint(p.str("phase2/model"));
  const auto train = encode_story_pairs(d.vocab, d.stories.train);
  const auto val = encode_story_pairs(d.vocab, d.stories.val);
  const auto r = run_phase3(c.phase3, start, train, val, detail::logging_hooks(log, "phase3"));
  save_checkpoint(p.str("phase3/model"), r.model, &d.vocab);
  save_adapter_sidecar(p.str("phase3/adapter"), r.model);
  write_loss_csv(p.str("phase3/loss.csv"), r.history);

  PhasePlan ext = c.phase3;
  ext.epochs *= c.forgetting_multiplier;
  ext.max_steps *= c.forgetting_multiplier;
  std::vector<std::size_t> steps;
  PhaseHooks hooks;
  hooks.on_snapshot = [&](std::size_t step, const Model<float>& m) {
    save_adapter_sidecar(p.str("snapshots/" + detail::snapshot_dir_name(step)), m);
    steps.push_back(step);
  };
  const auto rx = run_phase3(ext, start, train, val, hooks);
  write_loss_csv(p.str("snapshots/loss.csv"), rx.history);
  const nlohmann::json idx = {{"nominal_steps", r.steps}, {"extended_steps", rx.steps},
                              {"multiplier", c.forgetting_multiplier}, {"steps", steps}};
  detail::write_text_file(p / "snapshots/index.json", idx.dump(2) + "\n");
  detail::log_line(log, "  phase3 " + std::to_string(r.steps) + " steps, extended " + std::to_string(rx.steps) +
                            " steps, " + std::to_string(steps.size()) + " snapshots");
}

inline void stage_baselines(const ExperimentConfig& c, const ExperimentPaths& p, std::ostream* log) {
  std::filesystem::create_directories(p / "baselines");
  nlohmann::json info = {{"fusion", c.baselines.fusion}, {"disc", c.baselines.disc}};
  if (c.baselines.disc) {
    const PreparedData d = load_prepared(p.str("data"));
    const auto disc = train_discriminator(d.vocab, caption_texts(d.style_train), endings_of(d.stories.train),
                                          c.baselines.disc_cnn, c.baselines.disc_train);
    save_textcnn(p.str("baselines/discriminator"), disc.model, "discriminator");
    const auto r = train_disc_baseline(detail::load_phase1(p), disc.model, encode_story_pairs(d.vocab, d.stories.train),
                                       c.baselines.disc_baseline);
    save_checkpoint(p.str("baselines/disc"), r.model, &d.vocab);
    std::ostringstream os;
    os << "step,loss,tf_loss,disc_loss\n" << std::setprecision(17);
    for (const auto& h : r.history) os << h.step << ',' << h.loss << ',' << h.tf_loss << ',' << h.disc_loss << '\n';
    detail::write_text_file(p / "baselines/disc_loss.csv", os.str());
    info["discriminator_heldout_accuracy"] = nullable(disc.metrics.heldout_accuracy);
    detail::log_line(log, "  discriminator held-out accuracy " + format_metric(disc.metrics.heldout_accuracy));
  }
  detail::write_text_file(p / "baselines/info.json", info.dump(2) + "\n");
}

inline void stage_judges(const ExperimentConfig& c, const ExperimentPaths& p, std::ostream* log) {
  const PreparedData d = load_prepared(p.str("data"));
  const TrainedJudges j = train_judges(d, c);
  save_style_judge(p.str("judges/style"), j.style);
  save_cloze_judge(p.str("judges/cloze"), j.cloze);
  detail::write_text_file(p / "judges/metrics.json", j.metrics.dump(2) + "\n");
  detail::log_line(log, "  judges: style held-out " + j.metrics["style"]["heldout_accuracy"].dump() + ", cloze held-out " +
                            j.metrics["cloze"]["heldout_accuracy"].dump());
}

// Model names in the order of the comparison table.
inline constexpr const char* kEncoderDecoder = "encoder-decoder";
inline constexpr const char* kFusion = "s2s+lm";
inline constexpr const char* kDisc = "disc";
inline constexpr const char* kStage2 = "stage2";
inline constexpr const char* kLLR = "llr";

inline void stage_evaluate(const ExperimentConfig& c, const ExperimentPaths& p, std::ostream* log) {
  namespace fs = std::filesystem;
  const PreparedData d = load_prepared(p.str("data"));
  const StyleJudge sj = load_style_judge(p.str("judges/style"));
  const ClozeJudge cj = load_cloze_judge(p.str("judges/cloze"));
  const std::string hash = config_hash(c);
  const auto& test = d.stories.test;
  const auto ids = encode_contexts_examples(d.vocab, test);
  std::vector<std::string> pool = endings_of(d.stories.val);
  for (const auto& e : endings_of(test)) pool.push_back(e);

  const Model<float> ed = detail::load_phase1(p);
  const Model<float> stage2 = load_checkpoint(p.str("phase2/model"));
  std::vector<std::pair<std::string, std::vector<std::string>>> outputs;
  outputs.emplace_back(kEncoderDecoder, generate_endings(ed, d.vocab, ids, c.decode));
  if (c.baselines.fusion) {
    std::vector<std::string> e;
    for (const auto& x : fusion_generate_ids(ed, stage2, ids, c.decode.max_new_tokens, c.baselines.fusion_lambda,
                                             c.decode.max_source_len, c.decode.chunk))
      e.push_back(decode(d.vocab, x));
    outputs.emplace_back(kFusion, std::move(e));
  }
  if (c.baselines.disc) outputs.emplace_back(kDisc, generate_endings(load_checkpoint(p.str("baselines/disc")), d.vocab, ids, c.decode));
  outputs.emplace_back(kStage2, generate_endings(stage2, d.vocab, ids, c.decode));
  outputs.emplace_back(kLLR, generate_endings(load_checkpoint(p.str("phase3/model")), d.vocab, ids, c.decode));

  fs::create_directories(p / "eval/endings");
  nlohmann::json reports = nlohmann::json::array();
  const auto& baseline = outputs.front().second;
  for (const auto& [name, endings] : outputs) {
    std::ostringstream os;
    for (const auto& e : endings) os << e << '\n';
    detail::write_text_file(p / ("eval/endings/" + name + ".txt"), os.str());
    ReportInputs in{name, test, endings, std::nullopt, pool, c.seed, hash};
    if (name != kEncoderDecoder) in.baseline_endings = baseline;
    reports.push_back(to_json(full_report(in, sj, cj)));
    detail::log_line(log, "  " + name + ": RIS " + format_metric(reports.back()["ris"].get<double>()) + ", BLEU/1 " +
                              format_metric(reports.back()["bleu1"].get<double>()));
  }
  detail::write_text_file(p / "eval/reports.json", reports.dump(2) + "\n");

  // Forgetting curve on the validation stories.
  auto snaps = detail::load_snapshots(p, ed);
  const auto curve = monitor_forgetting(snaps, &sj, d.vocab, d.stories.val, c.decode);
  const double nominal_ris = ris(generate_endings(load_checkpoint(p.str("phase3/model")), d.vocab,
                                                  encode_contexts_examples(d.vocab, d.stories.val), c.decode), sj);
  const auto idx = nlohmann::json::parse(detail::read_text_file(p / "snapshots/index.json"));
  nlohmann::json pts = nlohmann::json::array();
  for (const auto& pt : curve) pts.push_back({{"step", pt.step}, {"ris", pt.ris}});
  const nlohmann::json forgetting = {{"contexts", "val"},
                                     {"nominal_steps", idx.at("nominal_steps")},
                                     {"nominal_ris", nominal_ris},
                                     {"final_ris", curve.back().ris},
                                     {"points", pts}};
  detail::write_text_file(p / "eval/forgetting.json", forgetting.dump(2) + "\n");
  detail::write_text_file(p / "forgetting.csv", forgetting_csv(curve));
}

inline nlohmann::json assemble_report(const ExperimentConfig& c, const ExperimentPaths& p) {
  return {{"experiment", c.name},
          {"config_hash", config_hash(c)},
          {"seed", c.seed},
          {"adapter_variant", to_string(c.adapter.variant)},
          {"reports", nlohmann::json::parse(detail::read_text_file(p / "eval/reports.json"))},
          {"forgetting", nlohmann::json::parse(detail::read_text_file(p / "eval/forgetting.json"))},
          {"judges", nlohmann::json::parse(detail::read_text_file(p / "judges/metrics.json"))}};
}

inline void stage_report(const ExperimentConfig& c, const ExperimentPaths& p, std::ostream* log) {
  const nlohmann::json r = assemble_report(c, p);
  const std::vector<nlohmann::json> rows(r["reports"].begin(), r["reports"].end());
  detail::write_text_file(p / "report.json", r.dump(2) + "\n");
  detail::write_text_file(p / "table.csv", reports_to_csv(rows));
  detail::write_text_file(p / "table.md", reports_to_markdown(rows));
  detail::log_line(log, "  wrote " + p.str("report.json"));
}

// ---------------------------------------------------------------------------
// cmd_run

struct RunOptions {
  bool dry_run = false;
  std::vector<std::string> targets;  // stages wanted, dependencies included; empty = all
  std::string reuse_from;            // experiment dir whose matching completed stages are copied
  std::ostream* log = nullptr;
};

struct StagePlan {
  std::string stage;
  std::string action;  // "done", "reuse", "run" or "skip"
};

struct RunResult {
  std::vector<StagePlan> plan;
  std::vector<std::string> ran;
  bool complete = false;  // every stage is done
};

inline const std::vector<std::string>& stage_dependencies(const std::string& stage) {
  static const std::map<std::string, std::vector<std::string>> deps{
      {"prepare", {}},
      {"phase1", {"prepare"}},
      {"phase2", {"phase1"}},
      {"phase3", {"phase2"}},
      {"baselines", {"phase1"}},
      {"judges", {"prepare"}},
      {"evaluate", {"phase3", "baselines", "judges"}},
      {"report", {"evaluate"}}};
  const auto it = deps.find(stage);
  if (it == deps.end()) throw ConfigError("unknown stage '" + stage + "'");
  return it->second;
}

inline std::set<std::string> with_dependencies(const std::vector<std::string>& targets) {
  std::set<std::string> out;
  std::vector<std::string> todo = targets.empty() ? stage_names() : targets;
  while (!todo.empty()) {
    const std::string s = todo.back();
    todo.pop_back();
    if (!out.insert(s).second) continue;
    for (const auto& d : stage_dependencies(s)) todo.push_back(d);
  }
  return out;
}

inline std::vector<StagePlan> plan_stages(const ExperimentConfig& c, const std::string& dir, const RunOptions& opt = {}) {
  const auto wanted = with_dependencies(opt.targets);
  const auto here = read_manifest(dir);
  std::optional<Manifest> other;
  if (!opt.reuse_from.empty()) {
    other = read_manifest(opt.reuse_from);
    if (!other) throw DataError("'" + opt.reuse_from + "' is not an experiment directory");
  }
  std::vector<StagePlan> plan;
  for (const auto& s : stage_names()) {
    const std::string key = stage_key(c, s);
    if (here && here->done.count(s)) {
      if (here->done.at(s) != key)
        throw ResumeConflict("stage '" + s + "' in '" + dir +
                             "' was completed under a different configuration; use a fresh directory");
      plan.push_back({s, "done"});
    } else if (!wanted.count(s)) {
      plan.push_back({s, "skip"});
    } else if (other && other->done.count(s) && other->done.at(s) == key) {
      plan.push_back({s, "reuse"});
    } else {
      plan.push_back({s, "run"});
    }
  }
  return plan;
}

inline void run_stage(const std::string& s, const ExperimentConfig& c, const ExperimentPaths& p, std::ostream* log) {
  if (s == "prepare") return stage_prepare(c, p, log);
  if (s == "phase1") return stage_phase1(c, p, log);
  if (s == "phase2") return stage_phase2(c, p, log);
  if (s == "phase3") return stage_phase3(c, p, log);
  if (s == "baselines") return stage_baselines(c, p, log);
  if (s == "judges") return stage_judges(c, p, log);
  if (s == "evaluate") return stage_evaluate(c, p, log);
  if (s == "report") return stage_report(c, p, log);
  throw ConfigError("unknown stage '" + s + "'");
}

// prepare -> phase1 -> phase2 -> phase3 -> baselines -> judges -> evaluate ->
// report. Completed stages recorded in manifest.json are skipped; a completed
// stage whose inputs changed is a ResumeConflict.
inline RunResult cmd_run(const ExperimentConfig& c, const std::string& dir, const RunOptions& opt = {}) {
  namespace fs = std::filesystem;
  c.validate();
  RunResult res;
  res.plan = plan_stages(c, dir, opt);
  if (opt.dry_run) return res;

  fs::create_directories(dir);
  const ExperimentPaths p{dir};
  Manifest m = read_manifest(dir).value_or(Manifest{});
  m.config = c;
  m.config_hash = config_hash(c);
  m.artifacts["reference_mode"] = reference_mode();
  write_manifest(dir, m);
  for (const auto& sp : res.plan) {
    if (sp.action == "done" || sp.action == "skip") continue;
    for (const auto& out : stage_outputs(sp.stage)) fs::remove_all(p / out);
    if (sp.action == "reuse") {
      detail::log_line(opt.log, "[" + sp.stage + "] reused from " + opt.reuse_from);
      for (const auto& out : stage_outputs(sp.stage)) {
        const auto src = fs::path(opt.reuse_from) / out;
        if (!fs::exists(src)) throw DataError("reuse: '" + src.string() + "' is missing");
        if (fs::is_directory(src))
          fs::copy(src, p / out, fs::copy_options::recursive);
        else
          fs::copy_file(src, p / out);
      }
    } else {
      detail::log_line(opt.log, "[" + sp.stage + "]");
      run_stage(sp.stage, c, p, opt.log);
      res.ran.push_back(sp.stage);
    }
    m.done[sp.stage] = stage_key(c, sp.stage);
    if (sp.stage == "phase1") m.artifacts["phase1"] = bundle_hash(p.str("phase1/model"));
    if (sp.stage == "phase2") m.artifacts["phase2"] = bundle_hash(p.str("phase2/adapter"));
    if (sp.stage == "phase3") m.artifacts["phase3"] = bundle_hash(p.str("phase3/adapter"));
    write_manifest(dir, m);
  }
  res.complete = m.done.size() == stage_names().size();
  return res;
}

// ---------------------------------------------------------------------------
// compare / plot-data

// Accepts experiment reports (their "reports" rows) and single model
// reports. Rows from experiment reports are named "<experiment>/<model>"
// when more than one experiment is given.
inline std::vector<nlohmann::json> comparison_rows(const std::vector<nlohmann::json>& inputs) {
  std::size_t n_experiments = 0;
  for (const auto& j : inputs) n_experiments += j.contains("reports");
  std::vector<nlohmann::json> rows;
  for (const auto& j : inputs) {
    if (j.contains("reports")) {
      for (auto r : j["reports"]) {
        if (n_experiments > 1) r["model"] = j.at("experiment").get<std::string>() + "/" + r.at("model").get<std::string>();
        rows.push_back(std::move(r));
      }
    } else if (j.contains("model")) {
      rows.push_back(j);
    } else {
      throw DataError("compare: input is neither a model report nor an experiment report");
    }
  }
  if (rows.empty()) throw DataError("compare: no reports");
  return rows;
}

struct Comparison {
  std::string csv;
  std::string markdown;
};

inline Comparison cmd_compare(const std::vector<std::string>& report_paths) {
  std::vector<nlohmann::json> inputs;
  for (const auto& path : report_paths) {
    try {
      inputs.push_back(nlohmann::json::parse(detail::read_text_file(path)));
    } catch (const nlohmann::json::exception& e) {
      throw DataError("report '" + path + "': " + e.what());
    }
  }
  const auto rows = comparison_rows(inputs);
  return {reports_to_csv(rows), reports_to_markdown(rows)};
}

struct PlotData {
  std::string forgetting_csv;
  std::string quadrants_csv;
};

// Forgetting curve of the first experiment, and one quadrant row (the LLR
// model's) per experiment.
// The experiment needs its snapshots; the curve is recomputed from them when
// the evaluate stage has not run.
inline PlotData cmd_plot_data(const std::vector<std::string>& experiment_dirs) {
  if (experiment_dirs.empty()) throw ConfigError("plot-data needs at least one experiment directory");
  PlotData out;
  std::ostringstream q;
  q << "adapter_type,q_tt,q_tf,q_ft,q_ff\n";
  for (std::size_t i = 0; i < experiment_dirs.size(); ++i) {
    const ExperimentPaths p{experiment_dirs[i]};
    const auto m = read_manifest(p.root.string());
    if (!m) throw DataError("'" + p.root.string() + "' is not an experiment directory");
    const ExperimentConfig c = m->config.get<ExperimentConfig>();
    const Model<float> base = detail::load_phase1(p);
    auto snaps = detail::load_snapshots(p, base);
    if (i == 0) {
      if (std::filesystem::exists(p / "eval/forgetting.json")) {
        const auto f = nlohmann::json::parse(detail::read_text_file(p / "eval/forgetting.json"));
        std::vector<ForgettingPoint> pts;
        for (const auto& e : f.at("points")) pts.push_back({e.at("step").get<std::size_t>(), e.at("ris").get<double>()});
        out.forgetting_csv = forgetting_csv(pts);
      } else {
        const PreparedData d = load_prepared(p.str("data"));
        const StyleJudge sj = load_style_judge(p.str("judges/style"));
        out.forgetting_csv = forgetting_csv(monitor_forgetting(snaps, &sj, d.vocab, d.stories.val, c.decode));
      }
    }
    const auto rp = p / "eval/reports.json";
    if (!std::filesystem::exists(rp)) throw DataError("'" + p.root.string() + "' has no evaluation reports yet");
    for (const auto& r : nlohmann::json::parse(detail::read_text_file(rp))) {
      if (r.at("model") != kLLR) continue;
      const auto& qd = r.at("quadrants");
      q << to_string(c.adapter.variant) << ',' << qd.at("styled_valid") << ',' << qd.at("styled_invalid") << ','
        << qd.at("unstyled_valid") << ',' << qd.at("unstyled_invalid") << '\n';
    }
  }
  out.quadrants_csv = q.str();
  return out;
}

}  // namespace stlr
