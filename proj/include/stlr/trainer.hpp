#pragma once

// The three training phases, resumable train state, early stopping,
// snapshots and the frozen-group check.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "stlr/corpus.hpp"
#include "stlr/optim.hpp"
#include "stlr/seq2seq.hpp"

namespace stlr {

enum class Objective { story_ending, style_lm };
enum class StopRule { fixed, plateau };

inline const char* to_string(Objective o) { return o == Objective::story_ending ? "story-ending" : "style-lm"; }
inline const char* to_string(StopRule s) { return s == StopRule::fixed ? "fixed" : "plateau"; }

inline Objective parse_objective(std::string_view s) {
  if (s == "story-ending") return Objective::story_ending;
  if (s == "style-lm") return Objective::style_lm;
  throw ConfigError("unknown objective '" + std::string(s) + "'");
}

inline StopRule parse_stop_rule(std::string_view s) {
  if (s == "fixed") return StopRule::fixed;
  if (s == "plateau") return StopRule::plateau;
  throw ConfigError("unknown stop rule '" + std::string(s) + "'");
}

struct PhasePlan {
  int phase_id = 1;
  Objective objective = Objective::story_ending;
  std::set<ParamGroup> groups;
  std::size_t epochs = 1;
  std::size_t max_steps = 0;  // overrides epochs when > 0
  AdamConfig adam;
  std::size_t batch_size = 16;
  std::size_t eval_every = 0;  // steps; 0 = at every epoch end
  StopRule stop = StopRule::fixed;
  std::size_t patience = 3;
  std::size_t snapshot_every = 0;  // 0 = 10% of the phase's steps
  std::uint64_t seed = 1;
  std::size_t max_source_len = 64;
  std::size_t max_target_len = 32;

  // Defaults for each phase: 3 epochs, plateau, 1 epoch.
  static PhasePlan defaults(int phase, bool also_train_encoder = false) {
    PhasePlan p;
    p.phase_id = phase;
    if (phase == 1) {
      p.objective = Objective::story_ending;
      p.groups = {ParamGroup::encoder, ParamGroup::decoder_base, ParamGroup::lm_head};
      p.epochs = 3;
    } else if (phase == 2) {
      p.objective = Objective::style_lm;
      p.groups = {ParamGroup::adapter};
      p.epochs = 50;
      p.stop = StopRule::plateau;
    } else if (phase == 3) {
      p.objective = Objective::story_ending;
      p.groups = {ParamGroup::adapter};
      if (also_train_encoder) p.groups.insert(ParamGroup::encoder);
      p.epochs = 1;
    } else {
      throw ConfigError("phase must be 1, 2 or 3");
    }
    return p;
  }

  void validate() const {
    adam.validate();
    if (batch_size == 0) throw ConfigError("phase " + std::to_string(phase_id) + ": batch_size must be >= 1");
    if (epochs == 0 && max_steps == 0) throw ConfigError("phase " + std::to_string(phase_id) + ": empty step budget");
    if (stop == StopRule::plateau && patience == 0) throw ConfigError("plateau stopping needs patience >= 1");
    if (max_source_len == 0 || max_target_len < 2) throw ConfigError("phase: invalid sequence length caps");
    const std::set<ParamGroup> base{ParamGroup::encoder, ParamGroup::decoder_base, ParamGroup::lm_head};
    const std::set<ParamGroup> adapter{ParamGroup::adapter};
    const std::set<ParamGroup> adapter_enc{ParamGroup::adapter, ParamGroup::encoder};
    switch (phase_id) {
      case 1:
        if (objective != Objective::story_ending || groups != base)
          throw ConfigError("phase 1 trains all groups on the story-ending objective");
        break;
      case 2:
        if (objective != Objective::style_lm || groups != adapter)
          throw ConfigError("phase 2 trains only the adapter group on the style-LM objective");
        break;
      case 3:
        if (objective != Objective::story_ending || (groups != adapter && groups != adapter_enc))
          throw ConfigError("phase 3 trains the adapter group (optionally with the encoder) on the story-ending objective");
        break;
      default: throw ConfigError("phase must be 1, 2 or 3");
    }
  }

  bool operator==(const PhasePlan&) const = default;
};

inline void to_json(nlohmann::json& j, const PhasePlan& p) {
  std::vector<std::string> g;
  for (ParamGroup x : p.groups) g.push_back(to_string(x));
  j = {{"phase_id", p.phase_id},
       {"objective", to_string(p.objective)},
       {"groups", g},
       {"epochs", p.epochs},
       {"max_steps", p.max_steps},
       {"adam", p.adam},
       {"batch_size", p.batch_size},
       {"eval_every", p.eval_every},
       {"stop", to_string(p.stop)},
       {"patience", p.patience},
       {"snapshot_every", p.snapshot_every},
       {"seed", p.seed},
       {"max_source_len", p.max_source_len},
       {"max_target_len", p.max_target_len}};
}

inline void from_json(const nlohmann::json& j, PhasePlan& p) {
  p.phase_id = j.at("phase_id").get<int>();
  p.objective = parse_objective(j.at("objective").get<std::string>());
  p.groups.clear();
  for (const auto& g : j.at("groups")) p.groups.insert(parse_param_group(g.get<std::string>()));
  p.epochs = j.at("epochs").get<std::size_t>();
  p.max_steps = j.at("max_steps").get<std::size_t>();
  p.adam = j.at("adam").get<AdamConfig>();
  p.batch_size = j.at("batch_size").get<std::size_t>();
  p.eval_every = j.at("eval_every").get<std::size_t>();
  p.stop = parse_stop_rule(j.at("stop").get<std::string>());
  p.patience = j.at("patience").get<std::size_t>();
  p.snapshot_every = j.at("snapshot_every").get<std::size_t>();
  p.seed = j.at("seed").get<std::uint64_t>();
  p.max_source_len = j.at("max_source_len").get<std::size_t>();
  p.max_target_len = j.at("max_target_len").get<std::size_t>();
}

// ---------------------------------------------------------------------------
// Encoded training data

// One training pair. An empty source means the null context.
struct SeqPair {
  std::vector<int> source;
  std::vector<int> target;
};

inline std::vector<SeqPair> encode_story_pairs(const Vocabulary& v, const std::vector<StoryExample>& xs) {
  std::vector<SeqPair> out;
  out.reserve(xs.size());
  for (const auto& x : xs) out.push_back({encode_context_sentences(v, x.context), encode_target(v, x.ending)});
  return out;
}

inline std::vector<SeqPair> encode_lm_pairs(const Vocabulary& v, const std::vector<std::string>& texts) {
  std::vector<SeqPair> out;
  out.reserve(texts.size());
  for (const auto& t : texts) out.push_back({{}, encode_target(v, t)});
  return out;
}

inline std::size_t batches_per_epoch(std::size_t n, std::size_t batch_size) { return (n + batch_size - 1) / batch_size; }

inline std::size_t total_steps(const PhasePlan& plan, std::size_t n_train) {
  return plan.max_steps > 0 ? plan.max_steps : plan.epochs * batches_per_epoch(n_train, plan.batch_size);
}

inline std::size_t snapshot_interval(const PhasePlan& plan, std::size_t total) {
  if (plan.snapshot_every > 0) return plan.snapshot_every;
  return std::max<std::size_t>(1, total / 10);
}

// Example order for one epoch; a pure function of (seed, epoch).
inline std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(derive_seed(seed, 0xE90C0000ULL + epoch));
  rng.shuffle(order.begin(), order.end());
  return order;
}

struct PairBatch {
  std::optional<Batch> source;
  Batch target;
};

inline PairBatch make_pair_batch(const std::vector<SeqPair>& data, const std::vector<std::size_t>& idx,
                                 std::size_t max_src, std::size_t max_tgt) {
  std::vector<std::vector<int>> src, tgt;
  bool has_src = false, has_null = false;
  for (std::size_t i : idx) {
    const auto& p = data.at(i);
    (p.source.empty() ? has_null : has_src) = true;
    if (!p.source.empty()) src.push_back(p.source);
    tgt.push_back(p.target);
  }
  if (has_src && has_null) throw DataError("batch mixes null-context and context examples");
  PairBatch b;
  if (has_src) b.source = pad_batch(src, max_src, true);
  b.target = pad_batch(tgt, max_tgt, true);
  return b;
}

// Token-weighted mean teacher-forcing loss over a dataset.
template <class T>
double mean_loss(const Model<T>& m, const std::vector<SeqPair>& data, std::size_t max_src, std::size_t max_tgt,
                 std::size_t chunk = 64) {
  if (data.empty()) throw DataError("mean_loss: empty dataset");
  double sum = 0.0, weight = 0.0;
  for (std::size_t start = 0; start < data.size(); start += chunk) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(data.size(), start + chunk); ++i) idx.push_back(i);
    const PairBatch b = make_pair_batch(data, idx, max_src, max_tgt);
    const auto wts = shift_target(b.target).weights;
    const auto w = static_cast<double>(std::count(wts.begin(), wts.end(), std::uint8_t{1}));
    const double l = b.source ? static_cast<double>(story_loss(m, *b.source, b.target))
                              : static_cast<double>(lm_loss(m, b.target));
    sum += l * w;
    weight += w;
  }
  return sum / weight;
}

// ---------------------------------------------------------------------------
// Train state

struct LossRecord {
  std::size_t step = 0;
  std::size_t epoch = 0;
  double train_loss = std::numeric_limits<double>::quiet_NaN();  // NaN before the first step
  double val_loss = 0.0;
};

struct TrainState {
  Model<float> model;
  Adam<float> opt;
  std::size_t step = 0;
  std::size_t epoch = 0;
  std::size_t cursor = 0;  // batch index within the epoch
  std::string rng_state;   // dropout stream
  std::vector<LossRecord> history;
  double best_val = std::numeric_limits<double>::infinity();
  std::size_t bad_evals = 0;
  double pending_sum = 0.0;
  std::size_t pending_n = 0;
  bool finished = false;
  std::optional<Model<float>> best;

  static TrainState start(Model<float> m, const PhasePlan& plan) {
    TrainState s;
    s.opt = Adam<float>(m.params, plan.adam);
    s.model = std::move(m);
    s.rng_state = Rng(derive_seed(plan.seed, 0xD209)).state();
    return s;
  }
};

namespace detail {

inline nlohmann::json history_json(const std::vector<LossRecord>& h) {
  nlohmann::json a = nlohmann::json::array();
  for (const auto& r : h)
    a.push_back({r.step, r.epoch, std::isnan(r.train_loss) ? nlohmann::json(nullptr) : nlohmann::json(r.train_loss),
                 r.val_loss});
  return a;
}

inline std::vector<LossRecord> history_from_json(const nlohmann::json& a) {
  std::vector<LossRecord> h;
  for (const auto& e : a) {
    LossRecord r;
    r.step = e.at(0).get<std::size_t>();
    r.epoch = e.at(1).get<std::size_t>();
    if (!e.at(2).is_null()) r.train_loss = e.at(2).get<double>();
    r.val_loss = e.at(3).get<double>();
    h.push_back(r);
  }
  return h;
}

}  // namespace detail

inline void save_train_state(const std::string& dir, const TrainState& s, const PhasePlan& plan) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  save_checkpoint((fs::path(dir) / "model").string(), s.model);
  write_bundle((fs::path(dir) / "optimizer").string(), {{"format", "STLR1-O"}}, s.opt.moments(s.model.params));
  if (s.best) save_checkpoint((fs::path(dir) / "best").string(), *s.best);
  nlohmann::json j;
  j["plan"] = plan;
  j["step"] = s.step;
  j["epoch"] = s.epoch;
  j["cursor"] = s.cursor;
  j["optimizer_steps"] = s.opt.steps();
  j["rng_state"] = s.rng_state;
  j["history"] = detail::history_json(s.history);
  j["best_val"] = std::isinf(s.best_val) ? nlohmann::json(nullptr) : nlohmann::json(s.best_val);
  j["bad_evals"] = s.bad_evals;
  j["pending_sum"] = s.pending_sum;
  j["pending_n"] = s.pending_n;
  j["finished"] = s.finished;
  j["has_best"] = s.best.has_value();
  detail::write_text_file(fs::path(dir) / "state.json", j.dump(2) + "\n");
}

inline bool has_train_state(const std::string& dir) {
  return std::filesystem::exists(std::filesystem::path(dir) / "state.json");
}

// Throws ResumeConflict when the saved state belongs to a different plan.
inline TrainState load_train_state(const std::string& dir, const PhasePlan& plan) {
  namespace fs = std::filesystem;
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(detail::read_text_file(fs::path(dir) / "state.json"));
  } catch (const nlohmann::json::exception& e) {
    throw ResumeConflict("train state in '" + dir + "' is unreadable: " + e.what());
  }
  if (j.at("plan") != nlohmann::json(plan))
    throw ResumeConflict("train state in '" + dir + "' was written by a different phase plan");
  TrainState s;
  s.model = load_checkpoint<float>((fs::path(dir) / "model").string());
  s.opt = Adam<float>(s.model.params, plan.adam);
  s.opt.restore(s.model.params, read_bundle((fs::path(dir) / "optimizer").string()),
                j.at("optimizer_steps").get<std::size_t>());
  s.step = j.at("step").get<std::size_t>();
  s.epoch = j.at("epoch").get<std::size_t>();
  s.cursor = j.at("cursor").get<std::size_t>();
  s.rng_state = j.at("rng_state").get<std::string>();
  s.history = detail::history_from_json(j.at("history"));
  if (!j.at("best_val").is_null()) s.best_val = j.at("best_val").get<double>();
  s.bad_evals = j.at("bad_evals").get<std::size_t>();
  s.pending_sum = j.at("pending_sum").get<double>();
  s.pending_n = j.at("pending_n").get<std::size_t>();
  s.finished = j.at("finished").get<bool>();
  if (j.at("has_best").get<bool>()) s.best = load_checkpoint<float>((fs::path(dir) / "best").string());
  return s;
}

inline void write_loss_csv(const std::string& path, const std::vector<LossRecord>& h) {
  std::ostringstream os;
  os.precision(9);
  os << "step,epoch,train_loss,val_loss\n";
  for (const auto& r : h) {
    os << r.step << ',' << r.epoch << ',';
    if (std::isnan(r.train_loss))
      os << "NA";
    else
      os << r.train_loss;
    os << ',' << r.val_loss << '\n';
  }
  detail::write_text_file(path, os.str());
}

// ---------------------------------------------------------------------------
// Training loop

struct PhaseHooks {
  std::function<void(std::size_t step, const Model<float>&)> on_snapshot;
  std::function<void(const LossRecord&)> on_eval;
  std::size_t stop_after_steps = 0;  // interrupt once step reaches this value (0 = never)
};

// Runs (or continues) a phase. Returns false when interrupted by
// hooks.stop_after_steps before the budget was used up.
inline bool train_phase(const PhasePlan& plan, TrainState& s, const std::vector<SeqPair>& train,
                        const std::vector<SeqPair>& val, const PhaseHooks& hooks = {}) {
  plan.validate();
  if (train.empty() || val.empty()) throw DataError("phase " + std::to_string(plan.phase_id) + ": empty train or val set");
  const TrainMask mask = set_trainable(s.model, plan.groups);
  const std::size_t total = total_steps(plan, train.size());
  const std::size_t per_epoch = batches_per_epoch(train.size(), plan.batch_size);
  const std::size_t K = snapshot_interval(plan, total);
  const auto eval = [&]() { return mean_loss(s.model, val, plan.max_source_len, plan.max_target_len); };
  const auto record = [&](double train_loss) {
    const double v = eval();
    if (!std::isfinite(v))
      throw NumericError("phase " + std::to_string(plan.phase_id) + ": validation loss is not finite at step " +
                         std::to_string(s.step));
    LossRecord r{s.step, s.epoch, train_loss, v};
    s.history.push_back(r);
    if (hooks.on_eval) hooks.on_eval(r);
    if (plan.stop == StopRule::plateau) {
      if (v < s.best_val) {
        s.best_val = v;
        s.bad_evals = 0;
        s.best = s.model;
      } else if (++s.bad_evals >= plan.patience) {
        s.finished = true;
      }
    }
  };

  if (s.step == 0 && s.history.empty()) {
    record(std::numeric_limits<double>::quiet_NaN());
    if (hooks.on_snapshot) hooks.on_snapshot(0, s.model);
  }
  Rng drop;
  drop.set_state(s.rng_state);
  std::vector<std::size_t> order;
  std::size_t order_epoch = std::numeric_limits<std::size_t>::max();
  while (!s.finished && s.step < total) {
    if (hooks.stop_after_steps > 0 && s.step >= hooks.stop_after_steps) {
      s.rng_state = drop.state();
      return false;
    }
    if (order_epoch != s.epoch) {
      order = epoch_order(train.size(), plan.seed, s.epoch);
      order_epoch = s.epoch;
    }
    const std::size_t lo = s.cursor * plan.batch_size;
    const std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(lo),
                                       order.begin() + static_cast<std::ptrdiff_t>(std::min(train.size(), lo + plan.batch_size)));
    const PairBatch b = make_pair_batch(train, idx, plan.max_source_len, plan.max_target_len);
    const auto lg = loss_and_grad(s.model, mask, b.source ? &*b.source : nullptr, b.target, &drop);
    if (!std::isfinite(lg.loss))
      throw NumericError("phase " + std::to_string(plan.phase_id) + ": training loss is not finite at step " +
                         std::to_string(s.step + 1) + " (epoch " + std::to_string(s.epoch) + ")");
    s.opt.step(s.model.params, lg.grads, mask);
    ++s.step;
    s.pending_sum += static_cast<double>(lg.loss);
    ++s.pending_n;
    if (++s.cursor == per_epoch) {
      s.cursor = 0;
      ++s.epoch;
    }
    const bool due = plan.eval_every > 0 ? s.step % plan.eval_every == 0 : s.cursor == 0;
    if (due || s.step == total) {
      record(s.pending_sum / static_cast<double>(s.pending_n));
      s.pending_sum = 0.0;
      s.pending_n = 0;
    }
    if (hooks.on_snapshot && s.step % K == 0) hooks.on_snapshot(s.step, s.model);
  }
  s.rng_state = drop.state();
  if (plan.stop == StopRule::plateau && s.best) s.model = *s.best;
  s.finished = true;
  return true;
}

// Throws GroupLeakError unless every tensor outside `allowed` is
// bit-identical between the two models.
template <class T>
void check_frozen(const Model<T>& before, const Model<T>& after, const std::set<ParamGroup>& allowed) {
  for (const auto& t : before.params) {
    if (allowed.count(t.group)) continue;
    const auto i = after.params.find(t.name);
    if (!i || !bit_identical(t.value, after.params.at(*i).value))
      throw GroupLeakError("frozen tensor '" + t.name + "' (" + to_string(t.group) + ") changed during training");
  }
}

struct PhaseResult {
  Model<float> model;
  std::vector<LossRecord> history;
  std::size_t steps = 0;
  double initial_val_loss = 0.0;
  double final_val_loss = 0.0;
};

namespace detail {

inline PhaseResult run_checked_phase(const PhasePlan& plan, Model<float> start, const std::vector<SeqPair>& train,
                                     const std::vector<SeqPair>& val, const PhaseHooks& hooks) {
  TrainState s = TrainState::start(start, plan);
  train_phase(plan, s, train, val, hooks);
  if (plan.phase_id != 1) check_frozen(start, s.model, plan.groups);
  PhaseResult r;
  r.history = s.history;
  r.steps = s.step;
  r.initial_val_loss = s.history.front().val_loss;
  r.final_val_loss = mean_loss(s.model, val, plan.max_source_len, plan.max_target_len);
  r.model = std::move(s.model);
  return r;
}

}  // namespace detail

inline PhaseResult run_phase1(const PhasePlan& plan, Model<float> model, const std::vector<SeqPair>& train,
                              const std::vector<SeqPair>& val, const PhaseHooks& hooks = {}) {
  if (plan.phase_id != 1) throw ConfigError("run_phase1 needs a phase-1 plan");
  if (model.adapters || model.params.has_group(ParamGroup::adapter))
    throw ConfigError("phase 1 runs on a model without adapters");
  return detail::run_checked_phase(plan, std::move(model), train, val, hooks);
}

inline PhaseResult run_phase2(const PhasePlan& plan, Model<float> model, const std::vector<SeqPair>& train,
                              const std::vector<SeqPair>& val, const PhaseHooks& hooks = {}) {
  if (plan.phase_id != 2) throw ConfigError("run_phase2 needs a phase-2 plan");
  if (!model.adapters) throw ConfigError("phase 2 needs injected adapters");
  for (const auto* d : {&train, &val})
    for (const auto& p : *d)
      if (!p.source.empty()) throw DataError("phase 2 trains under the null context; pairs must have no source");
  return detail::run_checked_phase(plan, std::move(model), train, val, hooks);
}

inline PhaseResult run_phase3(const PhasePlan& plan, Model<float> model, const std::vector<SeqPair>& train,
                              const std::vector<SeqPair>& val, const PhaseHooks& hooks = {}) {
  if (plan.phase_id != 3) throw ConfigError("run_phase3 needs a phase-3 plan");
  if (!model.adapters) throw ConfigError("phase 3 needs injected adapters");
  return detail::run_checked_phase(plan, std::move(model), train, val, hooks);
}

}  // namespace stlr
