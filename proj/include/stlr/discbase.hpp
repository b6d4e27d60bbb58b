#pragma once

// Discriminator-loss style baseline: a frozen TextCNN style discriminator
// scores the generator's soft-embedded output distributions.

#include <cmath>
#include <string>
#include <vector>

#include "stlr/textcnn.hpp"
#include "stlr/trainer.hpp"

namespace stlr {

struct DiscriminatorResult {
  TextCNN<float> model;
  ClassifierMetrics metrics;
};

// Positives are style texts (label 1), negatives story endings (label 0).
inline DiscriminatorResult train_discriminator(const Vocabulary& v, const std::vector<std::string>& positives,
                                               const std::vector<std::string>& negatives, TextCNNConfig cc,
                                               const ClassifierTrainConfig& tc) {
  if (positives.empty() || negatives.empty())
    throw DataError("discriminator training needs both style texts and story endings");
  cc.vocab_size = v.size();
  cc.n_classes = 1;
  std::vector<LabeledSeq> data;
  for (const auto& t : positives) data.push_back({encode(v, t), 1});
  for (const auto& t : negatives) data.push_back({encode(v, t), 0});
  for (const auto& d : data)
    if (d.ids.empty()) throw DataError("discriminator: empty text");
  DiscriminatorResult r{init_textcnn<float>(cc), {}};
  r.metrics = train_textcnn(r.model, data, tc);
  return r;
}

// Graph form: probs (n x V) times the embedding table.
template <class T>
Var soft_embed(Graph<T>& g, Var probs, Var table) {
  return ag::matmul(g, probs, table);
}

template <class T>
struct DiscStepResult {
  T loss = 0;       // tf_loss + lambda * disc_loss
  T tf_loss = 0;
  T disc_loss = 0;  // -log P(target style | soft-embedded output)
  Gradients<T> grads;
};

// Combined teacher-forcing and discriminator loss with gradients for the
// generator tensors in `mask`. The discriminator enters as constants, so its
// parameters are never touched. Generated positions are those with a
// teacher-forcing label.
template <class T>
DiscStepResult<T> discriminator_augmented_step(const Model<T>& gen, const TrainMask& mask, const Batch& src,
                                               const Batch& target, const TextCNN<T>& disc, double lambda,
                                               double temperature = 1.0, bool want_grads = true) {
  if (lambda < 0.0) throw ConfigError("discriminator loss weight must be >= 0");
  if (!(temperature > 0.0)) throw ConfigError("soft-embedding temperature must be > 0");
  if (disc.config.vocab_size != gen.config.vocab_size || disc.config.n_classes != 1)
    throw ConfigError("discriminator must be binary and share the generator vocabulary");
  Graph<T> g(want_grads);
  ParamBinder<T> p(g, gen.params, &mask);
  const GraphContext ctx = encoder_graph(p, gen, src);
  const ShiftedTarget s = shift_target(target);
  Var logits = decoder_graph(p, gen, &ctx, s.input);
  Var tf = ag::cross_entropy(g, logits, s.labels, s.weights);

  // keep only generated positions, row by row
  std::vector<std::size_t> rows, offsets, lengths;
  const std::size_t w = s.input.width;
  for (std::size_t r = 0; r < s.input.rows; ++r) {
    offsets.push_back(rows.size());
    std::size_t n = 0;
    for (std::size_t c = 0; c < w; ++c)
      if (s.weights[r * w + c]) {
        rows.push_back(r * w + c);
        ++n;
      }
    if (n == 0) throw DataError("discriminator step: target row without generated tokens");
    lengths.push_back(n);
  }
  Var picked = ag::gather_rows(g, logits, rows);
  if (temperature != 1.0) picked = ag::scale(g, picked, static_cast<T>(1.0 / temperature));
  Var probs = ag::softmax_rows(g, picked);
  ParamBinder<T> dp(g, disc.params);
  Var emb = soft_embed(g, probs, dp("cnn.embed"));
  Var z = detail::cnn_logits(dp, disc.config, emb, offsets, lengths);
  Var dl = ag::bce_with_logits(g, z, std::vector<int>(offsets.size(), 1));
  Var total = lambda == 0.0 ? tf : ag::add(g, tf, ag::scale(g, dl, static_cast<T>(lambda)));
  DiscStepResult<T> out;
  out.loss = g.value(total).data[0];
  out.tf_loss = g.value(tf).data[0];
  out.disc_loss = g.value(dl).data[0];
  if (want_grads) {
    g.backward(total);
    out.grads = p.gradients();
  }
  return out;
}

struct DiscBaselineConfig {
  double lambda = 1.0;
  double temperature = 1.0;
  std::size_t steps = 100;
  std::size_t batch_size = 16;
  double lr = 1e-3;
  std::uint64_t seed = 1;
  std::size_t max_source_len = 64;
  std::size_t max_target_len = 32;

  void validate() const {
    if (lambda < 0.0) throw ConfigError("disc baseline: lambda must be >= 0");
    if (steps == 0 || batch_size == 0) throw ConfigError("disc baseline: steps and batch_size must be >= 1");
    if (!(lr > 0.0) || !(temperature > 0.0)) throw ConfigError("disc baseline: lr and temperature must be > 0");
  }
  bool operator==(const DiscBaselineConfig&) const = default;
};

inline void to_json(nlohmann::json& j, const DiscBaselineConfig& c) {
  j = {{"lambda", c.lambda}, {"temperature", c.temperature}, {"steps", c.steps},
       {"batch_size", c.batch_size}, {"lr", c.lr}, {"seed", c.seed},
       {"max_source_len", c.max_source_len}, {"max_target_len", c.max_target_len}};
}

inline void from_json(const nlohmann::json& j, DiscBaselineConfig& c) {
  c.lambda = j.at("lambda").get<double>();
  c.temperature = j.at("temperature").get<double>();
  c.steps = j.at("steps").get<std::size_t>();
  c.batch_size = j.at("batch_size").get<std::size_t>();
  c.lr = j.at("lr").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.max_source_len = j.at("max_source_len").get<std::size_t>();
  c.max_target_len = j.at("max_target_len").get<std::size_t>();
}

struct DiscStepRecord {
  std::size_t step = 0;
  double loss = 0.0;
  double tf_loss = 0.0;
  double disc_loss = 0.0;
};

struct DiscBaselineResult {
  Model<float> model;
  std::vector<DiscStepRecord> history;
};

// Fine-tunes every generator group end to end on story pairs with the frozen
// discriminator's style loss added.
inline DiscBaselineResult train_disc_baseline(Model<float> gen, const TextCNN<float>& disc,
                                              const std::vector<SeqPair>& train, const DiscBaselineConfig& c) {
  c.validate();
  if (train.empty()) throw DataError("disc baseline: no training pairs");
  if (gen.adapters) throw ConfigError("disc baseline trains a plain encoder-decoder");
  const TrainMask mask = set_trainable(gen, {ParamGroup::encoder, ParamGroup::decoder_base, ParamGroup::lm_head});
  AdamConfig ac;
  ac.lr = c.lr;
  Adam<float> opt(gen.params, ac);
  DiscBaselineResult out;
  const std::size_t per_epoch = batches_per_epoch(train.size(), c.batch_size);
  std::vector<std::size_t> order;
  for (std::size_t step = 0; step < c.steps; ++step) {
    const std::size_t epoch = step / per_epoch, cursor = step % per_epoch;
    if (cursor == 0) order = epoch_order(train.size(), c.seed, epoch);
    const std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(cursor * c.batch_size),
                                       order.begin() + static_cast<std::ptrdiff_t>(std::min(train.size(), (cursor + 1) * c.batch_size)));
    const PairBatch b = make_pair_batch(train, idx, c.max_source_len, c.max_target_len);
    if (!b.source) throw DataError("disc baseline needs story contexts");
    const auto r = discriminator_augmented_step(gen, mask, *b.source, b.target, disc, c.lambda, c.temperature);
    if (!std::isfinite(static_cast<double>(r.loss)))
      throw NumericError("disc baseline: loss is not finite at step " + std::to_string(step + 1));
    opt.step(gen.params, r.grads, mask);
    out.history.push_back({step + 1, r.loss, r.tf_loss, r.disc_loss});
  }
  out.model = std::move(gen);
  return out;
}

}  // namespace stlr
