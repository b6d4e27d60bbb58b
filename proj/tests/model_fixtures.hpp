#pragma once

#include <functional>

#include "stlr/adapters.hpp"
#include "stlr/seq2seq.hpp"
#include "test_util.hpp"

namespace stlr::testing {

inline ModelConfig tiny_config(std::size_t vocab = 12, std::uint64_t seed = 3) {
  ModelConfig c;
  c.vocab_size = vocab;
  c.d_model = 8;
  c.n_enc_layers = 1;
  c.n_dec_layers = 2;
  c.n_heads = 2;
  c.ffn_dim = 12;
  c.max_positions = 16;
  c.seed = seed;
  return c;
}

inline std::vector<int> random_ids(Rng& rng, std::size_t n, std::size_t vocab) {
  std::vector<int> ids;
  for (std::size_t i = 0; i < n; ++i) ids.push_back(static_cast<int>(kNumSpecials + rng.below(vocab - kNumSpecials)));
  return ids;
}

inline Batch random_source(Rng& rng, std::size_t vocab, const std::vector<std::size_t>& lengths, std::size_t width) {
  std::vector<std::vector<int>> seqs;
  for (auto n : lengths) seqs.push_back(random_ids(rng, n, vocab));
  return pad_batch(seqs, width);
}

// BOS body EOS rows padded to `width`.
inline Batch random_target(Rng& rng, std::size_t vocab, const std::vector<std::size_t>& body, std::size_t width) {
  std::vector<std::vector<int>> seqs;
  for (auto n : body) {
    auto s = random_ids(rng, n, vocab);
    s.insert(s.begin(), kBos);
    s.push_back(kEos);
    seqs.push_back(s);
  }
  return pad_batch(seqs, width);
}

// Closed forms per variant; L = injected decoder layers, no encoder injection.
inline std::size_t adapter_closed_form(AdapterVariant v, std::size_t d, std::size_t b, std::size_t L, std::size_t n) {
  switch (v) {
    case AdapterVariant::plain: return L * (2 * d * b + b + d);
    case AdapterVariant::houlsby: return 2 * L * (2 * d * b + b + d);
    case AdapterVariant::pfeiffer: return L * (2 * d * b + b + d + 2 * d);
    case AdapterVariant::parallel: return L * (2 * d * b);
    case AdapterVariant::invertible: return L * (2 * d * b + b + d + 2 * d) + (2 * d * b + 2 * b + d);
    case AdapterVariant::compacter: return n * n * n + L * (3 * d + 3 * b);
  }
  return 0;
}

// Worst elementwise relative error between analytic gradients and central
// differences, probing up to `per_tensor` entries of every trainable tensor.
inline double model_grad_error(Model<double> m, const TrainMask& mask,
                               const std::function<double(const Model<double>&)>& loss,
                               const Gradients<double>& analytic, std::size_t per_tensor = 12,
                               double eps = 1e-6) {
  Rng rng(99);
  double worst = 0.0;
  for (std::size_t i = 0; i < m.params.size(); ++i) {
    if (!mask(i)) continue;
    auto& val = m.params.at(i).value;
    const std::size_t n = val.size();
    for (std::size_t k = 0; k < std::min(n, per_tensor); ++k) {
      const std::size_t j = n <= per_tensor ? k : rng.below(n);
      const double orig = val.data[j];
      val.data[j] = orig + eps;
      const double up = loss(m);
      val.data[j] = orig - eps;
      const double dn = loss(m);
      val.data[j] = orig;
      const double a = analytic[i].empty() ? 0.0 : analytic[i].data[j];
      worst = std::max(worst, rel_err(a, (up - dn) / (2 * eps)));
    }
  }
  return worst;
}

}  // namespace stlr::testing
