#pragma once

#include <cmath>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "stlr/layers.hpp"

namespace stlr {

struct AdamConfig {
  double lr = 5e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;  // decoupled
  double clip_norm = 0.0;     // global gradient-norm clip; 0 disables

  void validate() const {
    if (!(lr > 0.0)) throw ConfigError("adam: lr must be > 0");
    if (!(eps > 0.0)) throw ConfigError("adam: eps must be > 0");
    if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0) throw ConfigError("adam: betas must be in [0,1)");
    if (weight_decay < 0.0 || clip_norm < 0.0) throw ConfigError("adam: weight_decay and clip_norm must be >= 0");
  }
  bool operator==(const AdamConfig&) const = default;
};

inline void to_json(nlohmann::json& j, const AdamConfig& c) {
  j = {{"lr", c.lr},   {"beta1", c.beta1}, {"beta2", c.beta2}, {"eps", c.eps}, {"weight_decay", c.weight_decay},
       {"clip_norm", c.clip_norm}};
}

inline void from_json(const nlohmann::json& j, AdamConfig& c) {
  c.lr = j.at("lr").get<double>();
  c.beta1 = j.at("beta1").get<double>();
  c.beta2 = j.at("beta2").get<double>();
  c.eps = j.at("eps").get<double>();
  c.weight_decay = j.at("weight_decay").get<double>();
  c.clip_norm = j.at("clip_norm").get<double>();
}

// Adam with decoupled weight decay. Tensors outside the mask are never read
// or written, so frozen groups stay bit-identical.
template <class T>
class Adam {
 public:
  Adam() = default;
  Adam(const ParamStore<T>& params, AdamConfig cfg) : cfg_(cfg) {
    cfg_.validate();
    for (const auto& t : params) {
      m_.emplace_back(t.value.rows, t.value.cols);
      v_.emplace_back(t.value.rows, t.value.cols);
    }
  }

  const AdamConfig& config() const noexcept { return cfg_; }
  std::size_t steps() const noexcept { return t_; }

  void step(ParamStore<T>& params, const Gradients<T>& grads, const TrainMask& mask) {
    if (grads.size() != params.size() || m_.size() != params.size())
      throw ShapeError("adam: gradient list does not match parameters");
    ++t_;
    double scale = 1.0;
    if (cfg_.clip_norm > 0.0) {
      double sq = 0.0;
      for (std::size_t i = 0; i < grads.size(); ++i)
        if (mask(i))
          for (T g : grads[i].data) sq += static_cast<double>(g) * static_cast<double>(g);
      const double norm = std::sqrt(sq);
      if (norm > cfg_.clip_norm) scale = cfg_.clip_norm / norm;
    }
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    const T b1 = static_cast<T>(cfg_.beta1), b2 = static_cast<T>(cfg_.beta2);
    const T step_size = static_cast<T>(cfg_.lr / bc1);
    const T inv_bc2 = static_cast<T>(1.0 / bc2);
    const T eps = static_cast<T>(cfg_.eps);
    const T decay = static_cast<T>(1.0 - cfg_.lr * cfg_.weight_decay);
    const T gs = static_cast<T>(scale);
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (!mask(i)) continue;
      auto& p = params.at(i).value;
      const bool has = !grads[i].empty();
      if (has && !grads[i].same_shape(p)) throw ShapeError("adam: gradient shape mismatch for " + params.at(i).name);
      for (std::size_t k = 0; k < p.size(); ++k) {
        const T g = has ? grads[i].data[k] * gs : T(0);
        T& m = m_[i].data[k];
        T& v = v_[i].data[k];
        m = b1 * m + (T(1) - b1) * g;
        v = b2 * v + (T(1) - b2) * g * g;
        if (cfg_.weight_decay > 0.0) p.data[k] *= decay;
        p.data[k] -= step_size * m / (std::sqrt(v * inv_bc2) + eps);
      }
    }
  }

  // Moments as named tensors ("m.<param>", "v.<param>") for checkpointing.
  std::vector<NamedTensor> moments(const ParamStore<T>& params) const {
    std::vector<NamedTensor> out;
    for (std::size_t i = 0; i < params.size(); ++i) {
      out.push_back({"m." + params.at(i).name, "optimizer", matrix_cast<float>(m_[i])});
      out.push_back({"v." + params.at(i).name, "optimizer", matrix_cast<float>(v_[i])});
    }
    return out;
  }

  void restore(const ParamStore<T>& params, const TensorBundle& b, std::size_t t) {
    m_.clear();
    v_.clear();
    for (const auto& p : params) {
      const auto* m = b.find("m." + p.name);
      const auto* v = b.find("v." + p.name);
      if (!m || !v || !m->value.same_shape(matrix_cast<float>(p.value)) || !v->value.same_shape(m->value))
        throw ResumeConflict("optimizer state does not match parameter '" + p.name + "'");
      m_.push_back(matrix_cast<T>(m->value));
      v_.push_back(matrix_cast<T>(v->value));
    }
    t_ = t;
  }

 private:
  AdamConfig cfg_;
  std::vector<Matrix<T>> m_, v_;
  std::size_t t_ = 0;
};

}  // namespace stlr
