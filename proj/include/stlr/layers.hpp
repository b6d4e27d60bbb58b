#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "stlr/autograd.hpp"
#include "stlr/model.hpp"

namespace stlr {

// Declarative tensor description used to build and count parameters.
struct TensorSpec {
  enum class Init { normal, zeros, ones };
  std::string name;
  ParamGroup group;
  std::size_t rows;
  std::size_t cols;
  Init init = Init::normal;
  double stddev = 0.0;

  std::size_t size() const noexcept { return rows * cols; }
};

inline std::size_t total_size(const std::vector<TensorSpec>& specs) {
  std::size_t n = 0;
  for (const auto& s : specs) n += s.size();
  return n;
}

template <class T>
void materialize(ParamStore<T>& store, const std::vector<TensorSpec>& specs, Rng& rng) {
  for (const auto& s : specs) {
    Matrix<T> m(s.rows, s.cols);
    switch (s.init) {
      case TensorSpec::Init::zeros: break;
      case TensorSpec::Init::ones: m.fill(T(1)); break;
      case TensorSpec::Init::normal:
        for (T& v : m.data) v = static_cast<T>(rng.normal() * s.stddev);
        break;
    }
    store.add(s.name, s.group, std::move(m));
  }
}

// Gradients aligned with a ParamStore; entries for untouched or frozen
// tensors are empty matrices.
template <class T>
using Gradients = std::vector<Matrix<T>>;

// Lazily turns stored tensors into graph leaves. Each tensor becomes one leaf
// per graph, so shared weights accumulate gradients from every use.
template <class T>
class ParamBinder {
 public:
  ParamBinder(Graph<T>& g, const ParamStore<T>& store, const TrainMask* mask = nullptr)
      : g_(g), store_(store), mask_(mask), vars_(store.size()) {}

  Var operator()(const std::string& name) {
    const std::size_t i = store_.index(name);
    if (!vars_[i].valid()) {
      const bool rg = mask_ != nullptr && (*mask_)(i);
      vars_[i] = g_.leaf(store_.at(i).value, rg);
    }
    return vars_[i];
  }

  bool has(const std::string& name) const { return store_.find(name).has_value(); }

  Graph<T>& graph() noexcept { return g_; }

  Gradients<T> gradients() {
    Gradients<T> out(store_.size());
    for (std::size_t i = 0; i < vars_.size(); ++i)
      if (vars_[i].valid() && g_.requires_grad(vars_[i]) && g_.has_grad(vars_[i])) out[i] = g_.grad(vars_[i]);
    return out;
  }

 private:
  Graph<T>& g_;
  const ParamStore<T>& store_;
  const TrainMask* mask_;
  std::vector<Var> vars_;
};

namespace layers {

template <class T>
Var dense(ParamBinder<T>& p, const std::string& prefix, Var x) {
  return ag::linear(p.graph(), x, p(prefix + ".w"), p(prefix + ".b"));
}

template <class T>
Var norm(ParamBinder<T>& p, const std::string& prefix, Var x) {
  return ag::layer_norm(p.graph(), x, p(prefix + ".g"), p(prefix + ".b"));
}

inline void dense_specs(std::vector<TensorSpec>& out, const std::string& prefix, ParamGroup g, std::size_t in,
                        std::size_t outd, double stddev) {
  out.push_back({prefix + ".w", g, in, outd, TensorSpec::Init::normal, stddev});
  out.push_back({prefix + ".b", g, 1, outd, TensorSpec::Init::zeros, 0.0});
}

inline void norm_specs(std::vector<TensorSpec>& out, const std::string& prefix, ParamGroup g, std::size_t d) {
  out.push_back({prefix + ".g", g, 1, d, TensorSpec::Init::ones, 0.0});
  out.push_back({prefix + ".b", g, 1, d, TensorSpec::Init::zeros, 0.0});
}

template <class T>
Matrix<T> sinusoidal_positions(std::size_t length, std::size_t d) {
  Matrix<T> pe(length, d);
  for (std::size_t pos = 0; pos < length; ++pos)
    for (std::size_t i = 0; i < d; ++i) {
      const double rate = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / static_cast<double>(d));
      const double angle = static_cast<double>(pos) * rate;
      pe(pos, i) = static_cast<T>(i % 2 == 0 ? std::sin(angle) : std::cos(angle));
    }
  return pe;
}

// Positional table tiled over `batch` rows of width `length`.
template <class T>
Matrix<T> tiled_positions(std::size_t batch, std::size_t length, std::size_t d) {
  const Matrix<T> pe = sinusoidal_positions<T>(length, d);
  Matrix<T> out(batch * length, d);
  for (std::size_t b = 0; b < batch; ++b)
    std::copy(pe.data.begin(), pe.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(b * length * d));
  return out;
}

}  // namespace layers
}  // namespace stlr
