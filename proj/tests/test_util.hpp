#pragma once

#include <cmath>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "stlr/autograd.hpp"

namespace stlr::testing {

inline Matrix<double> random_matrix(std::size_t r, std::size_t c, Rng& rng, double scale = 1.0) {
  Matrix<double> m(r, c);
  for (double& v : m.data) v = rng.normal() * scale;
  return m;
}

// Relative error with a small floor, so exact zeros on both sides count as 0.
inline double rel_err(double a, double n) { return std::abs(a - n) / std::max(std::abs(a) + std::abs(n), 1e-6); }

// Checks d/dx sum(build(x) * R) against central differences for every
// element of every input. Returns the worst relative error.
inline double op_grad_error(std::vector<Matrix<double>> inputs,
                            const std::function<Var(Graph<double>&, const std::vector<Var>&)>& build,
                            std::uint64_t seed = 7, double eps = 1e-6) {
  Rng rng(seed);
  Matrix<double> R;
  const auto eval = [&](bool grad, std::vector<Matrix<double>>* grads) {
    Graph<double> g;
    std::vector<Var> xs;
    for (const auto& m : inputs) xs.push_back(g.leaf(m, grad));
    Var out = build(g, xs);
    if (R.empty()) R = random_matrix(g.value(out).rows, g.value(out).cols, rng);
    Var loss = ag::sum(g, ag::mul(g, out, g.constant(R)));
    if (grad) {
      g.backward(loss);
      for (Var x : xs) grads->push_back(g.has_grad(x) ? g.grad(x) : Matrix<double>(g.value(x).rows, g.value(x).cols));
    }
    return g.value(loss).data[0];
  };
  std::vector<Matrix<double>> analytic;
  eval(true, &analytic);
  double worst = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k)
    for (std::size_t i = 0; i < inputs[k].size(); ++i) {
      const double orig = inputs[k].data[i];
      inputs[k].data[i] = orig + eps;
      const double up = eval(false, nullptr);
      inputs[k].data[i] = orig - eps;
      const double dn = eval(false, nullptr);
      inputs[k].data[i] = orig;
      worst = std::max(worst, rel_err(analytic[k].data[i], (up - dn) / (2 * eps)));
    }
  return worst;
}

inline std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("stlr_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace stlr::testing
