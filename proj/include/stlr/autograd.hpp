#pragma once

// Tape-based reverse-mode differentiation over 2-D matrices.
//
// A Graph records every intermediate value in creation order; backward()
// walks the tape in reverse and invokes each node's closure. Nodes whose
// inputs do not require gradients get no closure, so frozen sub-networks
// and inference graphs cost only the forward pass.

#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <initializer_list>
#include <limits>
#include <vector>

#include "stlr/errors.hpp"
#include "stlr/tensor.hpp"

namespace stlr {

struct Var {
  std::size_t id = std::numeric_limits<std::size_t>::max();
  bool valid() const noexcept { return id != std::numeric_limits<std::size_t>::max(); }
};

template <class T>
class Graph {
 public:
  using Backward = std::function<void(Graph&)>;

  explicit Graph(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool grad_enabled() const noexcept { return grad_enabled_; }

  Var constant(Matrix<T> m) { return push(std::move(m), false, {}); }
  Var leaf(Matrix<T> m, bool requires_grad) { return push(std::move(m), requires_grad, {}); }

  const Matrix<T>& value(Var v) const { return nodes_.at(v.id).value; }
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }

  bool any_requires(std::initializer_list<Var> vs) const {
    if (!grad_enabled_) return false;
    for (Var v : vs)
      if (v.valid() && nodes_[v.id].requires_grad) return true;
    return false;
  }

  bool has_grad(Var v) const { return !nodes_.at(v.id).grad.empty(); }

  // Lazily allocated, zero-initialised gradient buffer.
  Matrix<T>& grad(Var v) {
    Node& n = nodes_.at(v.id);
    if (n.grad.empty()) n.grad = Matrix<T>(n.value.rows, n.value.cols);
    return n.grad;
  }

  Var push(Matrix<T> value, bool requires_grad, Backward fn) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = grad_enabled_ && requires_grad;
    if (n.requires_grad) n.backward = std::move(fn);
    nodes_.push_back(std::move(n));
    return Var{nodes_.size() - 1};
  }

  void backward(Var out) {
    Node& root = nodes_.at(out.id);
    if (root.value.size() != 1) throw ShapeError("backward() requires a scalar output");
    if (!root.requires_grad) return;
    grad(out).data[0] = T(1);
    for (std::size_t i = out.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.backward && !n.grad.empty()) n.backward(*this);
    }
  }

  std::size_t size() const noexcept { return nodes_.size(); }
  // Id the next pushed node will receive; lets closures refer to their own output.
  Var next() const noexcept { return Var{nodes_.size()}; }

 private:
  struct Node {
    Matrix<T> value;
    Matrix<T> grad;
    bool requires_grad = false;
    Backward backward;
  };

  bool grad_enabled_;
  // deque: references to existing nodes stay valid while new ones are pushed.
  std::deque<Node> nodes_;
};

namespace ag {

namespace detail {

// out[n,m] += a[n,k] * b[k,m]
template <class T>
void gemm_nn(const T* a, const T* b, T* out, std::size_t n, std::size_t k, std::size_t m) {
  for (std::size_t i = 0; i < n; ++i) {
    T* o = out + i * m;
    const T* ar = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = ar[p];
      if (av == T(0)) continue;
      const T* br = b + p * m;
      for (std::size_t j = 0; j < m; ++j) o[j] += av * br[j];
    }
  }
}

// out[n,k] += d[n,m] * b[k,m]^T
template <class T>
void gemm_nt(const T* d, const T* b, T* out, std::size_t n, std::size_t m, std::size_t k) {
  for (std::size_t i = 0; i < n; ++i) {
    const T* dr = d + i * m;
    T* o = out + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T* br = b + p * m;
      T s = 0;
      for (std::size_t j = 0; j < m; ++j) s += dr[j] * br[j];
      o[p] += s;
    }
  }
}

// out[k,m] += a[n,k]^T * d[n,m]
template <class T>
void gemm_tn(const T* a, const T* d, T* out, std::size_t n, std::size_t k, std::size_t m) {
  for (std::size_t i = 0; i < n; ++i) {
    const T* ar = a + i * k;
    const T* dr = d + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = ar[p];
      if (av == T(0)) continue;
      T* o = out + p * m;
      for (std::size_t j = 0; j < m; ++j) o[j] += av * dr[j];
    }
  }
}

template <class T>
T gelu_value(T x) {
  const T c = T(0.7978845608028654);  // sqrt(2/pi)
  const T u = c * (x + T(0.044715) * x * x * x);
  return T(0.5) * x * (T(1) + std::tanh(u));
}

template <class T>
T gelu_grad(T x) {
  const T c = T(0.7978845608028654);
  const T u = c * (x + T(0.044715) * x * x * x);
  const T th = std::tanh(u);
  const T du = c * (T(1) + T(3) * T(0.044715) * x * x);
  return T(0.5) * (T(1) + th) + T(0.5) * x * (T(1) - th * th) * du;
}

template <class T>
T sigmoid(T z) {
  if (z >= 0) {
    const T e = std::exp(-z);
    return T(1) / (T(1) + e);
  }
  const T e = std::exp(z);
  return e / (T(1) + e);
}

// log(1 + exp(z)) without overflow.
template <class T>
T softplus(T z) {
  return z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z));
}

}  // namespace detail


template <class T>
Var matmul(Graph<T>& g, Var a, Var b) {
  const Matrix<T>& A = g.value(a);
  const Matrix<T>& B = g.value(b);
  if (A.cols != B.rows) throw ShapeError("matmul: inner dimensions differ");
  const std::size_t n = A.rows, k = A.cols, m = B.cols;
  Matrix<T> out(n, m);
  detail::gemm_nn(A.data.data(), B.data.data(), out.data.data(), n, k, m);
  const Var o = g.next();
  return g.push(std::move(out), g.any_requires({a, b}), [a, b, o, n, k, m](Graph<T>& g) {
    const Matrix<T>& d = g.grad(o);
    if (g.requires_grad(a)) detail::gemm_nt(d.data.data(), g.value(b).data.data(), g.grad(a).data.data(), n, m, k);
    if (g.requires_grad(b)) detail::gemm_tn(g.value(a).data.data(), d.data.data(), g.grad(b).data.data(), n, k, m);
  });
}

template <class T>
Var add(Graph<T>& g, Var a, Var b) {
  const Matrix<T>& A = g.value(a);
  const Matrix<T>& B = g.value(b);
  if (!A.same_shape(B)) throw ShapeError("add: shape mismatch");
  Matrix<T> out = A;
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += B.data[i];
  const Var o = g.next();
  return g.push(std::move(out), g.any_requires({a, b}), [a, b, o](Graph<T>& g) {
    const Matrix<T>& d = g.grad(o);
    for (Var x : {a, b}) {
      if (!g.requires_grad(x)) continue;
      Matrix<T>& gx = g.grad(x);
      for (std::size_t i = 0; i < d.size(); ++i) gx.data[i] += d.data[i];
    }
  });
}

// a[n,m] + bias[1,m] broadcast over rows.
template <class T>
Var add_bias(Graph<T>& g, Var a, Var bias) {
  const Matrix<T>& A = g.value(a);
  const Matrix<T>& Bv = g.value(bias);
  if (Bv.rows != 1 || Bv.cols != A.cols) throw ShapeError("add_bias: bias must be [1, cols]");
  Matrix<T> out = A;
  for (std::size_t r = 0; r < out.rows; ++r)
    for (std::size_t c = 0; c < out.cols; ++c) out(r, c) += Bv.data[c];
  const Var o = g.next();
  return g.push(std::move(out), g.any_requires({a, bias}), [a, bias, o](Graph<T>& g) {
    const Matrix<T>& d = g.grad(o);
    if (g.requires_grad(a)) {
      Matrix<T>& ga = g.grad(a);
      for (std::size_t i = 0; i < d.size(); ++i) ga.data[i] += d.data[i];
    }
    if (g.requires_grad(bias)) {
      Matrix<T>& gb = g.grad(bias);
      for (std::size_t r = 0; r < d.rows; ++r)
        for (std::size_t c = 0; c < d.cols; ++c) gb.data[c] += d(r, c);
    }
  });
}

template <class T>
Var linear(Graph<T>& g, Var x, Var w, Var b) {
  return add_bias(g, matmul(g, x, w), b);
}

template <class T>
Var scale(Graph<T>& g, Var a, T s) {
  Matrix<T> out = g.value(a);
  for (T& v : out.data) v *= s;
  const Var o = g.next();
  return g.push(std::move(out), g.any_requires({a}), [a, o, s](Graph<T>& g) {
    const Matrix<T>& d = g.grad(o);
    Matrix<T>& ga = g.grad(a);
    for (std::size_t i = 0; i < d.size(); ++i) ga.data[i] += s * d.data[i];
  });
}

template <class T>
Var mul(Graph<T>& g, Var a, Var b) {
  const Matrix<T>& A = g.value(a);
  const Matrix<T>& B = g.value(b);
  if (!A.same_shape(B)) throw ShapeError("mul: shape mismatch");
  Matrix<T> out = A;
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] *= B.data[i];
  const Var o = g.next();
  return g.push(std::move(out), g.any_requires({a, b}), [a, b, o](Graph<T>& g) {
    const Matrix<T>& d = g.grad(o);
    if (g.requires_grad(a)) {
      Matrix<T>& ga = g.grad(a);
      const Matrix<T>& B = g.value(b);
      for (std::size_t i = 0; i < d.size(); ++i) ga.data[i] += d.data[i] * B.data[i];
    }
    if (g.requires_grad(b)) {
      Matrix<T>& gb = g.grad(b);
      const Matrix<T>& A = g.value(a);
      for (std::size_t i = 0; i < d.size(); ++i) gb.data[i] += d.data[i] * A.data[i];
    }
  });
}

template <class T>
Var relu(Graph<T>& g, Var a) {
  Matrix<T> out = g.value(a);
  for (T& v : out.data) v = v > T(0) ? v : T(0);
  const Var o = g.next();
  return g.push(std::move(out), g.any_requires({a}), [a, o](Graph<T>& g) {
    const Matrix<T>& d = g.grad(o);
    const Matrix<T>& x = g.value(a);
    Matrix<T>& ga = g.grad(a);
    for (std::size_t i = 0; i < d.size(); ++i)
      if (x.data[i] > T(0)) ga.data[i] += d.data[i];
  });
}

template <class T>
Var gelu(Graph<T>& g, Var a) {
  Matrix<T> out = g.value(a);
  for (T& v : out.data) v = detail::gelu_value(v);
  const Var o = g.next();
  return g.push(std::move(out), g.any_requires({a}), [a, o](Graph<T>& g) {
    const Matrix<T>& d = g.grad(o);
    const Matrix<T>& x = g.value(a);
    Matrix<T>& ga = g.grad(a);
    for (std::size_t i = 0; i < d.size(); ++i) ga.data[i] += d.data[i] * detail::gelu_grad(x.data[i]);
  });
}

// Inverted dropout; identity when rate == 0 or rng is null.
template <class T>
Var dropout(Graph<T>& g, Var a, double rate, Rng* rng) {
  if (rate <= 0.0 || rng == nullptr) return a;
  const Matrix<T>& A = g.value(a);
  Matrix<T> mask(A.rows, A.cols);
  const T keep_scale = T(1.0 / (1.0 - rate));
  for (T& m : mask.data) m = rng->uniform() < rate ? T(0) : keep_scale;
  Matrix<T> out = A;
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] *= mask.data[i];
  const Var o = g.next();
  return g.push(std::move(out), g.any_requires({a}), [a, o, mask = std::move(mask)](Graph<T>& g) {
    const Matrix<T>& d = g.grad(o);
    Matrix<T>& ga = g.grad(a);
    for (std::size_t i = 0; i < d.size(); ++i) ga.data[i] += d.data[i] * mask.data[i];
  });
}

template <class T>
Var layer_norm(Graph<T>& g, Var x, Var gamma, Var beta, T eps = T(1e-5)) {
  const Matrix<T>& X = g.value(x);
  const Matrix<T>& G = g.value(gamma);
  const Matrix<T>& Bt = g.value(beta);
  const std::size_t n = X.rows, d = X.cols;
  if (G.cols != d || Bt.cols != d) throw ShapeError("layer_norm: parameter width mismatch");
  Matrix<T> out(n, d), xhat(n, d);
  std::vector<T> rstd(n);
  for (std::size_t r = 0; r < n; ++r) {
    T mean = 0;
    for (std::size_t c = 0; c < d; ++c) mean += X(r, c);
    mean /= T(d);
    T var = 0;
    for (std::size_t c = 0; c < d; ++c) var += (X(r, c) - mean) * (X(r, c) - mean);
    var /= T(d);
    rstd[r] = T(1) / std::sqrt(var + eps);
    for (std::size_t c = 0; c < d; ++c) {
      xhat(r, c) = (X(r, c) - mean) * rstd[r];
      out(r, c) = xhat(r, c) * G.data[c] + Bt.data[c];
    }
  }
  const Var o = g.next();
  return g.push(std::move(out), g.any_requires({x, gamma, beta}),
                [x, gamma, beta, o, xhat = std::move(xhat), rstd = std::move(rstd)](Graph<T>& g) {
                  const Matrix<T>& dy = g.grad(o);
                  const Matrix<T>& G = g.value(gamma);
                  const std::size_t n = dy.rows, d = dy.cols;
                  if (g.requires_grad(gamma) || g.requires_grad(beta)) {
                    for (std::size_t r = 0; r < n; ++r)
                      for (std::size_t c = 0; c < d; ++c) {
                        if (g.requires_grad(gamma)) g.grad(gamma).data[c] += dy(r, c) * xhat(r, c);
                        if (g.requires_grad(beta)) g.grad(beta).data[c] += dy(r, c);
                      }
                  }
                  if (!g.requires_grad(x)) return;
                  Matrix<T>& gx = g.grad(x);
                  std::vector<T> dxhat(d);
                  for (std::size_t r = 0; r < n; ++r) {
                    T mean_dx = 0, mean_dxx = 0;
                    for (std::size_t c = 0; c < d; ++c) {
                      dxhat[c] = dy(r, c) * G.data[c];
                      mean_dx += dxhat[c];
                      mean_dxx += dxhat[c] * xhat(r, c);
                    }
                    mean_dx /= T(d);
                    mean_dxx /= T(d);
                    for (std::size_t c = 0; c < d; ++c)
                      gx(r, c) += rstd[r] * (dxhat[c] - mean_dx - xhat(r, c) * mean_dxx);
                  }
                });
}

// Row lookup: out[i] = table[ids[i]].
template <class T>
Var embedding(Graph<T>& g, Var table, const std::vector<int>& ids) {
  const Matrix<T>& E = g.value(table);
  Matrix<T> out(ids.size(), E.cols);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= E.rows)
      throw DataError("embedding: token id " + std::to_string(ids[i]) + " out of range");
    const auto src = E.row(static_cast<std::size_t>(ids[i]));
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  const Var o = g.next();
  return g.push(std::move(out), g.any_requires({table}), [table, o, ids](Graph<T>& g) {
    const Matrix<T>& d = g.grad(o);
    Matrix<T>& ge = g.grad(table);
    for (std::size_t i = 0; i < ids.size(); ++i) {
      auto dst = ge.row(static_cast<std::size_t>(ids[i]));
      const auto src = d.row(i);
      for (std::size_t c = 0; c < src.size(); ++c) dst[c] += src[c];
    }
  });
}

template <class T>
Var gather_rows(Graph<T>& g, Var x, const std::vector<std::size_t>& rows) {
  const Matrix<T>& X = g.value(x);
  Matrix<T> out(rows.size(), X.cols);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= X.rows) throw ShapeError("gather_rows: index out of range");
    const auto src = X.row(rows[i]);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  const Var o = g.next();
  return g.push(std::move(out), g.any_requires({x}), [x, o, rows](Graph<T>& g) {
    const Matrix<T>& d = g.grad(o);
    Matrix<T>& gx = g.grad(x);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      auto dst = gx.row(rows[i]);
      const auto src = d.row(i);
      for (std::size_t c = 0; c < src.size(); ++c) dst[c] += src[c];
    }
  });
}

template <class T>
Var slice_cols(Graph<T>& g, Var x, std::size_t c0, std::size_t c1) {
  const Matrix<T>& X = g.value(x);
  if (c0 > c1 || c1 > X.cols) throw ShapeError("slice_cols: bad range");
  Matrix<T> out(X.rows, c1 - c0);
  for (std::size_t r = 0; r < X.rows; ++r)
    for (std::size_t c = c0; c < c1; ++c) out(r, c - c0) = X(r, c);
  const Var o = g.next();
  return g.push(std::move(out), g.any_requires({x}), [x, o, c0](Graph<T>& g) {
    const Matrix<T>& d = g.grad(o);
    Matrix<T>& gx = g.grad(x);
    for (std::size_t r = 0; r < d.rows; ++r)
      for (std::size_t c = 0; c < d.cols; ++c) gx(r, c + c0) += d(r, c);
  });
}

template <class T>
Var slice_rows(Graph<T>& g, Var x, std::size_t r0, std::size_t r1) {
  const Matrix<T>& X = g.value(x);
  if (r0 > r1 || r1 > X.rows) throw ShapeError("slice_rows: bad range");
  Matrix<T> out(r1 - r0, X.cols);
  std::copy(X.data.begin() + static_cast<std::ptrdiff_t>(r0 * X.cols),
            X.data.begin() + static_cast<std::ptrdiff_t>(r1 * X.cols), out.data.begin());
  const Var o = g.next();
  return g.push(std::move(out), g.any_requires({x}), [x, o, r0](Graph<T>& g) {
    const Matrix<T>& d = g.grad(o);
    Matrix<T>& gx = g.grad(x);
    const std::size_t off = r0 * d.cols;
    for (std::size_t i = 0; i < d.size(); ++i) gx.data[off + i] += d.data[i];
  });
}

template <class T>
Var concat_cols(Graph<T>& g, const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const std::size_t n = g.value(parts.front()).rows;
  std::size_t total = 0;
  std::vector<std::size_t> offsets;
  for (Var p : parts) {
    if (g.value(p).rows != n) throw ShapeError("concat_cols: row mismatch");
    offsets.push_back(total);
    total += g.value(p).cols;
  }
  Matrix<T> out(n, total);
  bool rg = false;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Matrix<T>& P = g.value(parts[k]);
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < P.cols; ++c) out(r, offsets[k] + c) = P(r, c);
    rg = rg || g.any_requires({parts[k]});
  }
  const Var o = g.next();
  return g.push(std::move(out), rg, [parts, offsets, o](Graph<T>& g) {
    const Matrix<T>& d = g.grad(o);
    for (std::size_t k = 0; k < parts.size(); ++k) {
      if (!g.requires_grad(parts[k])) continue;
      Matrix<T>& gp = g.grad(parts[k]);
      for (std::size_t r = 0; r < gp.rows; ++r)
        for (std::size_t c = 0; c < gp.cols; ++c) gp(r, c) += d(r, offsets[k] + c);
    }
  });
}

// Same data, new shape (row-major order preserved).
template <class T>
Var reshape(Graph<T>& g, Var x, std::size_t rows, std::size_t cols) {
  Matrix<T> out = g.value(x);
  if (out.size() != rows * cols) throw ShapeError("reshape: element count differs");
  out.rows = rows;
  out.cols = cols;
  const Var o = g.next();
  return g.push(std::move(out), g.any_requires({x}), [x, o](Graph<T>& g) {
    const Matrix<T>& d = g.grad(o);
    Matrix<T>& gx = g.grad(x);
    for (std::size_t i = 0; i < d.size(); ++i) gx.data[i] += d.data[i];
  });
}

// Kronecker product: out[(i*p + k), (j*q + l)] = a[i,j] * b[k,l].
template <class T>
Var kron(Graph<T>& g, Var a, Var b) {
  const Matrix<T>& A = g.value(a);
  const Matrix<T>& B = g.value(b);
  const std::size_t p = B.rows, q = B.cols;
  Matrix<T> out(A.rows * p, A.cols * q);
  for (std::size_t i = 0; i < A.rows; ++i)
    for (std::size_t j = 0; j < A.cols; ++j)
      for (std::size_t k = 0; k < p; ++k)
        for (std::size_t l = 0; l < q; ++l) out(i * p + k, j * q + l) = A(i, j) * B(k, l);
  const Var o = g.next();
  return g.push(std::move(out), g.any_requires({a, b}), [a, b, o](Graph<T>& g) {
    const Matrix<T>& d = g.grad(o);
    const Matrix<T>& A = g.value(a);
    const Matrix<T>& B = g.value(b);
    const std::size_t p = B.rows, q = B.cols;
    const bool ga = g.requires_grad(a), gb = g.requires_grad(b);
    for (std::size_t i = 0; i < A.rows; ++i)
      for (std::size_t j = 0; j < A.cols; ++j)
        for (std::size_t k = 0; k < p; ++k)
          for (std::size_t l = 0; l < q; ++l) {
            const T dv = d(i * p + k, j * q + l);
            if (ga) g.grad(a)(i, j) += dv * B(k, l);
            if (gb) g.grad(b)(k, l) += dv * A(i, j);
          }
  });
}

template <class T>
Var sum(Graph<T>& g, Var x) {
  const Matrix<T>& X = g.value(x);
  T s = 0;
  for (T v : X.data) s += v;
  const Var o = g.next();
  return g.push(Matrix<T>(1, 1, s), g.any_requires({x}), [x, o](Graph<T>& g) {
    const T d = g.grad(o).data[0];
    Matrix<T>& gx = g.grad(x);
    for (T& v : gx.data) v += d;
  });
}

template <class T>
Var softmax_rows(Graph<T>& g, Var x) {
  const Matrix<T>& X = g.value(x);
  Matrix<T> out(X.rows, X.cols);
  for (std::size_t r = 0; r < X.rows; ++r) {
    const auto xr = X.row(r);
    const T mx = *std::max_element(xr.begin(), xr.end());
    T z = 0;
    for (std::size_t c = 0; c < X.cols; ++c) z += (out(r, c) = std::exp(xr[c] - mx));
    for (std::size_t c = 0; c < X.cols; ++c) out(r, c) /= z;
  }
  const Var o = g.next();
  return g.push(std::move(out), g.any_requires({x}), [x, o](Graph<T>& g) {
    const Matrix<T>& d = g.grad(o);
    const Matrix<T>& P = g.value(o);
    Matrix<T>& gx = g.grad(x);
    for (std::size_t r = 0; r < P.rows; ++r) {
      T dot = 0;
      for (std::size_t c = 0; c < P.cols; ++c) dot += d(r, c) * P(r, c);
      for (std::size_t c = 0; c < P.cols; ++c) gx(r, c) += P(r, c) * (d(r, c) - dot);
    }
  });
}

// Mean negative log-likelihood of targets[i] under softmax(logits[i]),
// averaged over rows with weight[i] != 0.
template <class T>
Var cross_entropy(Graph<T>& g, Var logits, const std::vector<int>& targets, const std::vector<std::uint8_t>& weight) {
  const Matrix<T>& L = g.value(logits);
  if (targets.size() != L.rows || weight.size() != L.rows) throw ShapeError("cross_entropy: row mismatch");
  std::size_t count = 0;
  for (auto w : weight) count += w ? 1 : 0;
  if (count == 0) throw DataError("cross_entropy: no non-padding targets");
  Matrix<T> probs(L.rows, L.cols);
  T total = 0;
  for (std::size_t r = 0; r < L.rows; ++r) {
    if (!weight[r]) continue;
    const auto lr = L.row(r);
    const T mx = *std::max_element(lr.begin(), lr.end());
    T z = 0;
    for (std::size_t c = 0; c < L.cols; ++c) z += (probs(r, c) = std::exp(lr[c] - mx));
    for (std::size_t c = 0; c < L.cols; ++c) probs(r, c) /= z;
    const auto t = static_cast<std::size_t>(targets[r]);
    if (t >= L.cols) throw DataError("cross_entropy: target id out of range");
    total += -(lr[t] - mx - std::log(z));
  }
  const T inv = T(1) / T(count);
  const Var o = g.next();
  return g.push(Matrix<T>(1, 1, total * inv), g.any_requires({logits}),
                [logits, o, targets, weight, inv, probs = std::move(probs)](Graph<T>& g) {
                  const T d = g.grad(o).data[0] * inv;
                  Matrix<T>& gl = g.grad(logits);
                  for (std::size_t r = 0; r < probs.rows; ++r) {
                    if (!weight[r]) continue;
                    for (std::size_t c = 0; c < probs.cols; ++c) gl(r, c) += d * probs(r, c);
                    gl(r, static_cast<std::size_t>(targets[r])) -= d;
                  }
                });
}

// Mean binary cross-entropy of single-logit rows. The loss and its gradient
// are computed so that (z, y) and (-z, 1-y) give exactly negated gradients.
template <class T>
Var bce_with_logits(Graph<T>& g, Var z, const std::vector<int>& labels) {
  const Matrix<T>& Z = g.value(z);
  if (Z.cols != 1 || Z.rows != labels.size()) throw ShapeError("bce_with_logits: expects [n,1] logits");
  if (Z.rows == 0) throw DataError("bce_with_logits: empty batch");
  T total = 0;
  for (std::size_t i = 0; i < Z.rows; ++i)
    total += labels[i] ? detail::softplus(-Z.data[i]) : detail::softplus(Z.data[i]);
  const T inv = T(1) / T(Z.rows);
  const Var o = g.next();
  return g.push(Matrix<T>(1, 1, total * inv), g.any_requires({z}), [z, o, labels, inv](Graph<T>& g) {
    const T d = g.grad(o).data[0] * inv;
    const Matrix<T>& Z = g.value(z);
    Matrix<T>& gz = g.grad(z);
    for (std::size_t i = 0; i < Z.rows; ++i) {
      const T s = labels[i] ? -detail::sigmoid(-Z.data[i]) : detail::sigmoid(Z.data[i]);
      gz.data[i] += d * s;
    }
  });
}

struct AttentionShape {
  std::size_t batch = 1;
  std::size_t q_len = 1;
  std::size_t k_len = 1;
  std::size_t heads = 1;
  bool causal = false;
};

// Multi-head scaled dot-product attention over flattened (batch*time, d)
// inputs. key_valid has batch*k_len entries; invalid keys get zero weight.
// A query row with no admissible key yields a zero output row.
template <class T>
Var attention(Graph<T>& g, Var q, Var k, Var v, const AttentionShape& s, const std::vector<std::uint8_t>& key_valid) {
  const Matrix<T>& Q = g.value(q);
  const Matrix<T>& K = g.value(k);
  const Matrix<T>& V = g.value(v);
  const std::size_t d = Q.cols;
  if (d % s.heads != 0) throw ShapeError("attention: width not divisible by heads");
  if (Q.rows != s.batch * s.q_len || K.rows != s.batch * s.k_len || V.rows != K.rows || K.cols != d || V.cols != d)
    throw ShapeError("attention: input shapes disagree with AttentionShape");
  if (key_valid.size() != s.batch * s.k_len) throw ShapeError("attention: key mask size");
  const std::size_t dh = d / s.heads;
  const T scl = T(1) / std::sqrt(T(dh));
  // probs laid out [batch][head][q][k]
  std::vector<T> probs(s.batch * s.heads * s.q_len * s.k_len, T(0));
  Matrix<T> out(Q.rows, d);
  std::vector<T> row(s.k_len);
  for (std::size_t b = 0; b < s.batch; ++b)
    for (std::size_t h = 0; h < s.heads; ++h)
      for (std::size_t i = 0; i < s.q_len; ++i) {
        const T* qi = &Q(b * s.q_len + i, h * dh);
        T mx = -std::numeric_limits<T>::infinity();
        bool any = false;
        for (std::size_t j = 0; j < s.k_len; ++j) {
          const bool ok = key_valid[b * s.k_len + j] && (!s.causal || j <= i);
          if (!ok) continue;
          const T* kj = &K(b * s.k_len + j, h * dh);
          T dot = 0;
          for (std::size_t c = 0; c < dh; ++c) dot += qi[c] * kj[c];
          row[j] = dot * scl;
          mx = std::max(mx, row[j]);
          any = true;
        }
        if (!any) continue;
        T* p = &probs[((b * s.heads + h) * s.q_len + i) * s.k_len];
        T z = 0;
        for (std::size_t j = 0; j < s.k_len; ++j) {
          const bool ok = key_valid[b * s.k_len + j] && (!s.causal || j <= i);
          if (!ok) continue;
          p[j] = std::exp(row[j] - mx);
          z += p[j];
        }
        T* oi = &out(b * s.q_len + i, h * dh);
        for (std::size_t j = 0; j < s.k_len; ++j) {
          if (p[j] == T(0)) continue;
          p[j] /= z;
          const T* vj = &V(b * s.k_len + j, h * dh);
          for (std::size_t c = 0; c < dh; ++c) oi[c] += p[j] * vj[c];
        }
      }
  const Var o = g.next();
  return g.push(std::move(out), g.any_requires({q, k, v}), [q, k, v, o, s, dh, scl, probs = std::move(probs)](Graph<T>& g) {
    const Matrix<T>& dO = g.grad(o);
    const Matrix<T>& Q = g.value(q);
    const Matrix<T>& K = g.value(k);
    const Matrix<T>& V = g.value(v);
    const bool gq = g.requires_grad(q), gk = g.requires_grad(k), gv = g.requires_grad(v);
    Matrix<T>* dQ = gq ? &g.grad(q) : nullptr;
    Matrix<T>* dK = gk ? &g.grad(k) : nullptr;
    Matrix<T>* dV = gv ? &g.grad(v) : nullptr;
    std::vector<T> dp(s.k_len);
    for (std::size_t b = 0; b < s.batch; ++b)
      for (std::size_t h = 0; h < s.heads; ++h)
        for (std::size_t i = 0; i < s.q_len; ++i) {
          const T* p = &probs[((b * s.heads + h) * s.q_len + i) * s.k_len];
          const T* doi = &dO(b * s.q_len + i, h * dh);
          T dot = 0;
          for (std::size_t j = 0; j < s.k_len; ++j) {
            if (p[j] == T(0)) {
              dp[j] = 0;
              continue;
            }
            const T* vj = &V(b * s.k_len + j, h * dh);
            T acc = 0;
            for (std::size_t c = 0; c < dh; ++c) acc += doi[c] * vj[c];
            dp[j] = acc;
            dot += acc * p[j];
            if (dV) {
              T* dvj = &(*dV)(b * s.k_len + j, h * dh);
              for (std::size_t c = 0; c < dh; ++c) dvj[c] += p[j] * doi[c];
            }
          }
          if (!dQ && !dK) continue;
          const T* qi = &Q(b * s.q_len + i, h * dh);
          for (std::size_t j = 0; j < s.k_len; ++j) {
            if (p[j] == T(0)) continue;
            const T ds = p[j] * (dp[j] - dot) * scl;
            const T* kj = &K(b * s.k_len + j, h * dh);
            if (dQ) {
              T* dqi = &(*dQ)(b * s.q_len + i, h * dh);
              for (std::size_t c = 0; c < dh; ++c) dqi[c] += ds * kj[c];
            }
            if (dK) {
              T* dkj = &(*dK)(b * s.k_len + j, h * dh);
              for (std::size_t c = 0; c < dh; ++c) dkj[c] += ds * qi[c];
            }
          }
        }
  });
}

// Ragged text convolution + ReLU + max-over-time pooling.
// x holds sequences back to back: sequence i occupies rows
// [offsets[i], offsets[i] + lengths[i]). Each window of `width` consecutive
// rows is flattened and multiplied by w[width*e, filters]; positions past
// the sequence end are zero. A sequence shorter than the window yields a
// single zero-padded window.
template <class T>
Var conv_maxpool(Graph<T>& g, Var x, const std::vector<std::size_t>& offsets, const std::vector<std::size_t>& lengths,
                 std::size_t width, Var w, Var bias) {
  const Matrix<T>& X = g.value(x);
  const Matrix<T>& W = g.value(w);
  const Matrix<T>& Bv = g.value(bias);
  const std::size_t e = X.cols, f = W.cols, n = offsets.size();
  if (W.rows != width * e || Bv.cols != f || lengths.size() != n) throw ShapeError("conv_maxpool: shape mismatch");
  Matrix<T> out(n, f);
  std::vector<std::size_t> arg(n * f, 0);
  std::vector<T> pre(f);
  for (std::size_t s = 0; s < n; ++s) {
    const std::size_t len = lengths[s];
    const std::size_t npos = len >= width ? len - width + 1 : 1;
    for (std::size_t c = 0; c < f; ++c) out(s, c) = -std::numeric_limits<T>::infinity();
    for (std::size_t p = 0; p < npos; ++p) {
      for (std::size_t c = 0; c < f; ++c) pre[c] = Bv.data[c];
      for (std::size_t t = 0; t < width && p + t < len; ++t) {
        const T* xr = &X(offsets[s] + p + t, 0);
        detail::gemm_nn(xr, &W(t * e, 0), pre.data(), 1, e, f);
      }
      for (std::size_t c = 0; c < f; ++c)
        if (pre[c] > out(s, c)) {
          out(s, c) = pre[c];
          arg[s * f + c] = p;
        }
    }
    for (std::size_t c = 0; c < f; ++c) out(s, c) = std::max(out(s, c), T(0));
  }
  const Var o = g.next();
  return g.push(std::move(out), g.any_requires({x, w, bias}),
                [x, w, bias, o, offsets, lengths, width, arg = std::move(arg)](Graph<T>& g) {
                  const Matrix<T>& d = g.grad(o);
                  const Matrix<T>& Y = g.value(o);
                  const Matrix<T>& X = g.value(x);
                  const Matrix<T>& W = g.value(w);
                  const std::size_t e = X.cols, f = W.cols;
                  for (std::size_t s = 0; s < offsets.size(); ++s)
                    for (std::size_t c = 0; c < f; ++c) {
                      if (Y(s, c) <= T(0)) continue;
                      const T dv = d(s, c);
                      if (dv == T(0)) continue;
                      const std::size_t p = arg[s * f + c];
                      if (g.requires_grad(bias)) g.grad(bias).data[c] += dv;
                      for (std::size_t t = 0; t < width && p + t < lengths[s]; ++t) {
                        const std::size_t r = offsets[s] + p + t;
                        for (std::size_t j = 0; j < e; ++j) {
                          if (g.requires_grad(w)) g.grad(w)(t * e + j, c) += dv * X(r, j);
                          if (g.requires_grad(x)) g.grad(x)(r, j) += dv * W(t * e + j, c);
                        }
                      }
                    }
                });
}

}  // namespace ag
}  // namespace stlr
