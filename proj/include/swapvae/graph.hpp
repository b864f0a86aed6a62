#pragma once

#include <Eigen/Core>

#include <cmath>
#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "sparse.hpp"
#include "tensor.hpp"

namespace swapvae {

// Trainable tensor with its gradient accumulator.
template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;

  Parameter() = default;
  Parameter(std::string n, Tensor<T> v) : name(std::move(n)), value(std::move(v)), grad(value.shape) {}
  void zero_grad() {
    grad.shape = value.shape;
    grad.data.assign(value.size(), T(0));
  }
};

template <typename T>
class Graph;

// Handle to a node of a Graph.
template <typename T>
struct Var {
  Graph<T>* graph = nullptr;
  int id = -1;

  const Tensor<T>& value() const { return graph->value(*this); }
  const Shape& shape() const { return value().shape; }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
};

// Tape of nodes in creation order, which is a topological order.
template <typename T>
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, int self)>;

  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    std::vector<int> inputs;
    BackwardFn backward;
    Parameter<T>* param = nullptr;
    bool requires_grad = false;
  };

  Graph() = default;
  // With track_parameters off, param() yields constants and never touches
  // Parameter state, so several graphs may share one model concurrently.
  explicit Graph(bool track_parameters) : track_parameters_(track_parameters) {}

  Var<T> constant(Tensor<T> value) { return push(std::move(value), {}, nullptr, false); }

  // Leaf whose gradient is accumulated into `p.grad` on backward.
  Var<T> param(Parameter<T>& p) {
    if (!track_parameters_) return constant(p.value);
    return variable(p);
  }

  // Like param(), but tracked even when parameters are frozen; used for
  // per-request leaves such as a latent code under optimization.
  Var<T> variable(Parameter<T>& p) {
    if (p.grad.size() != p.value.size()) p.zero_grad();
    Var<T> v = push(p.value, {}, nullptr, true);
    nodes_[v.id].param = &p;
    return v;
  }

  // Custom operation; `backward` reads grad(self) and accumulates into its inputs.
  Var<T> make_node(Tensor<T> value, std::vector<int> inputs, BackwardFn backward) {
    bool rg = false;
    for (int i : inputs) rg = rg || nodes_[i].requires_grad;
    return push(std::move(value), std::move(inputs), rg ? std::move(backward) : BackwardFn{}, rg);
  }

  const Tensor<T>& value(Var<T> v) const { return nodes_[v.id].value; }
  const Tensor<T>& value(int id) const { return nodes_[id].value; }
  const Tensor<T>& grad(int id) const { return nodes_[id].grad; }
  bool requires_grad(int id) const { return nodes_[id].requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  // Gradient buffer of an input node, allocated on first use.
  Tensor<T>& grad_buffer(int id) {
    Node& n = nodes_[id];
    if (n.grad.size() != n.value.size()) n.grad = Tensor<T>(n.value.shape);
    return n.grad;
  }

  // Reverse sweep from a scalar node; parameter leaves add into Parameter::grad.
  void backward(Var<T> loss) {
    require(nodes_[loss.id].value.size() == 1, "backward requires a scalar loss");
    grad_buffer(loss.id).data[0] = T(1);
    for (int id = loss.id; id >= 0; --id) {
      Node& n = nodes_[id];
      if (!n.requires_grad || n.grad.empty()) continue;
      if (n.param) {
        auto& pg = n.param->grad;
        for (std::size_t i = 0; i < pg.size(); ++i) pg.data[i] += n.grad.data[i];
      } else if (n.backward) {
        n.backward(*this, id);
      }
    }
  }

 private:
  Var<T> push(Tensor<T> value, std::vector<int> inputs, BackwardFn fn, bool rg) {
    nodes_.push_back(Node{std::move(value), {}, std::move(inputs), std::move(fn), nullptr, rg});
    return Var<T>{this, static_cast<int>(nodes_.size()) - 1};
  }

  std::vector<Node> nodes_;
  bool track_parameters_ = true;
};

namespace ops {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMapMat = Eigen::Map<const RowMat<T>>;

template <typename T>
ConstMapMat<T> as_matrix(const Tensor<T>& t) {
  return ConstMapMat<T>(t.data.data(), static_cast<Eigen::Index>(t.rows()),
                        static_cast<Eigen::Index>(t.cols()));
}
template <typename T>
MapMat<T> as_matrix(Tensor<T>& t) {
  return MapMat<T>(t.data.data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}

inline void check(bool cond, const std::string& op, const std::string& what) {
  if (!cond) throw DataError(op + ": " + what);
}

// a[M,K] * b[K,N] -> [M,N]
template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  Graph<T>& g = *a.graph;
  const auto& av = a.value();
  const auto& bv = b.value();
  check(av.cols() == bv.rows(), "matmul", "inner dimensions " + shape_string(av.shape) + " x " + shape_string(bv.shape));
  Tensor<T> out({av.rows(), bv.cols()});
  as_matrix(out).noalias() = as_matrix(av) * as_matrix(bv);
  const int ia = a.id, ib = b.id;
  return g.make_node(std::move(out), {ia, ib}, [ia, ib](Graph<T>& g, int self) {
    const auto& go = g.grad(self);
    if (g.requires_grad(ia)) as_matrix(g.grad_buffer(ia)).noalias() += as_matrix(go) * as_matrix(g.value(ib)).transpose();
    if (g.requires_grad(ib)) as_matrix(g.grad_buffer(ib)).noalias() += as_matrix(g.value(ia)).transpose() * as_matrix(go);
  });
}

// a[M,N] + bias[N] broadcast over rows.
template <typename T>
Var<T> add_bias(Var<T> a, Var<T> bias) {
  Graph<T>& g = *a.graph;
  const auto& av = a.value();
  const auto& bv = bias.value();
  check(bv.size() == av.cols(), "add_bias", "bias length mismatch");
  Tensor<T> out = av;
  const std::size_t n = av.cols();
  for (std::size_t r = 0; r < av.rows(); ++r) {
    for (std::size_t c = 0; c < n; ++c) out.data[r * n + c] += bv.data[c];
  }
  const int ia = a.id, ib = bias.id;
  return g.make_node(std::move(out), {ia, ib}, [ia, ib, n](Graph<T>& g, int self) {
    const auto& go = g.grad(self);
    if (g.requires_grad(ia)) {
      auto& ga = g.grad_buffer(ia);
      for (std::size_t i = 0; i < go.size(); ++i) ga.data[i] += go.data[i];
    }
    if (g.requires_grad(ib)) {
      auto& gb = g.grad_buffer(ib);
      for (std::size_t i = 0; i < go.size(); ++i) gb.data[i % n] += go.data[i];
    }
  });
}

// Block-diagonal sparse product: x is `batch` stacked [m.cols, C] blocks.
template <typename T>
Var<T> sparse_matmul(const CsrMatrix& m, Var<T> x, std::size_t batch = 1) {
  Graph<T>& g = *x.graph;
  const auto& xv = x.value();
  const std::size_t c = xv.cols();
  check(xv.rows() == batch * static_cast<std::size_t>(m.cols), "sparse_matmul", "row count mismatch");
  Tensor<T> out({batch * static_cast<std::size_t>(m.rows), c});
  m.apply<T>(xv.values(), out.values(), c, batch);
  const int ix = x.id;
  const CsrMatrix* mp = &m;
  return g.make_node(std::move(out), {ix}, [ix, mp, c, batch](Graph<T>& g, int self) {
    mp->apply_transpose_add<T>(g.grad(self).values(), g.grad_buffer(ix).values(), c, batch);
  });
}

// Gathers rows through an index table of `width` columns; output row r of
// batch b concatenates source rows table[r*width + j] of that batch. Negative
// entries contribute zeros and receive no gradient.
template <typename T>
Var<T> gather_rows(Var<T> x, std::shared_ptr<const std::vector<Index>> table, std::size_t width,
                   std::size_t batch = 1) {
  Graph<T>& g = *x.graph;
  const auto& xv = x.value();
  const std::size_t c = xv.cols();
  check(width > 0 && table->size() % width == 0, "gather_rows", "table size not a multiple of width");
  check(xv.rows() % batch == 0, "gather_rows", "rows not divisible by batch");
  const std::size_t src_rows = xv.rows() / batch;
  const std::size_t out_rows = table->size() / width;
  for (Index i : *table) check(i < static_cast<Index>(src_rows), "gather_rows", "index out of range");
  Tensor<T> out({batch * out_rows, width * c});
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t k = 0; k < table->size(); ++k) {
      const Index src = (*table)[k];
      if (src < 0) continue;
      const T* s = xv.data.data() + (b * src_rows + static_cast<std::size_t>(src)) * c;
      std::copy(s, s + c, out.data.data() + (b * table->size() + k) * c);
    }
  }
  const int ix = x.id;
  return g.make_node(std::move(out), {ix}, [ix, table, c, batch, src_rows](Graph<T>& g, int self) {
    const auto& go = g.grad(self);
    auto& gx = g.grad_buffer(ix);
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t k = 0; k < table->size(); ++k) {
        const Index src = (*table)[k];
        if (src < 0) continue;
        const T* s = go.data.data() + (b * table->size() + k) * c;
        T* d = gx.data.data() + (b * src_rows + static_cast<std::size_t>(src)) * c;
        for (std::size_t i = 0; i < c; ++i) d[i] += s[i];
      }
    }
  });
}

template <typename T>
Var<T> gather_rows(Var<T> x, std::vector<Index> rows) {
  return gather_rows(x, std::make_shared<const std::vector<Index>>(std::move(rows)), 1, 1);
}

template <typename T>
Var<T> select_columns(Var<T> x, std::vector<std::size_t> columns) {
  Graph<T>& g = *x.graph;
  const auto& xv = x.value();
  const std::size_t n = xv.cols();
  for (auto c : columns) check(c < n, "select_columns", "column out of range");
  const std::size_t m = columns.size();
  Tensor<T> out({xv.rows(), m});
  for (std::size_t r = 0; r < xv.rows(); ++r) {
    for (std::size_t j = 0; j < m; ++j) out.data[r * m + j] = xv.data[r * n + columns[j]];
  }
  const int ix = x.id;
  return g.make_node(std::move(out), {ix}, [ix, columns = std::move(columns), n, m](Graph<T>& g, int self) {
    const auto& go = g.grad(self);
    auto& gx = g.grad_buffer(ix);
    for (std::size_t r = 0; r < go.rows(); ++r) {
      for (std::size_t j = 0; j < m; ++j) gx.data[r * n + columns[j]] += go.data[r * m + j];
    }
  });
}

template <typename T>
Var<T> concat_last_axis(const std::vector<Var<T>>& parts) {
  check(!parts.empty(), "concat_last_axis", "no inputs");
  Graph<T>& g = *parts.front().graph;
  const std::size_t rows = parts.front().rows();
  std::size_t total = 0;
  std::vector<int> ids;
  std::vector<std::size_t> widths;
  for (const auto& p : parts) {
    check(p.rows() == rows, "concat_last_axis", "row count mismatch");
    total += p.cols();
    ids.push_back(p.id);
    widths.push_back(p.cols());
  }
  Tensor<T> out({rows, total});
  std::size_t off = 0;
  for (const auto& p : parts) {
    const auto& v = p.value();
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy_n(v.data.data() + r * v.cols(), v.cols(), out.data.data() + r * total + off);
    }
    off += v.cols();
  }
  return g.make_node(std::move(out), ids, [ids, widths, rows, total](Graph<T>& g, int self) {
    const auto& go = g.grad(self);
    std::size_t off = 0;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (g.requires_grad(ids[k])) {
        auto& gi = g.grad_buffer(ids[k]);
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t c = 0; c < widths[k]; ++c) gi.data[r * widths[k] + c] += go.data[r * total + off + c];
        }
      }
      off += widths[k];
    }
  });
}

template <typename T>
Var<T> reshape(Var<T> x, Shape shape) {
  check(shape_size(shape) == x.value().size(), "reshape", "element count mismatch");
  Tensor<T> out(std::move(shape), x.value().data);
  const int ix = x.id;
  return x.graph->make_node(std::move(out), {ix}, [ix](Graph<T>& g, int self) {
    auto& gx = g.grad_buffer(ix);
    const auto& go = g.grad(self);
    for (std::size_t i = 0; i < go.size(); ++i) gx.data[i] += go.data[i];
  });
}

namespace detail {

// Elementwise unary op with derivative f'(x, y) evaluated from input and output.
template <typename T, typename F, typename D>
Var<T> unary(Var<T> x, F f, D df) {
  const auto& xv = x.value();
  Tensor<T> out(xv.shape);
  for (std::size_t i = 0; i < xv.size(); ++i) out.data[i] = f(xv.data[i]);
  const int ix = x.id;
  return x.graph->make_node(std::move(out), {ix}, [ix, df](Graph<T>& g, int self) {
    const auto& go = g.grad(self);
    const auto& xv = g.value(ix);
    const auto& yv = g.value(self);
    auto& gx = g.grad_buffer(ix);
    for (std::size_t i = 0; i < go.size(); ++i) gx.data[i] += go.data[i] * df(xv.data[i], yv.data[i]);
  });
}

}  // namespace detail

template <typename T>
Var<T> elu(Var<T> x) {
  return detail::unary(
      x, [](T v) { return v > T(0) ? v : std::expm1(v); },
      [](T v, T y) { return v > T(0) ? T(1) : y + T(1); });
}

template <typename T>
Var<T> exp(Var<T> x) {
  return detail::unary(x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <typename T>
Var<T> log(Var<T> x) {
  return detail::unary(x, [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
}

template <typename T>
Var<T> square(Var<T> x) {
  return detail::unary(x, [](T v) { return v * v; }, [](T v, T) { return T(2) * v; });
}

// max(0, x); the subgradient at 0 is taken as 0.
template <typename T>
Var<T> relu(Var<T> x) {
  return detail::unary(
      x, [](T v) { return v > T(0) ? v : T(0); }, [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <typename T>
Var<T> clamp(Var<T> x, T lo, T hi) {
  return detail::unary(
      x, [lo, hi](T v) { return std::min(std::max(v, lo), hi); },
      [lo, hi](T v, T) { return (v >= lo && v <= hi) ? T(1) : T(0); });
}

template <typename T>
Var<T> scale(Var<T> x, T s) {
  return detail::unary(x, [s](T v) { return s * v; }, [s](T, T) { return s; });
}

template <typename T>
Var<T> add_scalar(Var<T> x, T s) {
  return detail::unary(x, [s](T v) { return v + s; }, [](T, T) { return T(1); });
}

namespace detail {

template <typename T, typename F, typename DA, typename DB>
Var<T> binary(Var<T> a, Var<T> b, const char* name, F f, DA da, DB db) {
  const auto& av = a.value();
  const auto& bv = b.value();
  check(av.shape == bv.shape, name, "shape mismatch " + shape_string(av.shape) + " vs " + shape_string(bv.shape));
  Tensor<T> out(av.shape);
  for (std::size_t i = 0; i < av.size(); ++i) out.data[i] = f(av.data[i], bv.data[i]);
  const int ia = a.id, ib = b.id;
  return a.graph->make_node(std::move(out), {ia, ib}, [ia, ib, da, db](Graph<T>& g, int self) {
    const auto& go = g.grad(self);
    const auto& av = g.value(ia);
    const auto& bv = g.value(ib);
    if (g.requires_grad(ia)) {
      auto& ga = g.grad_buffer(ia);
      for (std::size_t i = 0; i < go.size(); ++i) ga.data[i] += go.data[i] * da(av.data[i], bv.data[i]);
    }
    if (g.requires_grad(ib)) {
      auto& gb = g.grad_buffer(ib);
      for (std::size_t i = 0; i < go.size(); ++i) gb.data[i] += go.data[i] * db(av.data[i], bv.data[i]);
    }
  });
}

}  // namespace detail

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  return detail::binary(
      a, b, "add", [](T x, T y) { return x + y; }, [](T, T) { return T(1); }, [](T, T) { return T(1); });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  return detail::binary(
      a, b, "sub", [](T x, T y) { return x - y; }, [](T, T) { return T(1); }, [](T, T) { return T(-1); });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  return detail::binary(
      a, b, "mul", [](T x, T y) { return x * y; }, [](T, T y) { return y; }, [](T x, T) { return x; });
}

// Neumaier-compensated total; every loss term ends in one of these.
template <typename T>
T compensated_sum(const std::vector<T>& values) {
  T s = 0, c = 0;
  for (T v : values) {
    const T t = s + v;
    c += std::abs(s) >= std::abs(v) ? (s - t) + v : (v - t) + s;
    s = t;
  }
  return s + c;
}

template <typename T>
Var<T> sum(Var<T> x) {
  const auto& xv = x.value();
  const T total = compensated_sum(xv.data);
  const int ix = x.id;
  return x.graph->make_node(Tensor<T>({1}, {total}), {ix}, [ix](Graph<T>& g, int self) {
    const T go = g.grad(self).data[0];
    for (T& v : g.grad_buffer(ix).data) v += go;
  });
}

template <typename T>
Var<T> mean(Var<T> x) {
  return scale(sum(x), T(1) / static_cast<T>(x.value().size()));
}

// [M,N] -> [M,1]
template <typename T>
Var<T> row_sum(Var<T> x) {
  const auto& xv = x.value();
  const std::size_t n = xv.cols();
  Tensor<T> out({xv.rows(), 1});
  for (std::size_t r = 0; r < xv.rows(); ++r) {
    T s = 0;
    for (std::size_t c = 0; c < n; ++c) s += xv.data[r * n + c];
    out.data[r] = s;
  }
  const int ix = x.id;
  return x.graph->make_node(std::move(out), {ix}, [ix, n](Graph<T>& g, int self) {
    const auto& go = g.grad(self);
    auto& gx = g.grad_buffer(ix);
    for (std::size_t i = 0; i < gx.size(); ++i) gx.data[i] += go.data[i / n];
  });
}

// Euclidean norm of each row, [M,N] -> [M,1]; zero rows get zero gradient.
template <typename T>
Var<T> row_norm(Var<T> x) {
  const auto& xv = x.value();
  const std::size_t n = xv.cols();
  Tensor<T> out({xv.rows(), 1});
  for (std::size_t r = 0; r < xv.rows(); ++r) {
    T s = 0;
    for (std::size_t c = 0; c < n; ++c) s += xv.data[r * n + c] * xv.data[r * n + c];
    out.data[r] = std::sqrt(s);
  }
  const int ix = x.id;
  return x.graph->make_node(std::move(out), {ix}, [ix, n](Graph<T>& g, int self) {
    const auto& go = g.grad(self);
    const auto& yv = g.value(self);
    const auto& xv = g.value(ix);
    auto& gx = g.grad_buffer(ix);
    for (std::size_t r = 0; r < yv.size(); ++r) {
      if (yv.data[r] <= T(0)) continue;
      const T k = go.data[r] / yv.data[r];
      for (std::size_t c = 0; c < n; ++c) gx.data[r * n + c] += k * xv.data[r * n + c];
    }
  });
}

}  // namespace ops
}  // namespace swapvae
