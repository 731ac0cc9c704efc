#pragma once

// Minimal reverse-mode automatic differentiation over openkd::Tensor.
//
// A Var is a handle to a graph node. Ops build new nodes that remember their
// parents and a closure that pushes the node's gradient back to them.
// backward() runs the closures in reverse topological order. Parameters are
// long-lived leaf nodes; everything else lives for one forward/backward pass.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "openkd/errors.hpp"
#include "openkd/tensor.hpp"

namespace openkd::ad {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMatrix>;
using ConstMatMap = Eigen::Map<const RowMatrix>;

struct Node {
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  Tensor& grad_buffer() {
    if (grad.size() != value.size()) grad = Tensor(value.shape(), 0.0);
    return grad;
  }
};

class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  const Tensor& value() const { return node_->value; }
  Tensor& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool defined() const noexcept { return static_cast<bool>(node_); }

  // Gradient accumulated by the last backward(); zeros if none reached here.
  Tensor grad() const {
    if (node_->grad.size() == node_->value.size()) return node_->grad;
    return Tensor(node_->value.shape(), 0.0);
  }
  void zero_grad() {
    if (node_->grad.size()) node_->grad.fill(0.0);
  }

  double item() const {
    if (node_->value.size() != 1) throw DimensionError("item() on non-scalar " + shape_str(shape()));
    return node_->value[0];
  }

  const std::shared_ptr<Node>& node() const noexcept { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

inline Var constant(Tensor value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  return Var(std::move(n));
}

inline Var leaf(Tensor value, bool requires_grad = true) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->requires_grad = requires_grad;
  return Var(std::move(n));
}

namespace detail {

inline Var make(Tensor value, std::vector<Var> parents, std::function<void(Node&)> fn) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  for (const auto& p : parents) {
    if (p.requires_grad()) n->requires_grad = true;
    n->parents.push_back(p.node());
  }
  if (n->requires_grad) n->backward_fn = std::move(fn);
  return Var(std::move(n));
}

inline void require_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

inline void require_rank(const Var& a, int rank, const char* op) {
  if (a.value().rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_str(a.shape()));
  }
}

}  // namespace detail

inline void backward(const Var& root) {
  if (root.value().size() != 1) throw DimensionError("backward() needs a scalar root");
  if (!root.requires_grad()) return;

  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{root.node().get(), 0}};
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  root.node()->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn && n->grad.size() == n->value.size()) n->backward_fn(*n);
  }
}

// Gradient flows through value but not back into `a`.
inline Var detach(const Var& a) { return constant(a.value()); }

inline Var add(const Var& a, const Var& b) {
  detail::require_shape(a, b, "add");
  Tensor out = a.value() + b.value();
  auto pa = a.node(), pb = b.node();
  return detail::make(std::move(out), {a, b}, [pa, pb](Node& self) {
    if (pa->requires_grad) pa->grad_buffer() += self.grad;
    if (pb->requires_grad) pb->grad_buffer() += self.grad;
  });
}

inline Var sub(const Var& a, const Var& b) {
  detail::require_shape(a, b, "sub");
  Tensor out = a.value() - b.value();
  auto pa = a.node(), pb = b.node();
  return detail::make(std::move(out), {a, b}, [pa, pb](Node& self) {
    if (pa->requires_grad) pa->grad_buffer() += self.grad;
    if (pb->requires_grad) pb->grad_buffer() -= self.grad;
  });
}

inline Var mul(const Var& a, const Var& b) {
  detail::require_shape(a, b, "mul");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * b.value()[i];
  auto pa = a.node(), pb = b.node();
  return detail::make(std::move(out), {a, b}, [pa, pb](Node& self) {
    if (pa->requires_grad) {
      auto& g = pa->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb->value[i];
    }
    if (pb->requires_grad) {
      auto& g = pb->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa->value[i];
    }
  });
}

inline Var scale(const Var& a, double s) {
  Tensor out = a.value() * s;
  auto pa = a.node();
  return detail::make(std::move(out), {a}, [pa, s](Node& self) {
    auto& g = pa->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * self.grad[i];
  });
}

inline Var sum(const Var& a) {
  auto pa = a.node();
  return detail::make(Tensor::scalar(a.value().sum()), {a}, [pa](Node& self) {
    auto& g = pa->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[0];
  });
}

inline Var mean(const Var& a) {
  const double n = static_cast<double>(a.value().size());
  return scale(sum(a), 1.0 / n);
}

inline Var reshape(const Var& a, Shape shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  auto pa = a.node();
  return detail::make(std::move(out), {a}, [pa](Node& self) {
    auto& g = pa->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

inline Var relu(const Var& a) {
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::max(0.0, a.value()[i]);
  auto pa = a.node();
  return detail::make(std::move(out), {a}, [pa](Node& self) {
    auto& g = pa->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (pa->value[i] > 0.0) g[i] += self.grad[i];
    }
  });
}

// Weighted sum of equally-shaped inputs: sum_i w_i * x_i.
inline Var weighted_sum(const std::vector<Var>& xs, const std::vector<double>& w) {
  if (xs.empty() || xs.size() != w.size()) throw ArgumentError("weighted_sum: bad arguments");
  Tensor out(xs[0].shape(), 0.0);
  for (std::size_t k = 0; k < xs.size(); ++k) {
    detail::require_shape(xs[0], xs[k], "weighted_sum");
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += w[k] * xs[k].value()[i];
  }
  std::vector<std::shared_ptr<Node>> ps;
  for (const auto& x : xs) ps.push_back(x.node());
  return detail::make(std::move(out), xs, [ps, w](Node& self) {
    for (std::size_t k = 0; k < ps.size(); ++k) {
      if (!ps[k]->requires_grad) continue;
      auto& g = ps[k]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += w[k] * self.grad[i];
    }
  });
}

inline Var average(const std::vector<Var>& xs) {
  if (xs.empty()) throw ArgumentError("average of an empty list");
  return weighted_sum(xs, std::vector<double>(xs.size(), 1.0 / static_cast<double>(xs.size())));
}

// [n x k] * [k x m]
inline Var matmul(const Var& a, const Var& b) {
  detail::require_rank(a, 2, "matmul");
  detail::require_rank(b, 2, "matmul");
  const int n = a.shape()[0], k = a.shape()[1], m = b.shape()[1];
  if (b.shape()[0] != k) {
    throw DimensionError("matmul: inner dimensions differ " + shape_str(a.shape()) + " * " +
                         shape_str(b.shape()));
  }
  Tensor out({n, m});
  MatMap(out.data(), n, m).noalias() =
      ConstMatMap(a.value().data(), n, k) * ConstMatMap(b.value().data(), k, m);
  auto pa = a.node(), pb = b.node();
  return detail::make(std::move(out), {a, b}, [pa, pb, n, k, m](Node& self) {
    ConstMatMap g(self.grad.data(), n, m);
    if (pa->requires_grad) {
      MatMap(pa->grad_buffer().data(), n, k).noalias() +=
          g * ConstMatMap(pb->value.data(), k, m).transpose();
    }
    if (pb->requires_grad) {
      MatMap(pb->grad_buffer().data(), k, m).noalias() +=
          ConstMatMap(pa->value.data(), n, k).transpose() * g;
    }
  });
}

inline Var transpose(const Var& a) {
  detail::require_rank(a, 2, "transpose");
  const int n = a.shape()[0], m = a.shape()[1];
  Tensor out({m, n});
  MatMap(out.data(), m, n) = ConstMatMap(a.value().data(), n, m).transpose();
  auto pa = a.node();
  return detail::make(std::move(out), {a}, [pa, n, m](Node& self) {
    MatMap(pa->grad_buffer().data(), n, m) += ConstMatMap(self.grad.data(), m, n).transpose();
  });
}

// Adds a length-m vector to every row of an [n x m] matrix (or to every cell
// of an [h x w x m] grid).
inline Var add_row_vector(const Var& a, const Var& v) {
  const int m = a.shape().back();
  if (v.value().size() != static_cast<std::size_t>(m)) {
    throw DimensionError("add_row_vector: vector length " + std::to_string(v.value().size()) +
                         " vs trailing dim " + std::to_string(m));
  }
  Tensor out = a.value();
  const std::size_t rows = out.size() / m;
  for (std::size_t r = 0; r < rows; ++r)
    for (int c = 0; c < m; ++c) out[r * m + c] += v.value()[c];
  auto pa = a.node(), pv = v.node();
  return detail::make(std::move(out), {a, v}, [pa, pv, rows, m](Node& self) {
    if (pa->requires_grad) pa->grad_buffer() += self.grad;
    if (pv->requires_grad) {
      auto& g = pv->grad_buffer();
      for (std::size_t r = 0; r < rows; ++r)
        for (int c = 0; c < m; ++c) g[c] += self.grad[r * m + c];
    }
  });
}

// Multiplies channel c of every cell by v[c]. Works for [h x w x c] grids and
// [n x c] matrices alike.
inline Var mul_row_vector(const Var& a, const Var& v) {
  const int m = a.shape().back();
  if (v.value().size() != static_cast<std::size_t>(m)) {
    throw DimensionError("channel-wise multiply: prototype length " +
                         std::to_string(v.value().size()) + " vs feature channels " +
                         std::to_string(m));
  }
  Tensor out = a.value();
  const std::size_t rows = out.size() / m;
  for (std::size_t r = 0; r < rows; ++r)
    for (int c = 0; c < m; ++c) out[r * m + c] *= v.value()[c];
  auto pa = a.node(), pv = v.node();
  return detail::make(std::move(out), {a, v}, [pa, pv, rows, m](Node& self) {
    if (pa->requires_grad) {
      auto& g = pa->grad_buffer();
      for (std::size_t r = 0; r < rows; ++r)
        for (int c = 0; c < m; ++c) g[r * m + c] += self.grad[r * m + c] * pv->value[c];
    }
    if (pv->requires_grad) {
      auto& g = pv->grad_buffer();
      for (std::size_t r = 0; r < rows; ++r)
        for (int c = 0; c < m; ++c) g[c] += self.grad[r * m + c] * pa->value[r * m + c];
    }
  });
}

// Row i of an [n x c] matrix as a length-c vector.
inline Var select_row(const Var& a, int i) {
  detail::require_rank(a, 2, "select_row");
  const int n = a.shape()[0], c = a.shape()[1];
  if (i < 0 || i >= n) throw DimensionError("select_row: index out of range");
  Tensor out({c});
  std::copy_n(a.value().data() + static_cast<std::size_t>(i) * c, c, out.data());
  auto pa = a.node();
  return detail::make(std::move(out), {a}, [pa, i, c](Node& self) {
    auto& g = pa->grad_buffer();
    for (int k = 0; k < c; ++k) g[static_cast<std::size_t>(i) * c + k] += self.grad[k];
  });
}

// Stacks equal-length vectors into an [n x c] matrix.
inline Var stack_rows(const std::vector<Var>& rows) {
  if (rows.empty()) throw ArgumentError("stack_rows: empty list");
  const int c = static_cast<int>(rows[0].value().size());
  const int n = static_cast<int>(rows.size());
  Tensor out({n, c});
  for (int i = 0; i < n; ++i) {
    if (rows[i].value().size() != static_cast<std::size_t>(c))
      throw DimensionError("stack_rows: unequal vector lengths");
    std::copy_n(rows[i].value().data(), c, out.data() + static_cast<std::size_t>(i) * c);
  }
  std::vector<std::shared_ptr<Node>> ps;
  for (const auto& r : rows) ps.push_back(r.node());
  return detail::make(std::move(out), rows, [ps, c](Node& self) {
    for (std::size_t i = 0; i < ps.size(); ++i) {
      if (!ps[i]->requires_grad) continue;
      auto& g = ps[i]->grad_buffer();
      for (int k = 0; k < c; ++k) g[k] += self.grad[i * c + k];
    }
  });
}

// Sum over cells of an [h x w x c] grid weighted by a fixed [h x w] map.
inline Var weighted_cell_sum(const Var& grid, const Tensor& weights) {
  detail::require_rank(grid, 3, "weighted_cell_sum");
  const int h = grid.shape()[0], w = grid.shape()[1], c = grid.shape()[2];
  if (weights.shape() != Shape{h, w}) throw DimensionError("weighted_cell_sum: weight shape");
  Tensor out({c}, 0.0);
  for (int i = 0; i < h * w; ++i) {
    const double wi = weights[i];
    if (wi == 0.0) continue;
    for (int k = 0; k < c; ++k) out[k] += wi * grid.value()[static_cast<std::size_t>(i) * c + k];
  }
  auto pg = grid.node();
  return detail::make(std::move(out), {grid}, [pg, weights, h, w, c](Node& self) {
    auto& g = pg->grad_buffer();
    for (int i = 0; i < h * w; ++i) {
      const double wi = weights[i];
      if (wi == 0.0) continue;
      for (int k = 0; k < c; ++k) g[static_cast<std::size_t>(i) * c + k] += wi * self.grad[k];
    }
  });
}

// Row-wise log-softmax of an [n x m] matrix.
inline Var log_softmax_rows(const Var& a) {
  detail::require_rank(a, 2, "log_softmax_rows");
  const int n = a.shape()[0], m = a.shape()[1];
  Tensor out({n, m});
  for (int i = 0; i < n; ++i) {
    double mx = -INFINITY;
    for (int j = 0; j < m; ++j) mx = std::max(mx, a.value().at(i, j));
    double s = 0.0;
    for (int j = 0; j < m; ++j) s += std::exp(a.value().at(i, j) - mx);
    const double lse = mx + std::log(s);
    for (int j = 0; j < m; ++j) out.at(i, j) = a.value().at(i, j) - lse;
  }
  auto pa = a.node();
  Tensor logp = out;
  return detail::make(std::move(out), {a}, [pa, logp, n, m](Node& self) {
    auto& g = pa->grad_buffer();
    for (int i = 0; i < n; ++i) {
      double gs = 0.0;
      for (int j = 0; j < m; ++j) gs += self.grad.at(i, j);
      for (int j = 0; j < m; ++j)
        g.at(i, j) += self.grad.at(i, j) - std::exp(logp.at(i, j)) * gs;
    }
  });
}

inline Var softmax_rows(const Var& a) {
  detail::require_rank(a, 2, "softmax_rows");
  const int n = a.shape()[0], m = a.shape()[1];
  Tensor out({n, m});
  for (int i = 0; i < n; ++i) {
    double mx = -INFINITY;
    for (int j = 0; j < m; ++j) mx = std::max(mx, a.value().at(i, j));
    double s = 0.0;
    for (int j = 0; j < m; ++j) s += (out.at(i, j) = std::exp(a.value().at(i, j) - mx));
    for (int j = 0; j < m; ++j) out.at(i, j) /= s;
  }
  auto pa = a.node();
  Tensor p = out;
  return detail::make(std::move(out), {a}, [pa, p, n, m](Node& self) {
    auto& g = pa->grad_buffer();
    for (int i = 0; i < n; ++i) {
      double dotp = 0.0;
      for (int j = 0; j < m; ++j) dotp += self.grad.at(i, j) * p.at(i, j);
      for (int j = 0; j < m; ++j) g.at(i, j) += p.at(i, j) * (self.grad.at(i, j) - dotp);
    }
  });
}

// Mean of the diagonal of a square matrix.
inline Var mean_diagonal(const Var& a) {
  detail::require_rank(a, 2, "mean_diagonal");
  const int n = a.shape()[0];
  if (a.shape()[1] != n) throw DimensionError("mean_diagonal: matrix is not square");
  double s = 0.0;
  for (int i = 0; i < n; ++i) s += a.value().at(i, i);
  auto pa = a.node();
  return detail::make(Tensor::scalar(s / n), {a}, [pa, n](Node& self) {
    auto& g = pa->grad_buffer();
    for (int i = 0; i < n; ++i) g.at(i, i) += self.grad[0] / n;
  });
}

// Pairwise cosine similarities between the rows of a [n x c] and b [m x c].
inline Var cosine_matrix(const Var& a, const Var& b) {
  detail::require_rank(a, 2, "cosine_matrix");
  detail::require_rank(b, 2, "cosine_matrix");
  const int n = a.shape()[0], m = b.shape()[0], c = a.shape()[1];
  if (b.shape()[1] != c) throw DimensionError("cosine_matrix: prototype dims differ");
  auto norms = [c](const Tensor& t, int rows) {
    std::vector<double> out(rows);
    for (int i = 0; i < rows; ++i) {
      out[i] = l2_norm(std::span<const double>(t.data() + static_cast<std::size_t>(i) * c, c));
      if (out[i] == 0.0) throw NumericError("cosine similarity of a zero-norm prototype");
    }
    return out;
  };
  const auto na = norms(a.value(), n);
  const auto nb = norms(b.value(), m);
  Tensor out({n, m});
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < m; ++j) {
      double d = 0.0;
      for (int k = 0; k < c; ++k) d += a.value().at(i, k) * b.value().at(j, k);
      out.at(i, j) = d / (na[i] * nb[j]);
    }
  auto pa = a.node(), pb = b.node();
  Tensor cosv = out;
  return detail::make(std::move(out), {a, b}, [pa, pb, cosv, na, nb, n, m, c](Node& self) {
    // d cos(a,b)/da = b/(|a||b|) - cos * a/|a|^2
    if (pa->requires_grad) {
      auto& g = pa->grad_buffer();
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < m; ++j) {
          const double gij = self.grad.at(i, j);
          if (gij == 0.0) continue;
          for (int k = 0; k < c; ++k)
            g.at(i, k) += gij * (pb->value.at(j, k) / (na[i] * nb[j]) -
                                 cosv.at(i, j) * pa->value.at(i, k) / (na[i] * na[i]));
        }
    }
    if (pb->requires_grad) {
      auto& g = pb->grad_buffer();
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < m; ++j) {
          const double gij = self.grad.at(i, j);
          if (gij == 0.0) continue;
          for (int k = 0; k < c; ++k)
            g.at(j, k) += gij * (pa->value.at(i, k) / (na[i] * nb[j]) -
                                 cosv.at(i, j) * pb->value.at(j, k) / (nb[j] * nb[j]));
        }
    }
  });
}

inline Var mse(const Var& pred, const Var& target) {
  detail::require_shape(pred, target, "mse");
  const Tensor diff = pred.value() - target.value();
  double s = 0.0;
  for (double v : diff.values()) s += v * v;
  const double n = static_cast<double>(diff.size());
  auto pp = pred.node(), pt = target.node();
  return detail::make(Tensor::scalar(s / n), {pred, target}, [pp, pt, diff, n](Node& self) {
    const double k = 2.0 * self.grad[0] / n;
    if (pp->requires_grad) {
      auto& g = pp->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += k * diff[i];
    }
    if (pt->requires_grad) {
      auto& g = pt->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= k * diff[i];
    }
  });
}

// Row-wise layer normalization with learned gain and bias.
inline Var layer_norm_rows(const Var& a, const Var& gain, const Var& bias, double eps = 1e-5) {
  detail::require_rank(a, 2, "layer_norm_rows");
  const int n = a.shape()[0], c = a.shape()[1];
  Tensor xhat({n, c});
  std::vector<double> inv_std(n);
  for (int i = 0; i < n; ++i) {
    double mu = 0.0;
    for (int k = 0; k < c; ++k) mu += a.value().at(i, k);
    mu /= c;
    double var = 0.0;
    for (int k = 0; k < c; ++k) var += (a.value().at(i, k) - mu) * (a.value().at(i, k) - mu);
    var /= c;
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (int k = 0; k < c; ++k) xhat.at(i, k) = (a.value().at(i, k) - mu) * inv_std[i];
  }
  Tensor out({n, c});
  for (int i = 0; i < n; ++i)
    for (int k = 0; k < c; ++k) out.at(i, k) = xhat.at(i, k) * gain.value()[k] + bias.value()[k];
  auto pa = a.node(), pg = gain.node(), pb = bias.node();
  return detail::make(std::move(out), {a, gain, bias},
                      [pa, pg, pb, xhat, inv_std, n, c](Node& self) {
    if (pg->requires_grad) {
      auto& g = pg->grad_buffer();
      for (int i = 0; i < n; ++i)
        for (int k = 0; k < c; ++k) g[k] += self.grad.at(i, k) * xhat.at(i, k);
    }
    if (pb->requires_grad) {
      auto& g = pb->grad_buffer();
      for (int i = 0; i < n; ++i)
        for (int k = 0; k < c; ++k) g[k] += self.grad.at(i, k);
    }
    if (pa->requires_grad) {
      auto& g = pa->grad_buffer();
      for (int i = 0; i < n; ++i) {
        double s1 = 0.0, s2 = 0.0;
        for (int k = 0; k < c; ++k) {
          const double dxh = self.grad.at(i, k) * pg->value[k];
          s1 += dxh;
          s2 += dxh * xhat.at(i, k);
        }
        for (int k = 0; k < c; ++k) {
          const double dxh = self.grad.at(i, k) * pg->value[k];
          g.at(i, k) += inv_std[i] / c * (c * dxh - s1 - xhat.at(i, k) * s2);
        }
      }
    }
  });
}

// Same-padded stride-1 convolution of an [h x w x cin] grid with a
// [k x k x cin x cout] kernel, implemented as im2col + GEMM.
inline Var conv2d(const Var& x, const Var& kernel, const Var& bias) {
  detail::require_rank(x, 3, "conv2d");
  const auto& ks = kernel.shape();
  if (ks.size() != 4 || ks[0] != ks[1] || ks[0] % 2 == 0)
    throw DimensionError("conv2d: kernel must be [k x k x cin x cout] with odd k");
  const int h = x.shape()[0], w = x.shape()[1], cin = x.shape()[2];
  const int k = ks[0], cout = ks[3], pad = k / 2;
  if (ks[2] != cin) {
    throw DimensionError("conv2d: kernel expects " + std::to_string(ks[2]) +
                         " input channels, got " + std::to_string(cin));
  }
  const int cols = k * k * cin;
  RowMatrix im2col = RowMatrix::Zero(h * w, cols);
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j) {
      double* row = im2col.data() + static_cast<std::size_t>(i * w + j) * cols;
      for (int di = 0; di < k; ++di) {
        const int si = i + di - pad;
        if (si < 0 || si >= h) continue;
        for (int dj = 0; dj < k; ++dj) {
          const int sj = j + dj - pad;
          if (sj < 0 || sj >= w) continue;
          std::copy_n(x.value().data() + static_cast<std::size_t>(si * w + sj) * cin, cin,
                      row + (di * k + dj) * cin);
        }
      }
    }
  Tensor out({h, w, cout});
  MatMap y(out.data(), h * w, cout);
  y.noalias() = im2col * ConstMatMap(kernel.value().data(), cols, cout);
  if (bias.defined()) {
    if (bias.value().size() != static_cast<std::size_t>(cout)) throw DimensionError("conv2d: bias");
    for (int r = 0; r < h * w; ++r)
      for (int c = 0; c < cout; ++c) y(r, c) += bias.value()[c];
  }
  auto px = x.node(), pk = kernel.node();
  auto pb = bias.defined() ? bias.node() : nullptr;
  std::vector<Var> parents{x, kernel};
  if (bias.defined()) parents.push_back(bias);
  auto cols_ptr = std::make_shared<RowMatrix>(std::move(im2col));
  return detail::make(std::move(out), parents,
                      [px, pk, pb, cols_ptr, h, w, cin, k, cout, pad, cols](Node& self) {
    ConstMatMap g(self.grad.data(), h * w, cout);
    if (pk->requires_grad) {
      MatMap(pk->grad_buffer().data(), cols, cout).noalias() += cols_ptr->transpose() * g;
    }
    if (pb && pb->requires_grad) {
      auto& gb = pb->grad_buffer();
      for (int r = 0; r < h * w; ++r)
        for (int c = 0; c < cout; ++c) gb[c] += g(r, c);
    }
    if (px->requires_grad) {
      RowMatrix dcols = g * ConstMatMap(pk->value.data(), cols, cout).transpose();
      auto& gx = px->grad_buffer();
      for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j) {
          const double* row = dcols.data() + static_cast<std::size_t>(i * w + j) * cols;
          for (int di = 0; di < k; ++di) {
            const int si = i + di - pad;
            if (si < 0 || si >= h) continue;
            for (int dj = 0; dj < k; ++dj) {
              const int sj = j + dj - pad;
              if (sj < 0 || sj >= w) continue;
              double* dst = gx.data() + static_cast<std::size_t>(si * w + sj) * cin;
              const double* src = row + (di * k + dj) * cin;
              for (int c = 0; c < cin; ++c) dst[c] += src[c];
            }
          }
        }
    }
  });
}

// Transposed convolution of an [h x w x cin] grid with a [k x k x cin x cout]
// kernel: output size (h-1)*stride - 2*pad + k.
inline Var conv_transpose2d(const Var& x, const Var& kernel, const Var& bias, int stride, int pad) {
  detail::require_rank(x, 3, "conv_transpose2d");
  const auto& ks = kernel.shape();
  const int h = x.shape()[0], w = x.shape()[1], cin = x.shape()[2];
  if (ks.size() != 4 || ks[0] != ks[1] || ks[2] != cin)
    throw DimensionError("conv_transpose2d: kernel shape " + shape_str(ks));
  const int k = ks[0], cout = ks[3];
  const int oh = (h - 1) * stride - 2 * pad + k, ow = (w - 1) * stride - 2 * pad + k;
  Tensor out({oh, ow, cout}, 0.0);
  const Tensor& xv = x.value();
  const Tensor& kv = kernel.value();
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j)
      for (int di = 0; di < k; ++di) {
        const int oi = i * stride - pad + di;
        if (oi < 0 || oi >= oh) continue;
        for (int dj = 0; dj < k; ++dj) {
          const int oj = j * stride - pad + dj;
          if (oj < 0 || oj >= ow) continue;
          for (int ci = 0; ci < cin; ++ci) {
            const double xval = xv.at(i, j, ci);
            const double* kr = kv.data() + ((static_cast<std::size_t>(di) * k + dj) * cin + ci) * cout;
            for (int co = 0; co < cout; ++co) out.at(oi, oj, co) += xval * kr[co];
          }
        }
      }
  if (bias.defined()) {
    for (int r = 0; r < oh * ow; ++r)
      for (int co = 0; co < cout; ++co) out[static_cast<std::size_t>(r) * cout + co] += bias.value()[co];
  }
  auto px = x.node(), pk = kernel.node();
  auto pb = bias.defined() ? bias.node() : nullptr;
  std::vector<Var> parents{x, kernel};
  if (bias.defined()) parents.push_back(bias);
  return detail::make(std::move(out), parents,
                      [px, pk, pb, h, w, cin, k, cout, oh, ow, stride, pad](Node& self) {
    const Tensor& g = self.grad;
    Tensor* gx = px->requires_grad ? &px->grad_buffer() : nullptr;
    Tensor* gk = pk->requires_grad ? &pk->grad_buffer() : nullptr;
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j)
        for (int di = 0; di < k; ++di) {
          const int oi = i * stride - pad + di;
          if (oi < 0 || oi >= oh) continue;
          for (int dj = 0; dj < k; ++dj) {
            const int oj = j * stride - pad + dj;
            if (oj < 0 || oj >= ow) continue;
            for (int ci = 0; ci < cin; ++ci) {
              const std::size_t kofs = ((static_cast<std::size_t>(di) * k + dj) * cin + ci) * cout;
              for (int co = 0; co < cout; ++co) {
                const double go = g.at(oi, oj, co);
                if (gx) gx->at(i, j, ci) += go * pk->value[kofs + co];
                if (gk) (*gk)[kofs + co] += go * px->value.at(i, j, ci);
              }
            }
          }
        }
    if (pb && pb->requires_grad) {
      auto& gb = pb->grad_buffer();
      for (int r = 0; r < oh * ow; ++r)
        for (int co = 0; co < cout; ++co) gb[co] += g[static_cast<std::size_t>(r) * cout + co];
    }
  });
}

}  // namespace openkd::ad
