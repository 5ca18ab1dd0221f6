#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "mhss/errors.hpp"
#include "mhss/flops.hpp"

namespace mhss {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ')';
  return os.str();
}

namespace detail {
inline std::uint64_t next_node_seq() {
  thread_local std::uint64_t seq = 0;
  return seq++;
}
inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

/// One recorded value in the compute graph. Ops append nodes in execution
/// order, so the creation sequence number already is a topological order.
/// Backward closures read their own grad and accumulate (+=) into parents'
/// grads, never overwrite; shared inputs therefore sum contributions from
/// every consumer.
struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // sized lazily; leaf grads persist across backward calls
  bool requires_grad = false;
  std::string op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;
  std::uint64_t seq = detail::next_node_seq();

  bool is_leaf() const { return parents.empty(); }
  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }
};

/// Shared-ownership handle to a Node. Cheap to copy; holding any tensor of
/// a graph keeps its upstream subgraph alive. Values are immutable once an
/// op produced them; only leaf tensors (parameters) are meant to be edited
/// in place between graph constructions.
class Tensor {
 public:
  Tensor() : node_(std::make_shared<Node>()) {}

  static Tensor from(Shape shape, std::vector<double> values) {
    if (shape_numel(shape) != values.size()) {
      throw DimensionError("tensor: shape " + shape_str(shape) + " expects " +
                           std::to_string(shape_numel(shape)) + " values, got " +
                           std::to_string(values.size()));
    }
    Tensor t;
    t.node_->shape = std::move(shape);
    t.node_->data = std::move(values);
    return t;
  }

  static Tensor zeros(Shape shape) {
    return full(std::move(shape), 0.0);
  }

  static Tensor full(Shape shape, double value) {
    const std::size_t n = shape_numel(shape);
    Tensor t;
    t.node_->shape = std::move(shape);
    t.node_->data.assign(n, value);
    return t;
  }

  static Tensor scalar(double value) { return from({1}, {value}); }

  /// Leaf tensor that participates in gradient accumulation.
  static Tensor param(Shape shape, std::vector<double> values) {
    Tensor t = from(std::move(shape), std::move(values));
    t.node_->requires_grad = true;
    return t;
  }

  /// Zero-filled parameter leaf.
  static Tensor param(Shape shape) {
    Tensor t = zeros(std::move(shape));
    t.node_->requires_grad = true;
    return t;
  }

  /// Raw graph-node construction: output value plus a closure that routes
  /// this node's grad to its parents. Also the extension point tests use to
  /// plant deliberately wrong backward rules.
  static Tensor make_op(Shape shape, std::vector<double> data, std::vector<Tensor> parents,
                        std::string op, std::function<void(Node&)> backward) {
    Tensor t = from(std::move(shape), std::move(data));
    t.node_->op = std::move(op);
    bool needs_grad = false;
    for (const Tensor& p : parents) needs_grad = needs_grad || p.requires_grad();
    if (detail::grad_mode() && needs_grad) {
      t.node_->requires_grad = true;
      t.node_->parents.reserve(parents.size());
      for (Tensor& p : parents) t.node_->parents.push_back(p.node_);
      t.node_->backward_fn = std::move(backward);
    }
    return t;
  }

  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->data.size(); }

  std::vector<double>& data() { return node_->data; }
  const std::vector<double>& data() const { return node_->data; }

  double value() const {
    if (size() != 1) {
      throw ContractError("tensor: value() needs a single element, shape is " + shape_str(shape()));
    }
    return node_->data[0];
  }

  double at(const std::vector<std::size_t>& idx) const {
    return node_->data[flat_index(idx)];
  }

  bool requires_grad() const { return node_->requires_grad; }
  bool has_grad() const { return !node_->grad.empty(); }

  const std::vector<double>& grad() const {
    if (node_->grad.empty()) {
      throw ContractError("tensor: no gradient recorded for op '" + node_->op + "'");
    }
    return node_->grad;
  }

  void zero_grad() {
    if (node_->requires_grad) node_->grad.assign(node_->data.size(), 0.0);
  }

  const std::string& op() const { return node_->op; }
  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::size_t flat_index(const std::vector<std::size_t>& idx) const {
    const Shape& s = node_->shape;
    if (idx.size() != s.size()) {
      throw DimensionError("tensor: index rank " + std::to_string(idx.size()) +
                           " does not match shape " + shape_str(s));
    }
    std::size_t flat = 0;
    for (std::size_t k = 0; k < idx.size(); ++k) {
      if (idx[k] >= s[k]) {
        throw ContractError("tensor: index " + std::to_string(idx[k]) + " out of range for axis " +
                            std::to_string(k) + " of shape " + shape_str(s));
      }
      flat = flat * s[k] + idx[k];
    }
    return flat;
  }

  std::shared_ptr<Node> node_;
};

/// Disables graph recording in scope. Values are identical either way; this
/// only skips storing parents and backward closures (used for evaluation
/// and finite-difference probes).
struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = prev; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

namespace detail {

inline void accumulate(Node& dst, const std::vector<double>& contribution) {
  dst.ensure_grad();
  for (std::size_t i = 0; i < contribution.size(); ++i) dst.grad[i] += contribution[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Matrix product.
//
// Supported shapes: (m,k)x(k,n), (B,m,k)x(k,n) and (B,m,k)x(B,k,n); the
// model needs nothing wider. Records batch*m*k*n MACs under the active
// FlopStage (or "matmul").
// ---------------------------------------------------------------------------
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  const std::string mismatch =
      "matmul: incompatible shapes: lhs " + shape_str(sa) + ", rhs " + shape_str(sb);
  if (sa.size() < 2 || sa.size() > 3 || sb.size() < 2 || sb.size() > 3 || sb.size() > sa.size()) {
    throw DimensionError(mismatch);
  }

  const std::size_t batch = sa.size() == 3 ? sa[0] : 1;
  const std::size_t m = sa[sa.size() - 2];
  const std::size_t k = sa[sa.size() - 1];
  const std::size_t k2 = sb[sb.size() - 2];
  const std::size_t n = sb[sb.size() - 1];
  const bool batched_rhs = sb.size() == 3;
  if (k != k2 || (batched_rhs && sb[0] != batch)) throw DimensionError(mismatch);

  Shape out_shape = sa.size() == 3 ? Shape{batch, m, n} : Shape{m, n};
  std::vector<double> out(batch * m * n, 0.0);
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  for (std::size_t bi = 0; bi < batch; ++bi) {
    const double* A = pa + bi * m * k;
    const double* B = batched_rhs ? pb + bi * k * n : pb;
    double* C = out.data() + bi * m * n;
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t kk = 0; kk < k; ++kk) {
        const double av = A[i * k + kk];
        const double* Brow = B + kk * n;
        double* Crow = C + i * n;
        for (std::size_t j = 0; j < n; ++j) Crow[j] += av * Brow[j];
      }
    }
  }
  flop_counter().add(current_stage("matmul"),
                     static_cast<std::uint64_t>(batch) * m * k * n);

  return Tensor::make_op(
      std::move(out_shape), std::move(out), {a, b}, "matmul",
      [batch, m, k, n, batched_rhs](Node& self) {
        Node& na = *self.parents[0];
        Node& nb = *self.parents[1];
        const double* g = self.grad.data();
        if (na.requires_grad) {
          na.ensure_grad();
          // dA[b] += dC[b] * B^T, written as row dot products
          for (std::size_t bi = 0; bi < batch; ++bi) {
            const double* G = g + bi * m * n;
            const double* B = batched_rhs ? nb.data.data() + bi * k * n : nb.data.data();
            double* GA = na.grad.data() + bi * m * k;
            for (std::size_t i = 0; i < m; ++i) {
              const double* Grow = G + i * n;
              for (std::size_t kk = 0; kk < k; ++kk) {
                const double* Brow = B + kk * n;
                double acc = 0.0;
                for (std::size_t j = 0; j < n; ++j) acc += Grow[j] * Brow[j];
                GA[i * k + kk] += acc;
              }
            }
          }
        }
        if (nb.requires_grad) {
          nb.ensure_grad();
          // dB += A[b]^T * dC[b], summed over the batch when rhs is shared
          for (std::size_t bi = 0; bi < batch; ++bi) {
            const double* G = g + bi * m * n;
            const double* A = na.data.data() + bi * m * k;
            double* GB = batched_rhs ? nb.grad.data() + bi * k * n : nb.grad.data();
            for (std::size_t i = 0; i < m; ++i) {
              for (std::size_t kk = 0; kk < k; ++kk) {
                const double av = A[i * k + kk];
                const double* Grow = G + i * n;
                double* GBrow = GB + kk * n;
                for (std::size_t j = 0; j < n; ++j) GBrow[j] += av * Grow[j];
              }
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Elementwise ops.
// ---------------------------------------------------------------------------

inline void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch: " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

/// Stable logistic; branches on sign so exp never overflows. The result is
/// clamped into the open interval (0,1): saturated inputs map to the
/// nearest representable value below 1 (resp. the smallest normal double).
inline Tensor sigmoid(const Tensor& x) {
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double v = x.data()[i];
    if (std::isnan(v)) throw NumericError("sigmoid: NaN input at element " + std::to_string(i));
    double y;
    if (v >= 0.0) {
      y = 1.0 / (1.0 + std::exp(-v));
    } else {
      const double e = std::exp(v);
      y = e / (1.0 + e);
    }
    if (y >= 1.0) y = std::nextafter(1.0, 0.0);
    if (y <= 0.0) y = std::numeric_limits<double>::min();
    out[i] = y;
  }
  return Tensor::make_op(x.shape(), std::move(out), {x}, "sigmoid", [](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (std::size_t i = 0; i < self.data.size(); ++i) {
      const double y = self.data[i];
      p.grad[i] += self.grad[i] * y * (1.0 - y);
    }
  });
}

inline Tensor relu(const Tensor& x) {
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x.data()[i] > 0.0 ? x.data()[i] : 0.0;
  return Tensor::make_op(x.shape(), std::move(out), {x}, "relu", [](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (std::size_t i = 0; i < self.data.size(); ++i) {
      if (p.data[i] > 0.0) p.grad[i] += self.grad[i];
    }
  });
}

inline Tensor hadamard(const Tensor& a, const Tensor& b) {
  check_same_shape("hadamard", a, b);
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return Tensor::make_op(a.shape(), std::move(out), {a, b}, "hadamard", [](Node& self) {
    Node& na = *self.parents[0];
    Node& nb = *self.parents[1];
    if (na.requires_grad) {
      na.ensure_grad();
      for (std::size_t i = 0; i < self.data.size(); ++i) na.grad[i] += self.grad[i] * nb.data[i];
    }
    if (nb.requires_grad) {
      nb.ensure_grad();
      for (std::size_t i = 0; i < self.data.size(); ++i) nb.grad[i] += self.grad[i] * na.data[i];
    }
  });
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape("add", a, b);
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  return Tensor::make_op(a.shape(), std::move(out), {a, b}, "add", [](Node& self) {
    for (int side = 0; side < 2; ++side) {
      Node& p = *self.parents[side];
      if (!p.requires_grad) continue;
      detail::accumulate(p, self.grad);
    }
  });
}

/// x (..., n) plus a length-n bias broadcast over all leading axes.
inline Tensor add_rowwise(const Tensor& x, const Tensor& bias) {
  if (x.rank() < 1 || bias.rank() != 1 || bias.shape()[0] != x.shape().back()) {
    throw DimensionError("add_rowwise: bias " + shape_str(bias.shape()) +
                         " does not match last axis of " + shape_str(x.shape()));
  }
  const std::size_t n = bias.size();
  const std::size_t rows = x.size() / n;
  std::vector<double> out(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] = x.data()[r * n + j] + bias.data()[j];
  }
  return Tensor::make_op(x.shape(), std::move(out), {x, bias}, "add_rowwise",
                         [rows, n](Node& self) {
                           Node& nx = *self.parents[0];
                           Node& nb = *self.parents[1];
                           if (nx.requires_grad) detail::accumulate(nx, self.grad);
                           if (nb.requires_grad) {
                             nb.ensure_grad();
                             for (std::size_t r = 0; r < rows; ++r) {
                               for (std::size_t j = 0; j < n; ++j) {
                                 nb.grad[j] += self.grad[r * n + j];
                               }
                             }
                           }
                         });
}

inline Tensor scale(const Tensor& x, double factor) {
  if (!std::isfinite(factor)) throw NumericError("scale: non-finite factor");
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x.data()[i] * factor;
  return Tensor::make_op(x.shape(), std::move(out), {x}, "scale", [factor](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (std::size_t i = 0; i < self.data.size(); ++i) p.grad[i] += self.grad[i] * factor;
  });
}

// ---------------------------------------------------------------------------
// Shape ops, all materializing copies. Row-major contiguous throughout keeps
// every op's index arithmetic trivial and the outputs bitwise deterministic.
// ---------------------------------------------------------------------------

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.size()) {
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                         shape_str(shape));
  }
  return Tensor::make_op(std::move(shape), x.data(), {x}, "reshape", [](Node& self) {
    Node& p = *self.parents[0];
    if (p.requires_grad) detail::accumulate(p, self.grad);
  });
}

inline Tensor transpose_last_two(const Tensor& x) {
  if (x.rank() < 2) {
    throw DimensionError("transpose_last_two: needs rank >= 2, got " + shape_str(x.shape()));
  }
  Shape out_shape = x.shape();
  const std::size_t r = out_shape[out_shape.size() - 2];
  const std::size_t c = out_shape[out_shape.size() - 1];
  std::swap(out_shape[out_shape.size() - 2], out_shape[out_shape.size() - 1]);
  const std::size_t outer = x.size() / (r * c);
  std::vector<double> out(x.size());
  for (std::size_t o = 0; o < outer; ++o) {
    const double* src = x.data().data() + o * r * c;
    double* dst = out.data() + o * r * c;
    for (std::size_t i = 0; i < r; ++i) {
      for (std::size_t j = 0; j < c; ++j) dst[j * r + i] = src[i * c + j];
    }
  }
  return Tensor::make_op(std::move(out_shape), std::move(out), {x}, "transpose_last_two",
                         [outer, r, c](Node& self) {
                           Node& p = *self.parents[0];
                           if (!p.requires_grad) return;
                           p.ensure_grad();
                           for (std::size_t o = 0; o < outer; ++o) {
                             const double* g = self.grad.data() + o * r * c;
                             double* pg = p.grad.data() + o * r * c;
                             for (std::size_t i = 0; i < r; ++i) {
                               for (std::size_t j = 0; j < c; ++j) pg[i * c + j] += g[j * r + i];
                             }
                           }
                         });
}

inline Tensor concat_last(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ContractError("concat_last: no inputs");
  const Shape& first = parts.front().shape();
  if (first.empty()) throw DimensionError("concat_last: inputs must have rank >= 1");
  std::size_t total_width = 0;
  for (const Tensor& p : parts) {
    const Shape& s = p.shape();
    if (s.size() != first.size() ||
        !std::equal(s.begin(), s.end() - 1, first.begin(), first.end() - 1)) {
      throw DimensionError("concat_last: leading extents differ: " + shape_str(first) + " vs " +
                           shape_str(s));
    }
    total_width += s.back();
  }
  Shape out_shape = first;
  out_shape.back() = total_width;
  const std::size_t rows = shape_numel(first) / first.back();
  std::vector<double> out(rows * total_width);
  std::vector<std::size_t> widths;
  widths.reserve(parts.size());
  std::size_t offset = 0;
  for (const Tensor& p : parts) {
    const std::size_t w = p.shape().back();
    widths.push_back(w);
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy_n(p.data().data() + r * w, w, out.data() + r * total_width + offset);
    }
    offset += w;
  }
  return Tensor::make_op(std::move(out_shape), std::move(out), parts, "concat_last",
                         [rows, total_width, widths](Node& self) {
                           std::size_t off = 0;
                           for (std::size_t pi = 0; pi < self.parents.size(); ++pi) {
                             Node& p = *self.parents[pi];
                             const std::size_t w = widths[pi];
                             if (p.requires_grad) {
                               p.ensure_grad();
                               for (std::size_t r = 0; r < rows; ++r) {
                                 const double* g = self.grad.data() + r * total_width + off;
                                 double* pg = p.grad.data() + r * w;
                                 for (std::size_t j = 0; j < w; ++j) pg[j] += g[j];
                               }
                             }
                             off += w;
                           }
                         });
}

inline Tensor concat_last(const Tensor& a, const Tensor& b) { return concat_last({a, b}); }

/// Mean over the second-to-last axis: (..., R, C) -> (..., C).
inline Tensor mean_rows(const Tensor& x) {
  if (x.rank() < 2) {
    throw DimensionError("mean_rows: needs rank >= 2, got " + shape_str(x.shape()));
  }
  const std::size_t r = x.shape()[x.rank() - 2];
  const std::size_t c = x.shape()[x.rank() - 1];
  const std::size_t outer = x.size() / (r * c);
  Shape out_shape(x.shape().begin(), x.shape().end() - 2);
  out_shape.push_back(c);
  std::vector<double> out(outer * c, 0.0);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < r; ++i) {
      for (std::size_t j = 0; j < c; ++j) {
        out[o * c + j] += x.data()[(o * r + i) * c + j];
      }
    }
  }
  const double inv = 1.0 / static_cast<double>(r);
  for (double& v : out) v *= inv;
  return Tensor::make_op(std::move(out_shape), std::move(out), {x}, "mean_rows",
                         [outer, r, c, inv](Node& self) {
                           Node& p = *self.parents[0];
                           if (!p.requires_grad) return;
                           p.ensure_grad();
                           for (std::size_t o = 0; o < outer; ++o) {
                             for (std::size_t i = 0; i < r; ++i) {
                               for (std::size_t j = 0; j < c; ++j) {
                                 p.grad[(o * r + i) * c + j] += self.grad[o * c + j] * inv;
                               }
                             }
                           }
                         });
}

inline Tensor sum(const Tensor& x) {
  double total = 0.0;
  for (double v : x.data()) total += v;
  return Tensor::make_op({1}, {total}, {x}, "sum", [](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (double& g : p.grad) g += self.grad[0];
  });
}

/// Copies a (B,E) vector across L token positions: (B,E) -> (B,L,E).
/// The gradient sums back over positions.
inline Tensor broadcast_tokens(const Tensor& g, std::size_t positions) {
  if (g.rank() != 2) {
    throw DimensionError("broadcast_tokens: needs (B,E), got " + shape_str(g.shape()));
  }
  const std::size_t b = g.shape()[0];
  const std::size_t e = g.shape()[1];
  std::vector<double> out(b * positions * e);
  for (std::size_t bi = 0; bi < b; ++bi) {
    for (std::size_t l = 0; l < positions; ++l) {
      std::copy_n(g.data().data() + bi * e, e, out.data() + (bi * positions + l) * e);
    }
  }
  return Tensor::make_op({b, positions, e}, std::move(out), {g}, "broadcast_tokens",
                         [b, positions, e](Node& self) {
                           Node& p = *self.parents[0];
                           if (!p.requires_grad) return;
                           p.ensure_grad();
                           for (std::size_t bi = 0; bi < b; ++bi) {
                             for (std::size_t l = 0; l < positions; ++l) {
                               const double* g2 = self.grad.data() + (bi * positions + l) * e;
                               double* pg = p.grad.data() + bi * e;
                               for (std::size_t j = 0; j < e; ++j) pg[j] += g2[j];
                             }
                           }
                         });
}

/// Position t of a (B,L,E) token sequence: -> (B,E).
inline Tensor select_token(const Tensor& x, std::size_t t) {
  if (x.rank() != 3) {
    throw DimensionError("select_token: needs (B,L,E), got " + shape_str(x.shape()));
  }
  const std::size_t b = x.shape()[0];
  const std::size_t l = x.shape()[1];
  const std::size_t e = x.shape()[2];
  if (t >= l) {
    throw ContractError("select_token: position " + std::to_string(t) + " out of range [0," +
                        std::to_string(l) + ")");
  }
  std::vector<double> out(b * e);
  for (std::size_t bi = 0; bi < b; ++bi) {
    std::copy_n(x.data().data() + (bi * l + t) * e, e, out.data() + bi * e);
  }
  return Tensor::make_op({b, e}, std::move(out), {x}, "select_token", [b, l, e, t](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (std::size_t bi = 0; bi < b; ++bi) {
      const double* g = self.grad.data() + bi * e;
      double* pg = p.grad.data() + (bi * l + t) * e;
      for (std::size_t j = 0; j < e; ++j) pg[j] += g[j];
    }
  });
}

// ---------------------------------------------------------------------------
// Softmax and loss.
// ---------------------------------------------------------------------------

/// Softmax over the last axis in max-subtracted form, so each row is
/// invariant under adding a constant and sums to 1 up to rounding.
inline Tensor softmax_rows(const Tensor& x) {
  if (x.rank() < 1 || x.shape().back() < 1) {
    throw DimensionError("softmax_rows: needs a non-empty last axis, got " + shape_str(x.shape()));
  }
  const std::size_t width = x.shape().back();
  const std::size_t rows = x.size() / width;
  std::vector<double> out(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = x.data().data() + r * width;
    double* orow = out.data() + r * width;
    double mx = row[0];
    for (std::size_t j = 1; j < width; ++j) mx = std::max(mx, row[j]);
    double denom = 0.0;
    for (std::size_t j = 0; j < width; ++j) {
      orow[j] = std::exp(row[j] - mx);
      denom += orow[j];
    }
    const double inv = 1.0 / denom;
    for (std::size_t j = 0; j < width; ++j) orow[j] *= inv;
  }
  return Tensor::make_op(x.shape(), std::move(out), {x}, "softmax_rows",
                         [rows, width](Node& self) {
                           Node& p = *self.parents[0];
                           if (!p.requires_grad) return;
                           p.ensure_grad();
                           for (std::size_t r = 0; r < rows; ++r) {
                             const double* y = self.data.data() + r * width;
                             const double* g = self.grad.data() + r * width;
                             double dot = 0.0;
                             for (std::size_t j = 0; j < width; ++j) dot += g[j] * y[j];
                             double* pg = p.grad.data() + r * width;
                             for (std::size_t j = 0; j < width; ++j) {
                               pg[j] += (g[j] - dot) * y[j];
                             }
                           }
                         });
}

/// Mean softmax cross-entropy over the batch, computed by log-sum-exp.
inline Tensor cross_entropy(const Tensor& logits, const std::vector<std::size_t>& labels) {
  if (logits.rank() != 2) {
    throw DimensionError("cross_entropy: logits must be (B,K), got " + shape_str(logits.shape()));
  }
  const std::size_t b = logits.shape()[0];
  const std::size_t k = logits.shape()[1];
  if (b < 1) throw ContractError("cross_entropy: empty batch");
  if (labels.size() != b) {
    throw ContractError("cross_entropy: " + std::to_string(labels.size()) + " labels for batch of " +
                        std::to_string(b));
  }
  for (std::size_t i = 0; i < b; ++i) {
    if (labels[i] >= k) {
      throw ContractError("cross_entropy: label " + std::to_string(labels[i]) +
                          " out of range [0," + std::to_string(k) + ") at position " +
                          std::to_string(i));
    }
  }
  // probs saved for backward: dL/dlogits = (softmax - onehot) / B
  std::vector<double> probs(b * k);
  double loss = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    const double* row = logits.data().data() + i * k;
    double mx = row[0];
    for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, row[j]);
    double denom = 0.0;
    for (std::size_t j = 0; j < k; ++j) denom += std::exp(row[j] - mx);
    const double lse = mx + std::log(denom);
    loss += lse - row[labels[i]];
    for (std::size_t j = 0; j < k; ++j) probs[i * k + j] = std::exp(row[j] - lse);
  }
  loss /= static_cast<double>(b);
  return Tensor::make_op(
      {1}, {loss}, {logits}, "cross_entropy",
      [b, k, probs = std::move(probs), labels](Node& self) {
        Node& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        const double gscale = self.grad[0] / static_cast<double>(b);
        for (std::size_t i = 0; i < b; ++i) {
          for (std::size_t j = 0; j < k; ++j) {
            const double onehot = j == labels[i] ? 1.0 : 0.0;
            p.grad[i * k + j] += gscale * (probs[i * k + j] - onehot);
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Reverse pass.
// ---------------------------------------------------------------------------

/// Reverse-mode sweep from a scalar loss. Intermediate grads are recomputed
/// fresh on every call while leaf grads accumulate, so repeated backward
/// passes without zero_grad() sum leaf gradients.
inline void backward(const Tensor& loss) {
  if (loss.size() != 1) {
    throw ContractError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
  }
  // Collect the reachable subgraph; creation order (seq) is topological.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<Node*> stack{loss.node().get()};
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    Node* n = stack.back();
    stack.pop_back();
    order.push_back(n);
    for (const auto& p : n->parents) {
      if (seen.insert(p.get()).second) stack.push_back(p.get());
    }
  }
  std::sort(order.begin(), order.end(), [](const Node* a, const Node* b) { return a->seq > b->seq; });

  for (Node* n : order) {
    if (!n->is_leaf()) {
      n->ensure_grad();
      std::fill(n->grad.begin(), n->grad.end(), 0.0);
    }
  }
  Node* root = loss.node().get();
  root->ensure_grad();
  root->grad[0] += 1.0;

  for (Node* n : order) {
    if (n->requires_grad && n->backward_fn) n->backward_fn(*n);
  }
}

}  // namespace mhss
