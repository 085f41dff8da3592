#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <iosfwd>
#include <map>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "tpred/common.hpp"

namespace tpred {

// Reverse-mode autodiff over small dense f64 tensors (rank <= 4, row-major).
// Graphs are built eagerly; backward() walks them once in reverse topological
// order and accumulates gradients additively.

using ShapeDims = std::vector<int>;

inline std::size_t shape_numel(const ShapeDims& dims) {
  std::size_t n = 1;
  for (int d : dims) {
    if (d <= 0) throw ValidationError("shape: extents must be positive");
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

inline std::string shape_str(const ShapeDims& dims) {
  std::string s = "[";
  for (std::size_t i = 0; i < dims.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(dims[i]);
  }
  return s + "]";
}

struct Node;
class Tensor;

struct Node {
  ShapeDims shape;
  std::vector<double> value;
  std::vector<double> grad;  // allocated on first backward touch
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backprop;  // scatters node.grad into parents
  const char* op = "leaf";
  bool requires_grad = false;

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  }
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> n) : node_(std::move(n)) {}

  bool defined() const { return node_ != nullptr; }
  Node* get() const { return node_.get(); }
  const std::shared_ptr<Node>& ptr() const { return node_; }

  const ShapeDims& shape() const { return node_->shape; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  int dim(int i) const { return node_->shape[static_cast<std::size_t>(i)]; }
  std::size_t numel() const { return node_->value.size(); }

  std::vector<double>& data() const { return node_->value; }
  std::vector<double>& grad() const { return node_->grad; }
  bool has_grad() const { return node_->grad.size() == node_->value.size(); }
  bool requires_grad() const { return node_->requires_grad; }

  double scalar() const {
    if (numel() != 1) throw ValidationError("scalar(): tensor has " + std::to_string(numel()) + " entries");
    return node_->value[0];
  }

  double at(int r, int c) const {
    if (rank() != 2) throw ValidationError("at(r,c): rank-2 tensor required");
    return node_->value[static_cast<std::size_t>(r) * dim(1) + c];
  }

 private:
  std::shared_ptr<Node> node_;
};

namespace detail {

inline void check_finite(const Node& n) {
  for (double v : n.value) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string("non-finite value produced by op '") + n.op + "'");
    }
  }
}

inline Tensor make_node(ShapeDims shape, const char* op, std::vector<Tensor> parents) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value.resize(shape_numel(n->shape), 0.0);
  n->op = op;
  n->parents.reserve(parents.size());
  for (const Tensor& p : parents) {
    n->parents.push_back(p.ptr());
    n->requires_grad = n->requires_grad || p.requires_grad();
  }
  return Tensor(std::move(n));
}

// Iterates lines along `axis`: calls fn(base, stride, extent) for each line.
template <typename Fn>
inline void for_each_line(const ShapeDims& dims, int axis, Fn&& fn) {
  const int rank = static_cast<int>(dims.size());
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) throw ValidationError("axis out of range");
  std::size_t stride = 1;
  for (int i = axis + 1; i < rank; ++i) stride *= static_cast<std::size_t>(dims[i]);
  const std::size_t extent = static_cast<std::size_t>(dims[axis]);
  std::size_t pre = 1;
  for (int i = 0; i < axis; ++i) pre *= static_cast<std::size_t>(dims[i]);
  for (std::size_t p = 0; p < pre; ++p) {
    for (std::size_t q = 0; q < stride; ++q) {
      fn(p * extent * stride + q, stride, extent);
    }
  }
}

}  // namespace detail

// --- leaves -------------------------------------------------------------

inline Tensor constant(ShapeDims shape, std::vector<double> values) {
  if (shape_numel(shape) != values.size()) {
    throw ValidationError("constant: data length does not match shape " + shape_str(shape));
  }
  Tensor t = detail::make_node(std::move(shape), "const", {});
  t.data() = std::move(values);
  detail::check_finite(*t.get());
  return t;
}

inline Tensor constant_scalar(double v) { return constant({1}, {v}); }

inline Tensor zeros(ShapeDims shape) {
  return detail::make_node(std::move(shape), "zeros", {});
}

inline Tensor constant_points(const std::vector<Vec2>& pts) {
  std::vector<double> v;
  v.reserve(pts.size() * 2);
  for (const Vec2& p : pts) {
    v.push_back(p.x);
    v.push_back(p.y);
  }
  return constant({static_cast<int>(pts.size()), 2}, std::move(v));
}

inline std::vector<Vec2> tensor_points(const Tensor& t) {
  if (t.rank() != 2 || t.dim(1) != 2) throw ValidationError("tensor_points: [F,2] tensor required");
  std::vector<Vec2> out(static_cast<std::size_t>(t.dim(0)));
  for (int i = 0; i < t.dim(0); ++i) out[static_cast<std::size_t>(i)] = {t.at(i, 0), t.at(i, 1)};
  return out;
}

// --- elementwise ops ----------------------------------------------------

namespace detail {

template <typename FwdFn, typename BwdFn>
inline Tensor unary_op(const Tensor& x, const char* op, FwdFn fwd, BwdFn bwd) {
  Tensor out = make_node(x.shape(), op, {x});
  const std::size_t n = x.numel();
  for (std::size_t i = 0; i < n; ++i) out.data()[i] = fwd(x.data()[i]);
  check_finite(*out.get());
  out.get()->backprop = [bwd](Node& self) {
    Node& p = *self.parents[0];
    p.ensure_grad();
    for (std::size_t i = 0; i < self.value.size(); ++i) {
      p.grad[i] += self.grad[i] * bwd(p.value[i], self.value[i]);
    }
  };
  return out;
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ValidationError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                          shape_str(b.shape()));
  }
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  Tensor out = detail::make_node(a.shape(), "add", {a, b});
  for (std::size_t i = 0; i < a.numel(); ++i) out.data()[i] = a.data()[i] + b.data()[i];
  detail::check_finite(*out.get());
  out.get()->backprop = [](Node& self) {
    for (int k = 0; k < 2; ++k) {
      Node& p = *self.parents[static_cast<std::size_t>(k)];
      p.ensure_grad();
      for (std::size_t i = 0; i < self.value.size(); ++i) p.grad[i] += self.grad[i];
    }
  };
  return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "sub");
  Tensor out = detail::make_node(a.shape(), "sub", {a, b});
  for (std::size_t i = 0; i < a.numel(); ++i) out.data()[i] = a.data()[i] - b.data()[i];
  detail::check_finite(*out.get());
  out.get()->backprop = [](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    pa.ensure_grad();
    pb.ensure_grad();
    for (std::size_t i = 0; i < self.value.size(); ++i) {
      pa.grad[i] += self.grad[i];
      pb.grad[i] -= self.grad[i];
    }
  };
  return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  Tensor out = detail::make_node(a.shape(), "mul", {a, b});
  for (std::size_t i = 0; i < a.numel(); ++i) out.data()[i] = a.data()[i] * b.data()[i];
  detail::check_finite(*out.get());
  out.get()->backprop = [](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    pa.ensure_grad();
    pb.ensure_grad();
    for (std::size_t i = 0; i < self.value.size(); ++i) {
      pa.grad[i] += self.grad[i] * pb.value[i];
      pb.grad[i] += self.grad[i] * pa.value[i];
    }
  };
  return out;
}

inline Tensor div(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "div");
  Tensor out = detail::make_node(a.shape(), "div", {a, b});
  for (std::size_t i = 0; i < a.numel(); ++i) out.data()[i] = a.data()[i] / b.data()[i];
  detail::check_finite(*out.get());
  out.get()->backprop = [](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    pa.ensure_grad();
    pb.ensure_grad();
    for (std::size_t i = 0; i < self.value.size(); ++i) {
      const double inv = 1.0 / pb.value[i];
      pa.grad[i] += self.grad[i] * inv;
      pb.grad[i] -= self.grad[i] * pa.value[i] * inv * inv;
    }
  };
  return out;
}

inline Tensor scale(const Tensor& x, double s) {
  return detail::unary_op(
      x, "scale", [s](double v) { return s * v; }, [s](double, double) { return s; });
}

inline Tensor add_scalar(const Tensor& x, double c) {
  return detail::unary_op(
      x, "add_scalar", [c](double v) { return v + c; }, [](double, double) { return 1.0; });
}

inline Tensor neg(const Tensor& x) { return scale(x, -1.0); }

// c - x, elementwise.
inline Tensor rsub_const(double c, const Tensor& x) {
  return detail::unary_op(
      x, "rsub_const", [c](double v) { return c - v; }, [](double, double) { return -1.0; });
}

inline Tensor relu(const Tensor& x) {
  return detail::unary_op(
      x, "relu", [](double v) { return v > 0.0 ? v : 0.0; },
      [](double in, double) { return in > 0.0 ? 1.0 : 0.0; });
}

inline Tensor sigmoid(const Tensor& x) {
  return detail::unary_op(
      x, "sigmoid",
      [](double v) { return v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v)); },
      [](double, double out) { return out * (1.0 - out); });
}

inline Tensor tanh_op(const Tensor& x) {
  return detail::unary_op(
      x, "tanh", [](double v) { return std::tanh(v); },
      [](double, double out) { return 1.0 - out * out; });
}

inline Tensor exp_op(const Tensor& x) {
  return detail::unary_op(
      x, "exp", [](double v) { return std::exp(v); }, [](double, double out) { return out; });
}

inline Tensor log_op(const Tensor& x) {
  return detail::unary_op(
      x, "log", [](double v) { return std::log(v); }, [](double in, double) { return 1.0 / in; });
}

inline Tensor abs_op(const Tensor& x) {
  return detail::unary_op(
      x, "abs", [](double v) { return std::fabs(v); },
      [](double in, double) { return in > 0.0 ? 1.0 : (in < 0.0 ? -1.0 : 0.0); });
}

// max(x, c); the clamped region gets zero gradient.
inline Tensor clamp_min(const Tensor& x, double c) {
  return detail::unary_op(
      x, "clamp_min", [c](double v) { return v > c ? v : c; },
      [c](double in, double) { return in > c ? 1.0 : 0.0; });
}

inline Tensor softplus(const Tensor& x) {
  return detail::unary_op(
      x, "softplus",
      [](double v) { return v > 30.0 ? v : std::log1p(std::exp(v)); },
      [](double in, double) {
        return in >= 0.0 ? 1.0 / (1.0 + std::exp(-in)) : std::exp(in) / (1.0 + std::exp(in));
      });
}

// --- structural ops -----------------------------------------------------

inline Tensor reshape(const Tensor& x, ShapeDims shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ValidationError("reshape: numel mismatch " + shape_str(x.shape()) + " -> " + shape_str(shape));
  }
  Tensor out = detail::make_node(std::move(shape), "reshape", {x});
  out.data() = x.data();
  out.get()->backprop = [](Node& self) {
    Node& p = *self.parents[0];
    p.ensure_grad();
    for (std::size_t i = 0; i < self.value.size(); ++i) p.grad[i] += self.grad[i];
  };
  return out;
}

inline Tensor transpose(const Tensor& x) {
  if (x.rank() != 2) throw ValidationError("transpose: rank-2 tensor required");
  const int r = x.dim(0), c = x.dim(1);
  Tensor out = detail::make_node({c, r}, "transpose", {x});
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j)
      out.data()[static_cast<std::size_t>(j) * r + i] = x.data()[static_cast<std::size_t>(i) * c + j];
  out.get()->backprop = [r, c](Node& self) {
    Node& p = *self.parents[0];
    p.ensure_grad();
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < c; ++j)
        p.grad[static_cast<std::size_t>(i) * c + j] += self.grad[static_cast<std::size_t>(j) * r + i];
  };
  return out;
}

// Concatenation along the last axis of rank-1 or rank-2 tensors with equal
// leading extent.
inline Tensor concat(const std::vector<Tensor>& xs) {
  if (xs.empty()) throw ValidationError("concat: empty input");
  const int rank = xs.front().rank();
  const int rows = rank == 2 ? xs.front().dim(0) : 1;
  int total = 0;
  for (const Tensor& x : xs) {
    if (x.rank() != rank || (rank == 2 && x.dim(0) != rows)) {
      throw ValidationError("concat: incompatible shapes");
    }
    total += x.dim(rank - 1);
  }
  ShapeDims shape = rank == 2 ? ShapeDims{rows, total} : ShapeDims{total};
  Tensor out = detail::make_node(std::move(shape), "concat", xs);
  int off = 0;
  for (const Tensor& x : xs) {
    const int w = x.dim(rank - 1);
    for (int i = 0; i < rows; ++i)
      for (int j = 0; j < w; ++j)
        out.data()[static_cast<std::size_t>(i) * total + off + j] =
            x.data()[static_cast<std::size_t>(i) * w + j];
    off += w;
  }
  out.get()->backprop = [rows, total](Node& self) {
    int off2 = 0;
    for (auto& pp : self.parents) {
      Node& p = *pp;
      p.ensure_grad();
      const int w = static_cast<int>(p.shape.back());
      for (int i = 0; i < rows; ++i)
        for (int j = 0; j < w; ++j)
          p.grad[static_cast<std::size_t>(i) * w + j] +=
              self.grad[static_cast<std::size_t>(i) * total + off2 + j];
      off2 += w;
    }
  };
  return out;
}

inline Tensor concat(const Tensor& a, const Tensor& b) { return concat(std::vector<Tensor>{a, b}); }

// Stacks K row vectors [1,d] into [K,d].
inline Tensor stack_rows(const std::vector<Tensor>& rows) {
  if (rows.empty()) throw ValidationError("stack_rows: empty input");
  const int d = rows.front().dim(rows.front().rank() - 1);
  for (const Tensor& r : rows) {
    if (r.numel() != static_cast<std::size_t>(d)) throw ValidationError("stack_rows: width mismatch");
  }
  const int k = static_cast<int>(rows.size());
  Tensor out = detail::make_node({k, d}, "stack_rows", rows);
  for (int i = 0; i < k; ++i)
    for (int j = 0; j < d; ++j)
      out.data()[static_cast<std::size_t>(i) * d + j] = rows[static_cast<std::size_t>(i)].data()[static_cast<std::size_t>(j)];
  out.get()->backprop = [d](Node& self) {
    for (std::size_t i = 0; i < self.parents.size(); ++i) {
      Node& p = *self.parents[i];
      p.ensure_grad();
      for (int j = 0; j < d; ++j) p.grad[static_cast<std::size_t>(j)] += self.grad[i * static_cast<std::size_t>(d) + static_cast<std::size_t>(j)];
    }
  };
  return out;
}

// Row gather from [L,d] by index list; backward scatter-adds.
inline Tensor gather_rows(const Tensor& x, const std::vector<int>& indices) {
  if (x.rank() != 2) throw ValidationError("gather_rows: rank-2 tensor required");
  const int d = x.dim(1);
  for (int idx : indices) {
    if (idx < 0 || idx >= x.dim(0)) throw ValidationError("gather_rows: index out of range");
  }
  const int k = static_cast<int>(indices.size());
  Tensor out = detail::make_node({k, d}, "gather_rows", {x});
  for (int i = 0; i < k; ++i) {
    const std::size_t src = static_cast<std::size_t>(indices[static_cast<std::size_t>(i)]) * d;
    for (int j = 0; j < d; ++j) out.data()[static_cast<std::size_t>(i) * d + j] = x.data()[src + j];
  }
  out.get()->backprop = [indices, d](Node& self) {
    Node& p = *self.parents[0];
    p.ensure_grad();
    for (std::size_t i = 0; i < indices.size(); ++i) {
      const std::size_t dst = static_cast<std::size_t>(indices[i]) * d;
      for (int j = 0; j < d; ++j) p.grad[dst + j] += self.grad[i * static_cast<std::size_t>(d) + static_cast<std::size_t>(j)];
    }
  };
  return out;
}

// Column slice [r, len] out of a rank-2 tensor.
inline Tensor slice_cols(const Tensor& x, int from, int len) {
  if (x.rank() != 2) throw ValidationError("slice_cols: rank-2 tensor required");
  const int r = x.dim(0), c = x.dim(1);
  if (from < 0 || len <= 0 || from + len > c) throw ValidationError("slice_cols: range out of bounds");
  Tensor out = detail::make_node({r, len}, "slice_cols", {x});
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < len; ++j)
      out.data()[static_cast<std::size_t>(i) * len + j] = x.data()[static_cast<std::size_t>(i) * c + from + j];
  out.get()->backprop = [r, c, from, len](Node& self) {
    Node& p = *self.parents[0];
    p.ensure_grad();
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < len; ++j)
        p.grad[static_cast<std::size_t>(i) * c + from + j] += self.grad[static_cast<std::size_t>(i) * len + j];
  };
  return out;
}

// Flat 1-D slice.
inline Tensor slice_flat(const Tensor& x, int from, int len) {
  if (from < 0 || len <= 0 || static_cast<std::size_t>(from + len) > x.numel()) {
    throw ValidationError("slice_flat: range out of bounds");
  }
  Tensor out = detail::make_node({len}, "slice_flat", {x});
  for (int i = 0; i < len; ++i) out.data()[static_cast<std::size_t>(i)] = x.data()[static_cast<std::size_t>(from + i)];
  out.get()->backprop = [from, len](Node& self) {
    Node& p = *self.parents[0];
    p.ensure_grad();
    for (int i = 0; i < len; ++i) p.grad[static_cast<std::size_t>(from + i)] += self.grad[static_cast<std::size_t>(i)];
  };
  return out;
}

// Single-entry pick (flat index) producing a scalar.
inline Tensor pick(const Tensor& x, int index) {
  if (index < 0 || static_cast<std::size_t>(index) >= x.numel()) {
    throw ValidationError("pick: index out of range");
  }
  Tensor out = detail::make_node({1}, "pick", {x});
  out.data()[0] = x.data()[static_cast<std::size_t>(index)];
  out.get()->backprop = [index](Node& self) {
    Node& p = *self.parents[0];
    p.ensure_grad();
    p.grad[static_cast<std::size_t>(index)] += self.grad[0];
  };
  return out;
}

// --- reductions and linear algebra --------------------------------------

inline Tensor sum(const Tensor& x) {
  Tensor out = detail::make_node({1}, "sum", {x});
  out.data()[0] = std::accumulate(x.data().begin(), x.data().end(), 0.0);
  detail::check_finite(*out.get());
  out.get()->backprop = [](Node& self) {
    Node& p = *self.parents[0];
    p.ensure_grad();
    for (std::size_t i = 0; i < p.value.size(); ++i) p.grad[i] += self.grad[0];
  };
  return out;
}

inline Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2) throw ValidationError("matmul: rank-2 tensors required");
  const int m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
  if (k != k2) {
    throw ValidationError("matmul: inner dims disagree " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  Tensor out = detail::make_node({m, n}, "matmul", {a, b});
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  double* pc = out.data().data();
  for (int i = 0; i < m; ++i) {
    for (int kk = 0; kk < k; ++kk) {
      const double av = pa[static_cast<std::size_t>(i) * k + kk];
      if (av == 0.0) continue;
      const double* brow = pb + static_cast<std::size_t>(kk) * n;
      double* crow = pc + static_cast<std::size_t>(i) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
  detail::check_finite(*out.get());
  out.get()->backprop = [m, k, n](Node& self) {
    Node& pa2 = *self.parents[0];
    Node& pb2 = *self.parents[1];
    pa2.ensure_grad();
    pb2.ensure_grad();
    // dA = g . B^T
    for (int i = 0; i < m; ++i)
      for (int kk = 0; kk < k; ++kk) {
        double acc = 0.0;
        for (int j = 0; j < n; ++j)
          acc += self.grad[static_cast<std::size_t>(i) * n + j] * pb2.value[static_cast<std::size_t>(kk) * n + j];
        pa2.grad[static_cast<std::size_t>(i) * k + kk] += acc;
      }
    // dB = A^T . g
    for (int kk = 0; kk < k; ++kk)
      for (int j = 0; j < n; ++j) {
        double acc = 0.0;
        for (int i = 0; i < m; ++i)
          acc += pa2.value[static_cast<std::size_t>(i) * k + kk] * self.grad[static_cast<std::size_t>(i) * n + j];
        pb2.grad[static_cast<std::size_t>(kk) * n + j] += acc;
      }
  };
  return out;
}

// Adds a rank-1 bias along the trailing axis of a rank-2 tensor.
inline Tensor add_bias(const Tensor& x, const Tensor& bias) {
  if (x.rank() != 2 || bias.rank() != 1 || bias.dim(0) != x.dim(1)) {
    throw ValidationError("add_bias: [r,c] + [c] required");
  }
  const int r = x.dim(0), c = x.dim(1);
  Tensor out = detail::make_node({r, c}, "add_bias", {x, bias});
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j)
      out.data()[static_cast<std::size_t>(i) * c + j] = x.data()[static_cast<std::size_t>(i) * c + j] + bias.data()[static_cast<std::size_t>(j)];
  detail::check_finite(*out.get());
  out.get()->backprop = [r, c](Node& self) {
    Node& px = *self.parents[0];
    Node& pb = *self.parents[1];
    px.ensure_grad();
    pb.ensure_grad();
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < c; ++j) {
        const double g = self.grad[static_cast<std::size_t>(i) * c + j];
        px.grad[static_cast<std::size_t>(i) * c + j] += g;
        pb.grad[static_cast<std::size_t>(j)] += g;
      }
  };
  return out;
}

// x W + b for a row-vector or row-matrix x.
inline Tensor affine(const Tensor& x, const Tensor& w, const Tensor& b) {
  return add_bias(matmul(x, w), b);
}

// Prefix sums down the rows of [F,c]; backward is the suffix sum.
inline Tensor cumsum_rows(const Tensor& x) {
  if (x.rank() != 2) throw ValidationError("cumsum_rows: rank-2 tensor required");
  const int f = x.dim(0), c = x.dim(1);
  Tensor out = detail::make_node({f, c}, "cumsum_rows", {x});
  for (int j = 0; j < c; ++j) {
    double acc = 0.0;
    for (int i = 0; i < f; ++i) {
      acc += x.data()[static_cast<std::size_t>(i) * c + j];
      out.data()[static_cast<std::size_t>(i) * c + j] = acc;
    }
  }
  detail::check_finite(*out.get());
  out.get()->backprop = [f, c](Node& self) {
    Node& p = *self.parents[0];
    p.ensure_grad();
    for (int j = 0; j < c; ++j) {
      double acc = 0.0;
      for (int i = f - 1; i >= 0; --i) {
        acc += self.grad[static_cast<std::size_t>(i) * c + j];
        p.grad[static_cast<std::size_t>(i) * c + j] += acc;
      }
    }
  };
  return out;
}

// --- softmax / layer norm / dropout -------------------------------------

// Max-subtraction stabilized softmax along `axis`.
inline Tensor softmax(const Tensor& x, int axis = -1) {
  Tensor out = detail::make_node(x.shape(), "softmax", {x});
  detail::for_each_line(x.shape(), axis, [&](std::size_t base, std::size_t stride, std::size_t extent) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < extent; ++i) mx = std::max(mx, x.data()[base + i * stride]);
    double denom = 0.0;
    for (std::size_t i = 0; i < extent; ++i) {
      const double e = std::exp(x.data()[base + i * stride] - mx);
      out.data()[base + i * stride] = e;
      denom += e;
    }
    for (std::size_t i = 0; i < extent; ++i) out.data()[base + i * stride] /= denom;
  });
  detail::check_finite(*out.get());
  const ShapeDims dims = x.shape();
  out.get()->backprop = [dims, axis](Node& self) {
    Node& p = *self.parents[0];
    p.ensure_grad();
    detail::for_each_line(dims, axis, [&](std::size_t base, std::size_t stride, std::size_t extent) {
      double gy = 0.0;
      for (std::size_t i = 0; i < extent; ++i) {
        gy += self.grad[base + i * stride] * self.value[base + i * stride];
      }
      for (std::size_t i = 0; i < extent; ++i) {
        const std::size_t k = base + i * stride;
        p.grad[k] += self.value[k] * (self.grad[k] - gy);
      }
    });
  };
  return out;
}

// Last-axis layer normalization with affine gain/bias, eps = 1e-5 inside the
// root. Uses the population variance.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias) {
  constexpr double kEps = 1e-5;
  const int rank = x.rank();
  const int width = x.dim(rank - 1);
  if (width < 2) throw ValidationError("layer_norm: last-axis extent >= 2 required");
  if (gain.numel() != static_cast<std::size_t>(width) || bias.numel() != static_cast<std::size_t>(width)) {
    throw ValidationError("layer_norm: gain/bias width mismatch");
  }
  Tensor out = detail::make_node(x.shape(), "layer_norm", {x, gain, bias});
  const std::size_t w = static_cast<std::size_t>(width);
  const std::size_t lines = x.numel() / w;
  std::vector<double> mu(lines), inv_sigma(lines);
  for (std::size_t l = 0; l < lines; ++l) {
    const std::size_t base = l * w;
    double m = 0.0;
    for (std::size_t i = 0; i < w; ++i) m += x.data()[base + i];
    m /= static_cast<double>(w);
    double var = 0.0;
    for (std::size_t i = 0; i < w; ++i) {
      const double d = x.data()[base + i] - m;
      var += d * d;
    }
    var /= static_cast<double>(w);
    mu[l] = m;
    inv_sigma[l] = 1.0 / std::sqrt(var + kEps);
    for (std::size_t i = 0; i < w; ++i) {
      const double xn = (x.data()[base + i] - m) * inv_sigma[l];
      out.data()[base + i] = xn * gain.data()[i] + bias.data()[i];
    }
  }
  detail::check_finite(*out.get());
  out.get()->backprop = [w, lines, mu, inv_sigma](Node& self) {
    Node& px = *self.parents[0];
    Node& pg = *self.parents[1];
    Node& pb = *self.parents[2];
    px.ensure_grad();
    pg.ensure_grad();
    pb.ensure_grad();
    for (std::size_t l = 0; l < lines; ++l) {
      const std::size_t base = l * w;
      // ghat_i = g_i * gain_i; dx = inv_sigma * (ghat - mean(ghat) - xn * mean(ghat*xn))
      double mean_gh = 0.0, mean_ghxn = 0.0;
      for (std::size_t i = 0; i < w; ++i) {
        const double xn = (px.value[base + i] - mu[l]) * inv_sigma[l];
        const double gh = self.grad[base + i] * pg.value[i];
        mean_gh += gh;
        mean_ghxn += gh * xn;
        pg.grad[i] += self.grad[base + i] * xn;
        pb.grad[i] += self.grad[base + i];
      }
      mean_gh /= static_cast<double>(w);
      mean_ghxn /= static_cast<double>(w);
      for (std::size_t i = 0; i < w; ++i) {
        const double xn = (px.value[base + i] - mu[l]) * inv_sigma[l];
        const double gh = self.grad[base + i] * pg.value[i];
        px.grad[base + i] += inv_sigma[l] * (gh - mean_gh - xn * mean_ghxn);
      }
    }
  };
  return out;
}

// Inverted dropout: training zeroes entries with probability `rate` and
// rescales survivors by 1/(1-rate); inference is the identity.
inline Tensor dropout(const Tensor& x, double rate, bool training, Rng& rng) {
  if (rate < 0.0 || rate >= 1.0) throw ValidationError("dropout: rate must be in [0,1)");
  if (!training || rate == 0.0) return x;
  Tensor out = detail::make_node(x.shape(), "dropout", {x});
  std::vector<double> mask(x.numel());
  const double keep_scale = 1.0 / (1.0 - rate);
  for (std::size_t i = 0; i < x.numel(); ++i) {
    mask[i] = rng.uniform() < rate ? 0.0 : keep_scale;
    out.data()[i] = x.data()[i] * mask[i];
  }
  out.get()->backprop = [mask](Node& self) {
    Node& p = *self.parents[0];
    p.ensure_grad();
    for (std::size_t i = 0; i < self.value.size(); ++i) p.grad[i] += self.grad[i] * mask[i];
  };
  return out;
}

// --- backward -----------------------------------------------------------

// Populates gradients of every node reachable from `loss`. Accumulation is
// additive, so values used twice receive both contributions.
inline void backward(const Tensor& loss) {
  if (loss.numel() != 1) throw ValidationError("backward: loss must be scalar");
  std::vector<Node*> order;
  std::unordered_set<Node*> done;
  std::unordered_set<Node*> open;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(loss.get(), 0);
  open.insert(loss.get());
  while (!stack.empty()) {
    auto& [node, child] = stack.back();
    if (child < node->parents.size()) {
      Node* next = node->parents[child++].get();
      if (open.count(next)) throw NumericError("backward: cycle detected in computation graph");
      if (!done.count(next) && next->requires_grad) {
        stack.emplace_back(next, 0);
        open.insert(next);
      }
    } else {
      order.push_back(node);
      done.insert(node);
      open.erase(node);
      stack.pop_back();
    }
  }
  loss.get()->ensure_grad();
  loss.get()->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backprop && !n->grad.empty()) n->backprop(*n);
  }
}

// --- parameter store ----------------------------------------------------

enum class Init { kZeros, kOnes, kXavier };

// Named learnable tensors with deterministic (name-sorted) iteration.
class ParameterStore {
 public:
  explicit ParameterStore(std::uint64_t seed = 0) : seed_(seed), rng_(mix_seed(seed, 0x9a7a)) {}

  Tensor create(const std::string& name, ShapeDims shape, Init init = Init::kXavier) {
    if (params_.count(name)) throw ValidationError("parameter '" + name + "' already exists");
    Tensor t = detail::make_node(std::move(shape), "param", {});
    t.get()->requires_grad = true;
    switch (init) {
      case Init::kZeros:
        break;
      case Init::kOnes:
        std::fill(t.data().begin(), t.data().end(), 1.0);
        break;
      case Init::kXavier: {
        const int fan_in = t.rank() == 2 ? t.dim(0) : static_cast<int>(t.numel());
        const int fan_out = t.rank() == 2 ? t.dim(1) : static_cast<int>(t.numel());
        const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
        for (double& v : t.data()) v = rng_.uniform(-bound, bound);
        break;
      }
    }
    params_.emplace(name, t);
    return t;
  }

  Tensor at(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw ValidationError("unknown parameter '" + name + "'");
    return it->second;
  }

  bool contains(const std::string& name) const { return params_.count(name) != 0; }

  const std::map<std::string, Tensor>& items() const { return params_; }
  std::size_t size() const { return params_.size(); }
  std::uint64_t seed() const { return seed_; }

  void zero_grads() {
    for (auto& [name, t] : params_) {
      std::fill(t.grad().begin(), t.grad().end(), 0.0);
    }
  }

  std::size_t total_entries() const {
    std::size_t n = 0;
    for (const auto& [name, t] : params_) n += t.numel();
    return n;
  }

 private:
  std::map<std::string, Tensor> params_;
  std::uint64_t seed_;
  Rng rng_;
};

// --- serialization (flat binary, magic RPND) ----------------------------

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  char b[4];
  std::memcpy(b, &v, 4);
  out.append(b, 4);
}

inline void put_f64(std::string& out, double v) {
  char b[8];
  std::memcpy(b, &v, 8);
  out.append(b, 8);
}

struct ByteReader {
  const std::string& buf;
  std::size_t pos = 0;

  void need(std::size_t n, const char* what) const {
    if (pos + n > buf.size()) throw IoError(std::string("truncated parameter stream while reading ") + what);
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v;
    std::memcpy(&v, buf.data() + pos, 4);
    pos += 4;
    return v;
  }
  double f64(const char* what) {
    need(8, what);
    double v;
    std::memcpy(&v, buf.data() + pos, 8);
    pos += 8;
    return v;
  }
  std::string bytes(std::size_t n, const char* what) {
    need(n, what);
    std::string s = buf.substr(pos, n);
    pos += n;
    return s;
  }
};

}  // namespace detail

inline constexpr char kParamMagic[4] = {'R', 'P', 'N', 'D'};
inline constexpr std::uint32_t kParamVersion = 1;

// Serializes the store name-sorted: magic, version, then per parameter the
// name length, name bytes, rank, dims, and little-endian f64 payload.
inline std::string save_params(const ParameterStore& store) {
  std::string out;
  out.append(kParamMagic, 4);
  detail::put_u32(out, kParamVersion);
  for (const auto& [name, t] : store.items()) {
    detail::put_u32(out, static_cast<std::uint32_t>(name.size()));
    out.append(name);
    detail::put_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (int i = 0; i < t.rank(); ++i) detail::put_u32(out, static_cast<std::uint32_t>(t.dim(i)));
    for (double v : t.data()) detail::put_f64(out, v);
  }
  return out;
}

// Loads a parameter stream produced by save_params. When `into` already has a
// parameter of the same name the values are loaded in place (shapes must
// agree); otherwise the parameter is created.
inline void load_params(const std::string& bytes, ParameterStore& into) {
  if (bytes.size() < 8 || std::memcmp(bytes.data(), kParamMagic, 4) != 0) {
    throw IoError("bad parameter stream: expected RPND magic");
  }
  detail::ByteReader r{bytes, 4};
  const std::uint32_t version = r.u32("version");
  if (version != kParamVersion) {
    throw IoError("parameter stream version " + std::to_string(version) + ", expected " +
                  std::to_string(kParamVersion));
  }
  while (r.pos < bytes.size()) {
    const std::uint32_t name_len = r.u32("name length");
    const std::string name = r.bytes(name_len, "name");
    const std::uint32_t rank = r.u32("rank");
    if (rank > 4) throw IoError("parameter '" + name + "': rank " + std::to_string(rank) + " exceeds 4");
    ShapeDims dims(rank);
    for (std::uint32_t i = 0; i < rank; ++i) dims[i] = static_cast<int>(r.u32("dim"));
    const std::size_t n = shape_numel(dims);
    std::vector<double> data(n);
    for (std::size_t i = 0; i < n; ++i) data[i] = r.f64("payload");
    if (into.contains(name)) {
      Tensor t = into.at(name);
      if (t.shape() != dims) {
        throw IoError("parameter '" + name + "': shape mismatch on load");
      }
      t.data() = std::move(data);
    } else {
      Tensor t = into.create(name, dims, Init::kZeros);
      t.data() = std::move(data);
    }
  }
}

// --- MLP helper ---------------------------------------------------------

// Creates an affine chain prefix.w0/b0 ... w{n-1}/b{n-1} through `dims`.
inline void init_mlp(ParameterStore& store, const std::string& prefix, const std::vector<int>& dims) {
  if (dims.size() < 2) throw ValidationError("init_mlp: need at least input and output dims");
  for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
    store.create(prefix + ".w" + std::to_string(l), {dims[l], dims[l + 1]}, Init::kXavier);
    store.create(prefix + ".b" + std::to_string(l), {dims[l + 1]}, Init::kZeros);
  }
}

inline int mlp_layer_count(const ParameterStore& store, const std::string& prefix) {
  int n = 0;
  while (store.contains(prefix + ".w" + std::to_string(n))) ++n;
  return n;
}

// Alternating affine + ReLU with a final affine layer.
inline Tensor mlp_forward(const Tensor& x, const ParameterStore& store, const std::string& prefix) {
  const int layers = mlp_layer_count(store, prefix);
  if (layers == 0) throw ValidationError("mlp_forward: no layers under '" + prefix + "'");
  Tensor h = x;
  for (int l = 0; l < layers; ++l) {
    h = affine(h, store.at(prefix + ".w" + std::to_string(l)), store.at(prefix + ".b" + std::to_string(l)));
    if (l + 1 < layers) h = relu(h);
  }
  return h;
}

// --- gradient checking --------------------------------------------------

// Central-difference check of every parameter entry against the analytic
// gradient; returns max over entries of |analytic - numeric| / max(1, |numeric|).
inline double grad_check(const std::function<Tensor()>& fn, std::vector<ParameterStore*> stores,
                         double step) {
  if (step < 1e-8 || step > 1e-3) throw ValidationError("grad_check: step must be in [1e-8, 1e-3]");
  for (ParameterStore* s : stores) s->zero_grads();
  Tensor loss = fn();
  backward(loss);
  std::vector<std::vector<double>> analytic;
  for (ParameterStore* s : stores) {
    for (const auto& [name, t] : s->items()) {
      t.get()->ensure_grad();
      analytic.push_back(t.grad());
    }
  }
  double max_err = 0.0;
  std::size_t pi = 0;
  for (ParameterStore* s : stores) {
    for (const auto& [name, t] : s->items()) {
      for (std::size_t i = 0; i < t.numel(); ++i) {
        const double saved = t.data()[i];
        t.data()[i] = saved + step;
        const double up = fn().scalar();
        t.data()[i] = saved - step;
        const double down = fn().scalar();
        t.data()[i] = saved;
        const double numeric = (up - down) / (2.0 * step);
        const double err = std::fabs(analytic[pi][i] - numeric) / std::max(1.0, std::fabs(numeric));
        max_err = std::max(max_err, err);
      }
      ++pi;
    }
  }
  return max_err;
}

inline double grad_check(const std::function<Tensor()>& fn, ParameterStore& store, double step) {
  return grad_check(fn, std::vector<ParameterStore*>{&store}, step);
}

// Walks the graph below `root` and reports the smallest |input| feeding any
// node with the given op name (used to confirm ReLU probes sit off the kink).
inline double min_abs_input_to_op(const Tensor& root, const std::string& op_name) {
  double best = std::numeric_limits<double>::infinity();
  std::unordered_set<Node*> seen;
  std::vector<Node*> stack{root.get()};
  while (!stack.empty()) {
    Node* n = stack.back();
    stack.pop_back();
    if (!seen.insert(n).second) continue;
    if (op_name == n->op) {
      for (double v : n->parents[0]->value) best = std::min(best, std::fabs(v));
    }
    for (auto& p : n->parents) stack.push_back(p.get());
  }
  return best;
}

}  // namespace tpred
