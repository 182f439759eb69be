#pragma once

// Dense double tensors with a reverse-mode tape. The tape is the implicit
// graph of nodes: every taped op records its parents and a pull-back that
// scatters the output gradient into them. backward() runs the pull-backs in
// reverse topological order, visiting each node exactly once.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "emrf/common.hpp"

namespace emrf {

struct Node;
using NodePtr = std::shared_ptr<Node>;

struct Node {
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;  // allocated lazily during backward
  bool requires_grad = false;
  bool is_leaf = true;
  std::vector<NodePtr> parents;
  std::function<void(Node&)> pullback;  // scatters this->grad into parents

  int64_t numel() const { return int64_t(values.size()); }
  void ensure_grad() {
    if (grad.size() != values.size()) grad.assign(values.size(), 0.0);
  }
};

// Thread-local switch: when off, ops do not record the tape.
inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(grad_mode_flag()) { grad_mode_flag() = false; }
  ~NoGradGuard() { grad_mode_flag() = prev; }
};

class Tensor {
 public:
  Tensor() : node_(std::make_shared<Node>()) {}

  explicit Tensor(Shape shape, bool requires_grad = false)
      : node_(std::make_shared<Node>()) {
    for (int64_t e : shape) EMRF_CHECK(e > 0, "tensor extent must be positive, got shape ", shape_str(shape));
    node_->shape = std::move(shape);
    node_->values.assign(size_t(shape_numel(node_->shape)), 0.0);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape s) { return Tensor(std::move(s)); }

  static Tensor full(Shape s, double v) {
    Tensor t(std::move(s));
    std::fill(t.data().begin(), t.data().end(), v);
    return t;
  }

  static Tensor ones(Shape s) { return full(std::move(s), 1.0); }

  static Tensor from(Shape s, std::vector<double> vals, bool requires_grad = false) {
    Tensor t(std::move(s), requires_grad);
    EMRF_CHECK(int64_t(vals.size()) == t.numel(), "value count ", vals.size(),
               " does not match shape ", shape_str(t.shape()));
    t.data() = std::move(vals);
    return t;
  }

  static Tensor scalar(double v, bool requires_grad = false) {
    return from({1}, {v}, requires_grad);
  }

  static Tensor uniform(Shape s, Rng& rng, double lo = 0.0, double hi = 1.0,
                        bool requires_grad = false) {
    Tensor t(std::move(s), requires_grad);
    for (double& v : t.data()) v = rng.uniform(lo, hi);
    return t;
  }

  static Tensor normal(Shape s, Rng& rng, double mean = 0.0, double stddev = 1.0,
                       bool requires_grad = false) {
    Tensor t(std::move(s), requires_grad);
    for (double& v : t.data()) v = mean + stddev * rng.normal();
    return t;
  }

  const Shape& shape() const { return node_->shape; }
  int64_t numel() const { return node_->numel(); }
  int64_t extent(size_t axis) const { return node_->shape[axis]; }
  size_t rank() const { return node_->shape.size(); }

  std::vector<double>& data() { return node_->values; }
  const std::vector<double>& data() const { return node_->values; }
  double at(int64_t i) const { return node_->values[size_t(i)]; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool b) {
    node_->requires_grad = b;
    EMRF_CHECK(node_->is_leaf || !b, "requires_grad can only be toggled on leaves");
  }

  bool is_leaf() const { return node_->is_leaf; }
  bool on_tape() const { return !node_->parents.empty() || !node_->is_leaf; }

  // Gradient of the most recent backward() pass; zeros if never touched.
  std::vector<double>& grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  void zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
  }

  // A value copy detached from the tape.
  Tensor detach() const {
    Tensor t;
    t.node_->shape = node_->shape;
    t.node_->values = node_->values;
    return t;
  }

  NodePtr node() const { return node_; }

  static Tensor wrap(NodePtr n) {
    Tensor t;
    t.node_ = std::move(n);
    return t;
  }

 private:
  NodePtr node_;
};

namespace detail {

inline bool tracing(std::initializer_list<const Tensor*> inputs) {
  if (!grad_mode_flag()) return false;
  for (const Tensor* t : inputs)
    if (t->requires_grad() || t->on_tape()) return true;
  return false;
}

inline Tensor make_result(Shape shape, std::vector<double> values,
                          std::initializer_list<const Tensor*> inputs,
                          std::function<void(Node&)> pullback) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->values = std::move(values);
  if (tracing(inputs)) {
    n->is_leaf = false;
    n->requires_grad = true;
    for (const Tensor* t : inputs) n->parents.push_back(t->node());
    n->pullback = std::move(pullback);
  }
  return Tensor::wrap(n);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise ops

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  EMRF_CHECK(a.shape() == b.shape(), op, ": shape mismatch ", shape_str(a.shape()),
             " vs ", shape_str(b.shape()));
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  std::vector<double> out(a.data());
  for (size_t i = 0; i < out.size(); ++i) out[i] += b.at(int64_t(i));
  return detail::make_result(a.shape(), std::move(out), {&a, &b}, [](Node& n) {
    Node& pa = *n.parents[0];
    Node& pb = *n.parents[1];
    pa.ensure_grad();
    pb.ensure_grad();
    for (size_t i = 0; i < n.grad.size(); ++i) {
      pa.grad[i] += n.grad[i];
      pb.grad[i] += n.grad[i];
    }
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "sub");
  std::vector<double> out(a.data());
  for (size_t i = 0; i < out.size(); ++i) out[i] -= b.at(int64_t(i));
  return detail::make_result(a.shape(), std::move(out), {&a, &b}, [](Node& n) {
    Node& pa = *n.parents[0];
    Node& pb = *n.parents[1];
    pa.ensure_grad();
    pb.ensure_grad();
    for (size_t i = 0; i < n.grad.size(); ++i) {
      pa.grad[i] += n.grad[i];
      pb.grad[i] -= n.grad[i];
    }
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  std::vector<double> out(a.data());
  for (size_t i = 0; i < out.size(); ++i) out[i] *= b.at(int64_t(i));
  return detail::make_result(a.shape(), std::move(out), {&a, &b}, [](Node& n) {
    Node& pa = *n.parents[0];
    Node& pb = *n.parents[1];
    pa.ensure_grad();
    pb.ensure_grad();
    for (size_t i = 0; i < n.grad.size(); ++i) {
      pa.grad[i] += n.grad[i] * pb.values[i];
      pb.grad[i] += n.grad[i] * pa.values[i];
    }
  });
}

inline Tensor div(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "div");
  for (size_t i = 0; i < b.data().size(); ++i)
    EMRF_CHECK(b.data()[i] != 0.0, "div: zero divisor at flat index ", i);
  std::vector<double> out(a.data());
  for (size_t i = 0; i < out.size(); ++i) out[i] /= b.at(int64_t(i));
  return detail::make_result(a.shape(), std::move(out), {&a, &b}, [](Node& n) {
    Node& pa = *n.parents[0];
    Node& pb = *n.parents[1];
    pa.ensure_grad();
    pb.ensure_grad();
    for (size_t i = 0; i < n.grad.size(); ++i) {
      double inv = 1.0 / pb.values[i];
      pa.grad[i] += n.grad[i] * inv;
      pb.grad[i] -= n.grad[i] * pa.values[i] * inv * inv;
    }
  });
}

inline Tensor scale(const Tensor& a, double s) {
  std::vector<double> out(a.data());
  for (double& v : out) v *= s;
  return detail::make_result(a.shape(), std::move(out), {&a}, [s](Node& n) {
    Node& pa = *n.parents[0];
    pa.ensure_grad();
    for (size_t i = 0; i < n.grad.size(); ++i) pa.grad[i] += n.grad[i] * s;
  });
}

inline Tensor add_scalar(const Tensor& a, double s) {
  std::vector<double> out(a.data());
  for (double& v : out) v += s;
  return detail::make_result(a.shape(), std::move(out), {&a}, [](Node& n) {
    Node& pa = *n.parents[0];
    pa.ensure_grad();
    for (size_t i = 0; i < n.grad.size(); ++i) pa.grad[i] += n.grad[i];
  });
}

// Saturates to [lo, hi]; subgradient 1 strictly inside, 0 outside.
inline Tensor clamp(const Tensor& a, double lo, double hi) {
  EMRF_CHECK(lo <= hi, "clamp: lo ", lo, " exceeds hi ", hi);
  std::vector<double> out(a.data());
  for (double& v : out) v = std::min(hi, std::max(lo, v));
  return detail::make_result(a.shape(), std::move(out), {&a}, [lo, hi](Node& n) {
    Node& pa = *n.parents[0];
    pa.ensure_grad();
    for (size_t i = 0; i < n.grad.size(); ++i)
      if (pa.values[i] > lo && pa.values[i] < hi) pa.grad[i] += n.grad[i];
  });
}

inline Tensor neg(const Tensor& a) { return scale(a, -1.0); }

inline Tensor exp(const Tensor& a) {
  std::vector<double> out(a.data());
  for (double& v : out) v = std::exp(v);
  return detail::make_result(a.shape(), std::move(out), {&a}, [](Node& n) {
    Node& pa = *n.parents[0];
    pa.ensure_grad();
    for (size_t i = 0; i < n.grad.size(); ++i) pa.grad[i] += n.grad[i] * n.values[i];
  });
}

inline Tensor log(const Tensor& a) {
  for (double v : a.data()) EMRF_CHECK(v > 0.0, "log: non-positive input ", v);
  std::vector<double> out(a.data());
  for (double& v : out) v = std::log(v);
  return detail::make_result(a.shape(), std::move(out), {&a}, [](Node& n) {
    Node& pa = *n.parents[0];
    pa.ensure_grad();
    for (size_t i = 0; i < n.grad.size(); ++i) pa.grad[i] += n.grad[i] / pa.values[i];
  });
}

inline Tensor sqrt(const Tensor& a) {
  for (double v : a.data()) EMRF_CHECK(v >= 0.0, "sqrt: negative input ", v);
  std::vector<double> out(a.data());
  for (double& v : out) v = std::sqrt(v);
  return detail::make_result(a.shape(), std::move(out), {&a}, [](Node& n) {
    Node& pa = *n.parents[0];
    pa.ensure_grad();
    for (size_t i = 0; i < n.grad.size(); ++i)
      pa.grad[i] += n.grad[i] * 0.5 / std::max(n.values[i], 1e-300);
  });
}

inline Tensor square(const Tensor& a) { return mul(a, a); }

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator*(const Tensor& a, double s) { return scale(a, s); }
inline Tensor operator*(double s, const Tensor& a) { return scale(a, s); }
inline Tensor operator+(const Tensor& a, double s) { return add_scalar(a, s); }
inline Tensor operator-(const Tensor& a, double s) { return add_scalar(a, -s); }

// ---------------------------------------------------------------------------
// shape ops

inline Tensor reshape(const Tensor& a, Shape s) {
  EMRF_CHECK(shape_numel(s) == a.numel(), "reshape: element count mismatch ",
             shape_str(a.shape()), " -> ", shape_str(s));
  return detail::make_result(std::move(s), a.data(), {&a}, [](Node& n) {
    Node& pa = *n.parents[0];
    pa.ensure_grad();
    for (size_t i = 0; i < n.grad.size(); ++i) pa.grad[i] += n.grad[i];
  });
}

inline Tensor transpose2d(const Tensor& a) {
  EMRF_CHECK(a.rank() == 2, "transpose2d: expected rank 2, got ", shape_str(a.shape()));
  int64_t r = a.extent(0), c = a.extent(1);
  std::vector<double> out(size_t(r * c));
  for (int64_t i = 0; i < r; ++i)
    for (int64_t j = 0; j < c; ++j) out[size_t(j * r + i)] = a.at(i * c + j);
  return detail::make_result({c, r}, std::move(out), {&a}, [r, c](Node& n) {
    Node& pa = *n.parents[0];
    pa.ensure_grad();
    for (int64_t i = 0; i < r; ++i)
      for (int64_t j = 0; j < c; ++j) pa.grad[size_t(i * c + j)] += n.grad[size_t(j * r + i)];
  });
}

inline Tensor concat(const std::vector<Tensor>& parts, size_t axis) {
  EMRF_CHECK(!parts.empty(), "concat: no inputs");
  const Shape& s0 = parts[0].shape();
  EMRF_CHECK(axis < s0.size(), "concat: axis ", axis, " out of range for ", shape_str(s0));
  Shape out_shape = s0;
  int64_t total = 0;
  for (const Tensor& p : parts) {
    EMRF_CHECK(p.rank() == s0.size(), "concat: rank mismatch");
    for (size_t d = 0; d < s0.size(); ++d)
      EMRF_CHECK(d == axis || p.shape()[d] == s0[d], "concat: shape mismatch ",
                 shape_str(p.shape()), " vs ", shape_str(s0));
    total += p.extent(axis);
  }
  out_shape[axis] = total;

  int64_t outer = 1, inner = 1;
  for (size_t d = 0; d < axis; ++d) outer *= s0[d];
  for (size_t d = axis + 1; d < s0.size(); ++d) inner *= s0[d];

  std::vector<double> out(size_t(shape_numel(out_shape)));
  std::vector<int64_t> axis_sizes;
  int64_t offset = 0;
  for (const Tensor& p : parts) {
    int64_t ax = p.extent(axis);
    axis_sizes.push_back(ax);
    for (int64_t o = 0; o < outer; ++o)
      for (int64_t a2 = 0; a2 < ax; ++a2)
        for (int64_t in = 0; in < inner; ++in)
          out[size_t((o * total + offset + a2) * inner + in)] =
              p.at((o * ax + a2) * inner + in);
    offset += ax;
  }

  auto node = std::make_shared<Node>();
  node->shape = out_shape;
  node->values = std::move(out);
  bool trace = grad_mode_flag();
  if (trace) {
    bool any = false;
    for (const Tensor& p : parts) any = any || p.requires_grad() || p.on_tape();
    trace = any;
  }
  if (trace) {
    node->is_leaf = false;
    node->requires_grad = true;
    for (const Tensor& p : parts) node->parents.push_back(p.node());
    node->pullback = [outer, inner, total, axis_sizes](Node& n) {
      int64_t off = 0;
      for (size_t pi = 0; pi < n.parents.size(); ++pi) {
        Node& p = *n.parents[pi];
        p.ensure_grad();
        int64_t ax = axis_sizes[pi];
        for (int64_t o = 0; o < outer; ++o)
          for (int64_t a2 = 0; a2 < ax; ++a2)
            for (int64_t in = 0; in < inner; ++in)
              p.grad[size_t((o * ax + a2) * inner + in)] +=
                  n.grad[size_t((o * total + off + a2) * inner + in)];
        off += ax;
      }
    };
  }
  return Tensor::wrap(node);
}

// Contiguous slice [start, start+len) along `axis`.
inline Tensor slice(const Tensor& a, size_t axis, int64_t start, int64_t len) {
  const Shape& s = a.shape();
  EMRF_CHECK(axis < s.size(), "slice: axis out of range");
  EMRF_CHECK(start >= 0 && len > 0 && start + len <= s[axis], "slice: range [", start,
             ", ", start + len, ") out of extent ", s[axis]);
  Shape out_shape = s;
  out_shape[axis] = len;
  int64_t outer = 1, inner = 1, ax = s[axis];
  for (size_t d = 0; d < axis; ++d) outer *= s[d];
  for (size_t d = axis + 1; d < s.size(); ++d) inner *= s[d];
  std::vector<double> out(size_t(outer * len * inner));
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t a2 = 0; a2 < len; ++a2)
      for (int64_t in = 0; in < inner; ++in)
        out[size_t((o * len + a2) * inner + in)] = a.at((o * ax + start + a2) * inner + in);
  return detail::make_result(std::move(out_shape), std::move(out), {&a},
                             [outer, inner, ax, start, len](Node& n) {
                               Node& pa = *n.parents[0];
                               pa.ensure_grad();
                               for (int64_t o = 0; o < outer; ++o)
                                 for (int64_t a2 = 0; a2 < len; ++a2)
                                   for (int64_t in = 0; in < inner; ++in)
                                     pa.grad[size_t((o * ax + start + a2) * inner + in)] +=
                                         n.grad[size_t((o * len + a2) * inner + in)];
                             });
}

// ---------------------------------------------------------------------------
// matmul

// Running multiply-add count for matmul/conv2d forwards (cost accounting).
inline int64_t& flop_counter() {
  thread_local int64_t count = 0;
  return count;
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  EMRF_CHECK(a.rank() == 2 && b.rank() == 2, "matmul: expected rank-2 inputs, got ",
             shape_str(a.shape()), " and ", shape_str(b.shape()));
  EMRF_CHECK(a.extent(1) == b.extent(0), "matmul: inner extents differ, ",
             shape_str(a.shape()), " vs ", shape_str(b.shape()));
  int64_t m = a.extent(0), k = a.extent(1), n = b.extent(1);
  flop_counter() += 2 * m * k * n;
  std::vector<double> out(size_t(m * n), 0.0);
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  for (int64_t i = 0; i < m; ++i)
    for (int64_t p = 0; p < k; ++p) {
      double av = pa[i * k + p];
      if (av == 0.0) continue;
      const double* brow = pb + p * n;
      double* orow = out.data() + i * n;
      for (int64_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  return detail::make_result({m, n}, std::move(out), {&a, &b}, [m, k, n](Node& nd) {
    Node& na = *nd.parents[0];
    Node& nb = *nd.parents[1];
    na.ensure_grad();
    nb.ensure_grad();
    // dA = dC * B^T
    for (int64_t i = 0; i < m; ++i)
      for (int64_t p = 0; p < k; ++p) {
        double acc = 0.0;
        const double* gr = nd.grad.data() + i * n;
        const double* br = nb.values.data() + p * n;
        for (int64_t j = 0; j < n; ++j) acc += gr[j] * br[j];
        na.grad[size_t(i * k + p)] += acc;
      }
    // dB = A^T * dC
    for (int64_t p = 0; p < k; ++p)
      for (int64_t i = 0; i < m; ++i) {
        double av = na.values[size_t(i * k + p)];
        if (av == 0.0) continue;
        const double* gr = nd.grad.data() + i * n;
        double* br = nb.grad.data() + p * n;
        for (int64_t j = 0; j < n; ++j) br[j] += av * gr[j];
      }
  });
}

// ---------------------------------------------------------------------------
// reductions

enum class ReduceKind { Sum, Mean, Max };

namespace detail {
struct AxisPlan {
  Shape out_shape;           // with keep_dims applied
  std::vector<int64_t> out_index_of_flat;  // flat input index -> flat output index
  int64_t reduced_count = 1;
};

inline AxisPlan plan_reduce(const Shape& in, std::vector<size_t> axes, bool keep_dims) {
  std::vector<bool> is_reduced(in.size(), false);
  for (size_t ax : axes) {
    EMRF_CHECK(ax < in.size(), "reduce: axis ", ax, " invalid for ", shape_str(in));
    EMRF_CHECK(!is_reduced[ax], "reduce: duplicate axis ", ax);
    is_reduced[ax] = true;
  }
  AxisPlan plan;
  for (size_t d = 0; d < in.size(); ++d) {
    if (is_reduced[d]) {
      plan.reduced_count *= in[d];
      if (keep_dims) plan.out_shape.push_back(1);
    } else {
      plan.out_shape.push_back(in[d]);
    }
  }
  if (plan.out_shape.empty()) plan.out_shape.push_back(1);

  int64_t total = shape_numel(in);
  plan.out_index_of_flat.resize(size_t(total));
  std::vector<int64_t> strides(in.size(), 1);
  for (int64_t d = int64_t(in.size()) - 2; d >= 0; --d)
    strides[size_t(d)] = strides[size_t(d) + 1] * in[size_t(d) + 1];
  // output strides over kept dims
  std::vector<int64_t> kept_extents;
  for (size_t d = 0; d < in.size(); ++d)
    if (!is_reduced[d]) kept_extents.push_back(in[d]);
  std::vector<int64_t> kept_strides(kept_extents.size(), 1);
  for (int64_t d = int64_t(kept_extents.size()) - 2; d >= 0; --d)
    kept_strides[size_t(d)] = kept_strides[size_t(d) + 1] * kept_extents[size_t(d) + 1];

  for (int64_t flat = 0; flat < total; ++flat) {
    int64_t rem = flat, out_idx = 0;
    size_t kd = 0;
    for (size_t d = 0; d < in.size(); ++d) {
      int64_t coord = rem / strides[d];
      rem %= strides[d];
      if (!is_reduced[d]) out_idx += coord * kept_strides[kd++];
    }
    plan.out_index_of_flat[size_t(flat)] = out_idx;
  }
  return plan;
}
}  // namespace detail

inline Tensor reduce(ReduceKind kind, const Tensor& x, std::vector<size_t> axes,
                     bool keep_dims = false) {
  auto plan = detail::plan_reduce(x.shape(), axes, keep_dims);
  int64_t out_n = shape_numel(plan.out_shape);
  std::vector<double> out;
  std::vector<int64_t> argmax;  // flat input index winning each output slot
  if (kind == ReduceKind::Max) {
    out.assign(size_t(out_n), -std::numeric_limits<double>::infinity());
    argmax.assign(size_t(out_n), -1);
    for (int64_t i = 0; i < x.numel(); ++i) {
      int64_t o = plan.out_index_of_flat[size_t(i)];
      if (x.at(i) > out[size_t(o)]) {
        out[size_t(o)] = x.at(i);
        argmax[size_t(o)] = i;
      }
    }
  } else {
    out.assign(size_t(out_n), 0.0);
    for (int64_t i = 0; i < x.numel(); ++i)
      out[size_t(plan.out_index_of_flat[size_t(i)])] += x.at(i);
    if (kind == ReduceKind::Mean)
      for (double& v : out) v /= double(plan.reduced_count);
  }
  double inv_count = 1.0 / double(plan.reduced_count);
  auto map = std::make_shared<std::vector<int64_t>>(std::move(plan.out_index_of_flat));
  auto amax = std::make_shared<std::vector<int64_t>>(std::move(argmax));
  return detail::make_result(
      plan.out_shape, std::move(out), {&x}, [kind, map, amax, inv_count](Node& n) {
        Node& pa = *n.parents[0];
        pa.ensure_grad();
        if (kind == ReduceKind::Max) {
          for (size_t o = 0; o < amax->size(); ++o)
            if ((*amax)[o] >= 0) pa.grad[size_t((*amax)[o])] += n.grad[o];
        } else {
          double f = (kind == ReduceKind::Mean) ? inv_count : 1.0;
          for (size_t i = 0; i < map->size(); ++i)
            pa.grad[i] += n.grad[size_t((*map)[i])] * f;
        }
      });
}

inline Tensor sum(const Tensor& x, std::vector<size_t> axes, bool keep_dims = false) {
  return reduce(ReduceKind::Sum, x, std::move(axes), keep_dims);
}
inline Tensor mean(const Tensor& x, std::vector<size_t> axes, bool keep_dims = false) {
  return reduce(ReduceKind::Mean, x, std::move(axes), keep_dims);
}
inline Tensor reduce_max(const Tensor& x, std::vector<size_t> axes, bool keep_dims = false) {
  return reduce(ReduceKind::Max, x, std::move(axes), keep_dims);
}

inline Tensor sum_all(const Tensor& x) {
  std::vector<size_t> axes(x.rank());
  for (size_t i = 0; i < axes.size(); ++i) axes[i] = i;
  return sum(x, axes);
}
inline Tensor mean_all(const Tensor& x) {
  std::vector<size_t> axes(x.rank());
  for (size_t i = 0; i < axes.size(); ++i) axes[i] = i;
  return mean(x, axes);
}

// ---------------------------------------------------------------------------
// backward

inline void backward(const Tensor& loss) {
  EMRF_CHECK(loss.numel() == 1, "backward: loss must be scalar, got ",
             shape_str(loss.shape()));
  EMRF_CHECK(loss.on_tape() || loss.requires_grad(),
             "backward: loss is not connected to any tape");
  // reverse topological order via iterative DFS
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, size_t>> stack;
  stack.emplace_back(loss.node().get(), 0);
  visited.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next_child] = stack.back();
    if (next_child < node->parents.size()) {
      Node* child = node->parents[next_child++].get();
      if (!visited.count(child)) {
        visited.insert(child);
        stack.emplace_back(child, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  loss.node()->ensure_grad();
  loss.node()->grad[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->pullback) {
      n->ensure_grad();
      n->pullback(*n);
      n->pullback = nullptr;  // tape consumed
    }
  }
}

// ---------------------------------------------------------------------------
// grad_check: analytic gradient vs central finite differences

struct GradCheckReport {
  std::vector<double> rel_error;  // per input element
  double max_rel_error = 0.0;
  bool pass = false;
};

inline GradCheckReport grad_check(const std::function<Tensor(const Tensor&)>& f,
                                  const Tensor& x, double step = 1e-5,
                                  double tol = 1e-4) {
  Tensor probe = x.detach();
  probe.set_requires_grad(true);
  Tensor y = f(probe);
  EMRF_CHECK(y.numel() == 1, "grad_check: f must be scalar-valued, got ",
             shape_str(y.shape()));
  backward(y);
  std::vector<double> analytic = probe.grad();

  GradCheckReport report;
  report.rel_error.resize(size_t(x.numel()));
  NoGradGuard ng;
  for (int64_t i = 0; i < x.numel(); ++i) {
    Tensor xp = x.detach();
    Tensor xm = x.detach();
    xp.data()[size_t(i)] += step;
    xm.data()[size_t(i)] -= step;
    double fp = f(xp).at(0);
    double fm = f(xm).at(0);
    EMRF_CHECK(std::isfinite(fp) && std::isfinite(fm),
               "grad_check: non-finite f value at perturbed element ", i);
    double numeric = (fp - fm) / (2.0 * step);
    double err = std::abs(analytic[size_t(i)] - numeric) / std::max(1.0, std::abs(numeric));
    report.rel_error[size_t(i)] = err;
    report.max_rel_error = std::max(report.max_rel_error, err);
  }
  report.pass = report.max_rel_error <= tol;
  return report;
}

}  // namespace emrf
