#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <limits>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "fsct/rng.hpp"

namespace fsct {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t e : s) n *= e;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

[[noreturn]] inline void fail_shape(const std::string& op, const std::string& detail) {
  throw std::invalid_argument(op + ": " + detail);
}

class Tape;

struct TensorNode {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // same length as data once the node is tracked
  bool requires_grad = false;
  const Tape* producer = nullptr;  // tape whose op produced this node, null for leaves

  std::size_t size() const { return data.size(); }
  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }
};

using NodePtr = std::shared_ptr<TensorNode>;

/// Dense row-major double tensor. Copying a Tensor copies a handle to the
/// same storage; use clone() for an independent deep copy.
class Tensor {
 public:
  Tensor() : node_(std::make_shared<TensorNode>()) {}
  explicit Tensor(NodePtr node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape) {
    auto node = std::make_shared<TensorNode>();
    node->data.assign(shape_numel(shape), 0.0);
    node->shape = std::move(shape);
    return Tensor(std::move(node));
  }

  static Tensor full(Shape shape, double value) {
    Tensor t = zeros(std::move(shape));
    std::fill(t.data().begin(), t.data().end(), value);
    return t;
  }

  static Tensor ones(Shape shape) { return full(std::move(shape), 1.0); }

  static Tensor from(Shape shape, std::vector<double> values) {
    if (shape_numel(shape) != values.size())
      fail_shape("Tensor::from", "shape " + shape_str(shape) + " wants " +
                                     std::to_string(shape_numel(shape)) + " values, got " +
                                     std::to_string(values.size()));
    auto node = std::make_shared<TensorNode>();
    node->shape = std::move(shape);
    node->data = std::move(values);
    return Tensor(std::move(node));
  }

  static Tensor scalar(double value) { return from({}, {value}); }

  static Tensor uniform(Shape shape, double lo, double hi, Rng& rng) {
    Tensor t = zeros(std::move(shape));
    for (double& v : t.data()) v = rng.uniform(lo, hi);
    return t;
  }

  static Tensor normal(Shape shape, double mean, double stddev, Rng& rng) {
    Tensor t = zeros(std::move(shape));
    for (double& v : t.data()) v = rng.normal(mean, stddev);
    return t;
  }

  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->data.size(); }
  std::size_t extent(std::size_t axis) const { return node_->shape.at(axis); }

  std::vector<double>& data() { return node_->data; }
  const std::vector<double>& data() const { return node_->data; }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool on) {
    node_->requires_grad = on;
    if (on) node_->ensure_grad();
    return *this;
  }

  const std::vector<double>& grad() const {
    if (!node_->requires_grad)
      throw std::logic_error("Tensor::grad: tensor is not tracked for gradients");
    return node_->grad;
  }

  void zero_grad() {
    if (node_->requires_grad) node_->grad.assign(node_->data.size(), 0.0);
  }

  double value() const {
    if (size() != 1) fail_shape("Tensor::value", "tensor " + shape_str(shape()) + " is not scalar");
    return node_->data[0];
  }

  double at(std::initializer_list<std::size_t> idx) const {
    if (idx.size() != rank()) fail_shape("Tensor::at", "rank mismatch for " + shape_str(shape()));
    std::size_t off = 0;
    std::size_t stride = size();
    std::size_t ax = 0;
    for (std::size_t i : idx) {
      stride /= node_->shape[ax];
      if (i >= node_->shape[ax]) fail_shape("Tensor::at", "index out of range");
      off += i * stride;
      ++ax;
    }
    return node_->data[off];
  }

  /// Copy of the values with no gradient tracking.
  Tensor detach() const {
    auto node = std::make_shared<TensorNode>();
    node->shape = node_->shape;
    node->data = node_->data;
    return Tensor(std::move(node));
  }

  /// Independent deep copy (keeps requires_grad, detaches from the tape).
  Tensor clone() const {
    Tensor t = detach();
    if (node_->requires_grad) t.set_requires_grad(true);
    return t;
  }

  const NodePtr& node() const { return node_; }

 private:
  NodePtr node_;
};

namespace detail {

inline std::vector<std::size_t> row_major_strides(const Shape& shape) {
  std::vector<std::size_t> strides(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) strides[i - 1] = strides[i] * shape[i];
  return strides;
}

inline Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r);
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t ea = i < r - a.size() ? 1 : a[i - (r - a.size())];
    const std::size_t eb = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (ea == eb)
      out[i] = ea;
    else if (ea == 1)
      out[i] = eb;
    else if (eb == 1)
      out[i] = ea;
    else
      fail_shape(op, "incompatible shapes " + shape_str(a) + " and " + shape_str(b));
  }
  return out;
}

// Element strides of `from` aligned to broadcast target `to`; 0 marks repeated axes.
inline std::vector<std::size_t> broadcast_strides(const Shape& from, const Shape& to,
                                                  const char* op) {
  std::vector<std::size_t> strides(to.size(), 0);
  const auto fstr = row_major_strides(from);
  const std::size_t off = to.size() - from.size();
  for (std::size_t i = 0; i < from.size(); ++i) {
    const std::size_t j = off + i;
    if (from[i] == to[j])
      strides[j] = fstr[i];
    else if (from[i] == 1)
      strides[j] = 0;
    else
      fail_shape(op, "cannot broadcast " + shape_str(from) + " to " + shape_str(to));
  }
  return strides;
}

// Walks every multi-index of `shape`, handing the visitor the linear output
// position plus offsets into two broadcast operands.
template <class Visit>
inline void for_each_bcast2(const Shape& shape, const std::vector<std::size_t>& sa,
                            const std::vector<std::size_t>& sb, Visit&& visit) {
  const std::size_t n = shape_numel(shape);
  const std::size_t r = shape.size();
  std::vector<std::size_t> idx(r, 0);
  std::size_t oa = 0, ob = 0;
  for (std::size_t lin = 0; lin < n; ++lin) {
    visit(lin, oa, ob);
    for (std::size_t ax = r; ax-- > 0;) {
      ++idx[ax];
      oa += sa[ax];
      ob += sb[ax];
      if (idx[ax] < shape[ax]) break;
      idx[ax] = 0;
      oa -= sa[ax] * shape[ax];
      ob -= sb[ax] * shape[ax];
    }
  }
}

}  // namespace detail

/// Ordered record of differentiable ops. Replaying it in reverse populates
/// gradients of every tracked tensor that fed the recorded graph.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Makes this tape the recording target for the current thread.
  class Scope {
   public:
    explicit Scope(Tape& tape) : prev_(active_ref()) { active_ref() = &tape; }
    ~Scope() { active_ref() = prev_; }
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    Tape* prev_;
  };

  static Tape* active() { return active_ref(); }

  std::size_t size() const { return records_.size(); }
  bool empty() const { return records_.empty(); }

  void clear() { records_.clear(); }

  void record(std::vector<NodePtr> inputs, NodePtr output, std::function<void()> backward) {
    records_.push_back(Record{std::move(inputs), std::move(output), std::move(backward)});
  }

  /// Populates grad buffers of every tracked tensor feeding `loss`.
  /// Gradients of nodes touched by this tape are reset first, so each
  /// backward pass stands on its own.
  void backward(const Tensor& loss) {
    if (loss.node()->producer != this)
      throw std::logic_error("Tape::backward: loss was not produced by this tape");
    if (loss.size() != 1)
      fail_shape("Tape::backward", "loss " + shape_str(loss.shape()) + " is not scalar");
    for (const Record& rec : records_) {
      for (const NodePtr& in : rec.inputs)
        if (in->requires_grad) in->grad.assign(in->data.size(), 0.0);
      if (rec.output->requires_grad) rec.output->grad.assign(rec.output->data.size(), 0.0);
    }
    loss.node()->ensure_grad();
    loss.node()->grad[0] = 1.0;
    for (std::size_t i = records_.size(); i-- > 0;) records_[i].backward();
  }

 private:
  struct Record {
    std::vector<NodePtr> inputs;
    NodePtr output;
    std::function<void()> backward;
  };

  static Tape*& active_ref() {
    thread_local Tape* active = nullptr;
    return active;
  }

  std::vector<Record> records_;
};

namespace detail {

inline bool tracking(std::initializer_list<const Tensor*> inputs) {
  if (Tape::active() == nullptr) return false;
  for (const Tensor* t : inputs)
    if (t->node()->requires_grad) return true;
  return false;
}

inline Tensor make_output(Shape shape) { return Tensor::zeros(std::move(shape)); }

inline void track_output(const Tensor& out, std::initializer_list<const Tensor*> inputs) {
  out.node()->requires_grad = true;
  out.node()->producer = Tape::active();
  out.node()->ensure_grad();
  for (const Tensor* t : inputs)
    if (t->node()->requires_grad) t->node()->ensure_grad();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise binary ops with NumPy-style trailing-axis broadcasting.
// ---------------------------------------------------------------------------

namespace detail {

template <class Fwd, class DfDx, class DfDy>
inline Tensor binary_op(const char* name, const Tensor& a, const Tensor& b, Fwd fwd, DfDx dfdx,
                        DfDy dfdy) {
  const Shape out_shape = broadcast_shape(a.shape(), b.shape(), name);
  const auto sa = broadcast_strides(a.shape(), out_shape, name);
  const auto sb = broadcast_strides(b.shape(), out_shape, name);
  Tensor out = make_output(out_shape);
  const auto& ad = a.node()->data;
  const auto& bd = b.node()->data;
  auto& od = out.node()->data;
  for_each_bcast2(out_shape, sa, sb,
                  [&](std::size_t lin, std::size_t oa, std::size_t ob) { od[lin] = fwd(ad[oa], bd[ob]); });
  if (tracking({&a, &b})) {
    track_output(out, {&a, &b});
    NodePtr an = a.node(), bn = b.node(), on = out.node();
    Tape::active()->record(
        {an, bn}, on, [an, bn, on, out_shape, sa, sb, dfdx, dfdy]() {
          const auto& g = on->grad;
          for_each_bcast2(out_shape, sa, sb, [&](std::size_t lin, std::size_t oa, std::size_t ob) {
            const double go = g[lin];
            if (an->requires_grad) an->grad[oa] += go * dfdx(an->data[oa], bn->data[ob]);
            if (bn->requires_grad) bn->grad[ob] += go * dfdy(an->data[oa], bn->data[ob]);
          });
        });
  }
  return out;
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      "add", a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      "sub", a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      "mul", a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

inline Tensor div(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      "div", a, b, [](double x, double y) { return x / y; },
      [](double, double y) { return 1.0 / y; },
      [](double x, double y) { return -x / (y * y); });
}

inline Tensor add(const Tensor& a, double s) { return add(a, Tensor::scalar(s)); }
inline Tensor sub(const Tensor& a, double s) { return sub(a, Tensor::scalar(s)); }
inline Tensor mul(const Tensor& a, double s) { return mul(a, Tensor::scalar(s)); }
inline Tensor div(const Tensor& a, double s) { return div(a, Tensor::scalar(s)); }

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator+(const Tensor& a, double s) { return add(a, s); }
inline Tensor operator-(const Tensor& a, double s) { return sub(a, s); }
inline Tensor operator*(const Tensor& a, double s) { return mul(a, s); }
inline Tensor operator/(const Tensor& a, double s) { return div(a, s); }
inline Tensor operator*(double s, const Tensor& a) { return mul(a, s); }
inline Tensor operator+(double s, const Tensor& a) { return add(a, s); }

// ---------------------------------------------------------------------------
// Elementwise unary ops.
// ---------------------------------------------------------------------------

namespace detail {

template <class Fwd, class DfDx>
inline Tensor unary_op(const char* /*name*/, const Tensor& a, Fwd fwd, DfDx dfdx) {
  Tensor out = make_output(a.shape());
  const auto& ad = a.node()->data;
  auto& od = out.node()->data;
  for (std::size_t i = 0; i < ad.size(); ++i) od[i] = fwd(ad[i]);
  if (tracking({&a})) {
    track_output(out, {&a});
    NodePtr an = a.node(), on = out.node();
    Tape::active()->record({an}, on, [an, on, dfdx]() {
      if (!an->requires_grad) return;
      for (std::size_t i = 0; i < an->data.size(); ++i)
        an->grad[i] += on->grad[i] * dfdx(an->data[i], on->data[i]);
    });
  }
  return out;
}

inline double std_normal_cdf(double x) { return 0.5 * (1.0 + std::erf(x * 0.7071067811865475244)); }
inline double std_normal_pdf(double x) { return std::exp(-0.5 * x * x) * 0.3989422804014326779; }

}  // namespace detail

inline Tensor neg(const Tensor& a) {
  return detail::unary_op(
      "neg", a, [](double x) { return -x; }, [](double, double) { return -1.0; });
}

inline Tensor operator-(const Tensor& a) { return neg(a); }

inline Tensor exp(const Tensor& a) {
  return detail::unary_op(
      "exp", a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

inline Tensor log(const Tensor& a) {
  return detail::unary_op(
      "log", a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

inline Tensor sqrt(const Tensor& a) {
  return detail::unary_op(
      "sqrt", a, [](double x) { return std::sqrt(x); },
      [](double, double y) { return 0.5 / y; });
}

inline Tensor relu(const Tensor& a) {
  return detail::unary_op(
      "relu", a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

/// Exact Gaussian Error Linear Unit, x * Phi(x) with Phi the standard normal CDF.
inline Tensor gelu(const Tensor& a) {
  return detail::unary_op(
      "gelu", a, [](double x) { return x * detail::std_normal_cdf(x); },
      [](double x, double) {
        return detail::std_normal_cdf(x) + x * detail::std_normal_pdf(x);
      });
}

/// max(x, floor); gradient passes only where x > floor.
inline Tensor clamp_min(const Tensor& a, double floor_value) {
  // NaN must pass through rather than be replaced by the floor; a silent
  // floor here would hide invalid values from every downstream check.
  return detail::unary_op(
      "clamp_min", a,
      [floor_value](double x) { return x >= floor_value || std::isnan(x) ? x : floor_value; },
      [floor_value](double x, double) { return x >= floor_value ? 1.0 : 0.0; });
}

// ---------------------------------------------------------------------------
// Reductions.
// ---------------------------------------------------------------------------

namespace detail {

struct AxisSplit {
  std::size_t outer, extent, inner;
};

inline AxisSplit split_at(const Shape& shape, std::size_t axis, const char* op) {
  if (axis >= shape.size()) fail_shape(op, "axis " + std::to_string(axis) + " out of range for " + shape_str(shape));
  AxisSplit s{1, shape[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

inline Tensor reduce_axis(const char* name, const Tensor& a, std::size_t axis, bool keepdim,
                          double scale) {
  const auto split = split_at(a.shape(), axis, name);
  Shape out_shape = a.shape();
  if (keepdim)
    out_shape[axis] = 1;
  else
    out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  Tensor out = make_output(out_shape);
  const auto& ad = a.node()->data;
  auto& od = out.node()->data;
  for (std::size_t o = 0; o < split.outer; ++o)
    for (std::size_t i = 0; i < split.inner; ++i) {
      double acc = 0.0;
      for (std::size_t e = 0; e < split.extent; ++e)
        acc += ad[(o * split.extent + e) * split.inner + i];
      od[o * split.inner + i] = acc * scale;
    }
  if (tracking({&a})) {
    track_output(out, {&a});
    NodePtr an = a.node(), on = out.node();
    Tape::active()->record({an}, on, [an, on, split, scale]() {
      if (!an->requires_grad) return;
      for (std::size_t o = 0; o < split.outer; ++o)
        for (std::size_t i = 0; i < split.inner; ++i) {
          const double g = on->grad[o * split.inner + i] * scale;
          for (std::size_t e = 0; e < split.extent; ++e)
            an->grad[(o * split.extent + e) * split.inner + i] += g;
        }
    });
  }
  return out;
}

}  // namespace detail

inline Tensor sum(const Tensor& a, std::size_t axis, bool keepdim = false) {
  return detail::reduce_axis("sum", a, axis, keepdim, 1.0);
}

inline Tensor mean(const Tensor& a, std::size_t axis, bool keepdim = false) {
  const auto split = detail::split_at(a.shape(), axis, "mean");
  return detail::reduce_axis("mean", a, axis, keepdim, 1.0 / static_cast<double>(split.extent));
}

inline Tensor sum_all(const Tensor& a) {
  Tensor out = detail::make_output({});
  const auto& ad = a.node()->data;
  double acc = 0.0;
  for (double v : ad) acc += v;
  out.node()->data[0] = acc;
  if (detail::tracking({&a})) {
    detail::track_output(out, {&a});
    NodePtr an = a.node(), on = out.node();
    Tape::active()->record({an}, on, [an, on]() {
      if (!an->requires_grad) return;
      const double g = on->grad[0];
      for (double& gv : an->grad) gv += g;
    });
  }
  return out;
}

inline Tensor mean_all(const Tensor& a) {
  return mul(sum_all(a), 1.0 / static_cast<double>(a.size()));
}

// ---------------------------------------------------------------------------
// Shape ops.
// ---------------------------------------------------------------------------

inline Tensor reshape(const Tensor& a, Shape new_shape) {
  if (shape_numel(new_shape) != a.size())
    fail_shape("reshape", "cannot reshape " + shape_str(a.shape()) + " to " + shape_str(new_shape));
  Tensor out = detail::make_output(new_shape);
  out.node()->data = a.node()->data;
  if (detail::tracking({&a})) {
    detail::track_output(out, {&a});
    NodePtr an = a.node(), on = out.node();
    Tape::active()->record({an}, on, [an, on]() {
      if (!an->requires_grad) return;
      for (std::size_t i = 0; i < an->grad.size(); ++i) an->grad[i] += on->grad[i];
    });
  }
  return out;
}

/// Swap the two trailing axes.
inline Tensor transpose_last2(const Tensor& a) {
  if (a.rank() < 2) fail_shape("transpose_last2", "rank >= 2 required, got " + shape_str(a.shape()));
  Shape out_shape = a.shape();
  const std::size_t r = out_shape.size();
  std::swap(out_shape[r - 1], out_shape[r - 2]);
  const std::size_t rows = a.shape()[r - 2];
  const std::size_t cols = a.shape()[r - 1];
  const std::size_t mats = a.size() / (rows * cols);
  Tensor out = detail::make_output(out_shape);
  const auto& ad = a.node()->data;
  auto& od = out.node()->data;
  for (std::size_t m = 0; m < mats; ++m) {
    const std::size_t base = m * rows * cols;
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < cols; ++j) od[base + j * rows + i] = ad[base + i * cols + j];
  }
  if (detail::tracking({&a})) {
    detail::track_output(out, {&a});
    NodePtr an = a.node(), on = out.node();
    Tape::active()->record({an}, on, [an, on, mats, rows, cols]() {
      if (!an->requires_grad) return;
      for (std::size_t m = 0; m < mats; ++m) {
        const std::size_t base = m * rows * cols;
        for (std::size_t i = 0; i < rows; ++i)
          for (std::size_t j = 0; j < cols; ++j)
            an->grad[base + i * cols + j] += on->grad[base + j * rows + i];
      }
    });
  }
  return out;
}

/// Contiguous sub-range along one axis.
inline Tensor narrow(const Tensor& a, std::size_t axis, std::size_t start, std::size_t length) {
  const auto split = detail::split_at(a.shape(), axis, "narrow");
  if (start + length > split.extent)
    fail_shape("narrow", "range [" + std::to_string(start) + ", " + std::to_string(start + length) +
                             ") exceeds extent " + std::to_string(split.extent));
  Shape out_shape = a.shape();
  out_shape[axis] = length;
  Tensor out = detail::make_output(out_shape);
  const auto& ad = a.node()->data;
  auto& od = out.node()->data;
  for (std::size_t o = 0; o < split.outer; ++o)
    for (std::size_t e = 0; e < length; ++e)
      for (std::size_t i = 0; i < split.inner; ++i)
        od[(o * length + e) * split.inner + i] =
            ad[(o * split.extent + start + e) * split.inner + i];
  if (detail::tracking({&a})) {
    detail::track_output(out, {&a});
    NodePtr an = a.node(), on = out.node();
    Tape::active()->record({an}, on, [an, on, split, start, length]() {
      if (!an->requires_grad) return;
      for (std::size_t o = 0; o < split.outer; ++o)
        for (std::size_t e = 0; e < length; ++e)
          for (std::size_t i = 0; i < split.inner; ++i)
            an->grad[(o * split.extent + start + e) * split.inner + i] +=
                on->grad[(o * length + e) * split.inner + i];
    });
  }
  return out;
}

inline Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) fail_shape("concat", "no tensors given");
  Shape out_shape = parts[0].shape();
  if (axis >= out_shape.size()) fail_shape("concat", "axis out of range");
  std::size_t total = 0;
  for (const Tensor& p : parts) {
    if (p.rank() != out_shape.size()) fail_shape("concat", "rank mismatch");
    for (std::size_t ax = 0; ax < out_shape.size(); ++ax)
      if (ax != axis && p.shape()[ax] != out_shape[ax])
        fail_shape("concat", "shape mismatch " + shape_str(p.shape()) + " vs " +
                                 shape_str(out_shape) + " outside axis " + std::to_string(axis));
    total += p.shape()[axis];
  }
  out_shape[axis] = total;
  Tensor out = detail::make_output(out_shape);
  const auto osplit = detail::split_at(out_shape, axis, "concat");
  auto& od = out.node()->data;
  std::size_t cursor = 0;
  bool any_tracked = false;
  for (const Tensor& p : parts) {
    const std::size_t len = p.shape()[axis];
    const auto& pd = p.node()->data;
    for (std::size_t o = 0; o < osplit.outer; ++o)
      for (std::size_t e = 0; e < len; ++e)
        for (std::size_t i = 0; i < osplit.inner; ++i)
          od[(o * osplit.extent + cursor + e) * osplit.inner + i] =
              pd[(o * len + e) * osplit.inner + i];
    cursor += len;
    if (p.requires_grad()) any_tracked = true;
  }
  if (Tape::active() != nullptr && any_tracked) {
    std::vector<const Tensor*> ptrs;
    out.node()->requires_grad = true;
    out.node()->producer = Tape::active();
    out.node()->ensure_grad();
    std::vector<NodePtr> input_nodes;
    std::vector<std::size_t> lengths;
    for (const Tensor& p : parts) {
      if (p.requires_grad()) p.node()->ensure_grad();
      input_nodes.push_back(p.node());
      lengths.push_back(p.shape()[axis]);
    }
    NodePtr on = out.node();
    Tape::active()->record(input_nodes, on, [input_nodes, lengths, on, osplit]() {
      std::size_t cursor = 0;
      for (std::size_t pi = 0; pi < input_nodes.size(); ++pi) {
        const std::size_t len = lengths[pi];
        const NodePtr& pn = input_nodes[pi];
        if (pn->requires_grad) {
          for (std::size_t o = 0; o < osplit.outer; ++o)
            for (std::size_t e = 0; e < len; ++e)
              for (std::size_t i = 0; i < osplit.inner; ++i)
                pn->grad[(o * len + e) * osplit.inner + i] +=
                    on->grad[(o * osplit.extent + cursor + e) * osplit.inner + i];
        }
        cursor += len;
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Matrix multiplication with broadcasting over leading (batch) axes.
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() < 2 || b.rank() < 2)
    fail_shape("matmul", "rank >= 2 required, got " + shape_str(a.shape()) + " and " +
                             shape_str(b.shape()));
  const std::size_t m = a.shape()[a.rank() - 2];
  const std::size_t p = a.shape()[a.rank() - 1];
  const std::size_t pb = b.shape()[b.rank() - 2];
  const std::size_t r = b.shape()[b.rank() - 1];
  if (p != pb)
    fail_shape("matmul", "contraction mismatch: " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()) + " (inner " + std::to_string(p) +
                             " vs " + std::to_string(pb) + ")");
  const Shape a_lead(a.shape().begin(), a.shape().end() - 2);
  const Shape b_lead(b.shape().begin(), b.shape().end() - 2);
  const Shape lead = detail::broadcast_shape(a_lead, b_lead, "matmul");
  const auto sa = detail::broadcast_strides(a_lead, lead, "matmul");
  const auto sb = detail::broadcast_strides(b_lead, lead, "matmul");
  Shape out_shape = lead;
  out_shape.push_back(m);
  out_shape.push_back(r);
  Tensor out = detail::make_output(out_shape);
  const double* ad = a.node()->data.data();
  const double* bd = b.node()->data.data();
  double* od = out.node()->data.data();
  const std::size_t amat = m * p, bmat = p * r, omat = m * r;
  detail::for_each_bcast2(lead, sa, sb, [&](std::size_t lin, std::size_t oa, std::size_t ob) {
    const double* A = ad + oa * amat;
    const double* B = bd + ob * bmat;
    double* O = od + lin * omat;
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < r; ++j) {
        double acc = 0.0;
        for (std::size_t t = 0; t < p; ++t) acc += A[i * p + t] * B[t * r + j];
        O[i * r + j] = acc;
      }
  });
  if (detail::tracking({&a, &b})) {
    detail::track_output(out, {&a, &b});
    NodePtr an = a.node(), bn = b.node(), on = out.node();
    Tape::active()->record({an, bn}, on, [an, bn, on, lead, sa, sb, m, p, r, amat, bmat, omat]() {
      detail::for_each_bcast2(lead, sa, sb, [&](std::size_t lin, std::size_t oa, std::size_t ob) {
        const double* A = an->data.data() + oa * amat;
        const double* B = bn->data.data() + ob * bmat;
        const double* G = on->grad.data() + lin * omat;
        if (an->requires_grad) {
          double* GA = an->grad.data() + oa * amat;
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t t = 0; t < p; ++t) {
              double acc = 0.0;
              for (std::size_t j = 0; j < r; ++j) acc += G[i * r + j] * B[t * r + j];
              GA[i * p + t] += acc;
            }
        }
        if (bn->requires_grad) {
          double* GB = bn->grad.data() + ob * bmat;
          for (std::size_t t = 0; t < p; ++t)
            for (std::size_t j = 0; j < r; ++j) {
              double acc = 0.0;
              for (std::size_t i = 0; i < m; ++i) acc += G[i * r + j] * A[i * p + t];
              GB[t * r + j] += acc;
            }
        }
      });
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Softmax, row norms, layer norm.
// ---------------------------------------------------------------------------

/// Numerically stable softmax along `axis` (max-subtracted).
inline Tensor softmax(const Tensor& a, std::size_t axis) {
  const auto split = detail::split_at(a.shape(), axis, "softmax");
  Tensor out = detail::make_output(a.shape());
  const auto& ad = a.node()->data;
  auto& od = out.node()->data;
  for (std::size_t o = 0; o < split.outer; ++o)
    for (std::size_t i = 0; i < split.inner; ++i) {
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t e = 0; e < split.extent; ++e)
        mx = std::max(mx, ad[(o * split.extent + e) * split.inner + i]);
      double denom = 0.0;
      for (std::size_t e = 0; e < split.extent; ++e) {
        const std::size_t k = (o * split.extent + e) * split.inner + i;
        od[k] = std::exp(ad[k] - mx);
        denom += od[k];
      }
      for (std::size_t e = 0; e < split.extent; ++e)
        od[(o * split.extent + e) * split.inner + i] /= denom;
    }
  if (detail::tracking({&a})) {
    detail::track_output(out, {&a});
    NodePtr an = a.node(), on = out.node();
    Tape::active()->record({an}, on, [an, on, split]() {
      if (!an->requires_grad) return;
      for (std::size_t o = 0; o < split.outer; ++o)
        for (std::size_t i = 0; i < split.inner; ++i) {
          double dot = 0.0;
          for (std::size_t e = 0; e < split.extent; ++e) {
            const std::size_t k = (o * split.extent + e) * split.inner + i;
            dot += on->grad[k] * on->data[k];
          }
          for (std::size_t e = 0; e < split.extent; ++e) {
            const std::size_t k = (o * split.extent + e) * split.inner + i;
            an->grad[k] += on->data[k] * (on->grad[k] - dot);
          }
        }
    });
  }
  return out;
}

/// Euclidean norm of each row (last axis), keeping the axis with extent 1.
inline Tensor l2_norm_rows(const Tensor& a) {
  if (a.rank() < 2) fail_shape("l2_norm_rows", "rank >= 2 required, got " + shape_str(a.shape()));
  const std::size_t cols = a.shape()[a.rank() - 1];
  const std::size_t rows = a.size() / cols;
  Shape out_shape = a.shape();
  out_shape[out_shape.size() - 1] = 1;
  Tensor out = detail::make_output(out_shape);
  const auto& ad = a.node()->data;
  auto& od = out.node()->data;
  for (std::size_t rix = 0; rix < rows; ++rix) {
    double acc = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      const double v = ad[rix * cols + c];
      acc += v * v;
    }
    od[rix] = std::sqrt(acc);
  }
  if (detail::tracking({&a})) {
    detail::track_output(out, {&a});
    NodePtr an = a.node(), on = out.node();
    Tape::active()->record({an}, on, [an, on, rows, cols]() {
      if (!an->requires_grad) return;
      for (std::size_t rix = 0; rix < rows; ++rix) {
        const double norm = std::max(on->data[rix], 1e-300);
        const double g = on->grad[rix];
        for (std::size_t c = 0; c < cols; ++c)
          an->grad[rix * cols + c] += g * an->data[rix * cols + c] / norm;
      }
    });
  }
  return out;
}

/// Standardizes each last-axis slice to mean 0 / variance 1 (eps inside the
/// sqrt), then applies elementwise gain and bias.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                         double eps = 1e-5) {
  if (x.rank() < 1) fail_shape("layer_norm", "rank >= 1 required");
  const std::size_t d = x.shape()[x.rank() - 1];
  if (gain.size() != d || bias.size() != d)
    fail_shape("layer_norm", "gain/bias extent " + std::to_string(gain.size()) + "/" +
                                 std::to_string(bias.size()) + " does not match last axis " +
                                 std::to_string(d));
  const std::size_t last = x.rank() - 1;
  Tensor mu = mean(x, last, true);
  Tensor centered = sub(x, mu);
  Tensor variance = mean(mul(centered, centered), last, true);
  Tensor inv_std = div(Tensor::scalar(1.0), sqrt(add(variance, eps)));
  Tensor normalized = mul(centered, inv_std);
  return add(mul(normalized, gain), bias);
}

}  // namespace fsct
