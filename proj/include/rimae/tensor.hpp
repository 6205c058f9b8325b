#pragma once

#include <Eigen/Dense>

#include <cstring>
#include <limits>
#include <memory>
#include <numeric>
#include <utility>

#include "rimae/core.hpp"

namespace rimae {

using Shape = std::vector<Index>;

inline Index shape_numel(const Shape& s) {
  Index n = 1;
  for (Index e : s) {
    if (e <= 0) throw DimensionError("tensor extents must be positive");
    n *= e;
  }
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
  return out + "]";
}

template <class S>
class TapeT;

template <class S>
struct TensorNodeT {
  Shape shape;
  std::vector<S> value;
  std::vector<S> grad;  // empty until touched by backward
  bool requires_grad = false;

  TapeT<S>* tape = nullptr;
  std::uint64_t tape_epoch = 0;

  Index numel() const { return static_cast<Index>(value.size()); }

  void ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), S(0));
  }
};

// Define-by-run tape: ops append in execution order, so the entry list is
// already a topological order and backward is a single reverse sweep.
template <class S>
class TapeT {
 public:
  struct Entry {
    std::shared_ptr<TensorNodeT<S>> out;
    std::function<void()> backward;
  };

  void record(std::shared_ptr<TensorNodeT<S>> out, std::function<void()> fn) {
    out->tape = this;
    out->tape_epoch = epoch_;
    entries_.push_back(Entry{std::move(out), std::move(fn)});
  }

  bool empty() const { return entries_.empty(); }
  std::size_t size() const { return entries_.size(); }
  std::uint64_t epoch() const { return epoch_; }

  void clear() {
    entries_.clear();
    ++epoch_;
  }

  void run_backward() {
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
      if (!it->out->grad.empty()) it->backward();
    }
  }

 private:
  std::vector<Entry> entries_;
  std::uint64_t epoch_ = 1;
};

template <class S>
inline TapeT<S>*& active_tape_slot() {
  thread_local TapeT<S>* slot = nullptr;
  return slot;
}

template <class S>
inline TapeT<S>* active_tape() {
  return active_tape_slot<S>();
}

// Makes `tape` the recording target for the current thread.
template <class S>
class TapeScopeT {
 public:
  explicit TapeScopeT(TapeT<S>& tape) : prev_(active_tape_slot<S>()) { active_tape_slot<S>() = &tape; }
  ~TapeScopeT() { active_tape_slot<S>() = prev_; }
  TapeScopeT(const TapeScopeT&) = delete;
  TapeScopeT& operator=(const TapeScopeT&) = delete;

 private:
  TapeT<S>* prev_;
};

// Suspends recording (teacher branch, evaluation).
template <class S>
class NoGradScopeT {
 public:
  NoGradScopeT() : prev_(active_tape_slot<S>()) { active_tape_slot<S>() = nullptr; }
  ~NoGradScopeT() { active_tape_slot<S>() = prev_; }
  NoGradScopeT(const NoGradScopeT&) = delete;
  NoGradScopeT& operator=(const NoGradScopeT&) = delete;

 private:
  TapeT<S>* prev_;
};

template <class S>
class TensorT {
 public:
  using Node = TensorNodeT<S>;
  using MatrixS = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using MatMap = Eigen::Map<MatrixS>;
  using ConstMatMap = Eigen::Map<const MatrixS>;
  using ArrMap = Eigen::Map<Eigen::Array<S, Eigen::Dynamic, 1>>;
  using ConstArrMap = Eigen::Map<const Eigen::Array<S, Eigen::Dynamic, 1>>;

  TensorT() : node_(std::make_shared<Node>()) {}

  explicit TensorT(Shape shape) : node_(std::make_shared<Node>()) {
    const Index n = shape_numel(shape);
    node_->shape = std::move(shape);
    node_->value.assign(static_cast<std::size_t>(n), S(0));
  }

  TensorT(Shape shape, std::vector<S> data) : node_(std::make_shared<Node>()) {
    if (static_cast<Index>(data.size()) != shape_numel(shape))
      throw DimensionError("tensor data length does not match shape " + shape_str(shape));
    node_->shape = std::move(shape);
    node_->value = std::move(data);
  }

  static TensorT zeros(Shape shape) { return TensorT(std::move(shape)); }

  static TensorT full(Shape shape, S v) {
    TensorT t(std::move(shape));
    std::fill(t.node_->value.begin(), t.node_->value.end(), v);
    return t;
  }

  static TensorT from_matrix(const Eigen::Ref<const MatrixS>& m) {
    TensorT t({m.rows(), m.cols()});
    MatMap(t.data(), m.rows(), m.cols()) = m;
    return t;
  }

  // Leaf parameter with normal(0, std) entries.
  static TensorT param(Shape shape, Rng& rng, double stddev) {
    TensorT t(std::move(shape));
    for (auto& v : t.node_->value) v = static_cast<S>(stddev * rng.normal());
    t.node_->requires_grad = true;
    return t;
  }

  static TensorT param_zeros(Shape shape) {
    TensorT t(std::move(shape));
    t.node_->requires_grad = true;
    return t;
  }

  static TensorT param_full(Shape shape, S v) {
    TensorT t = full(std::move(shape), v);
    t.node_->requires_grad = true;
    return t;
  }

  const Shape& shape() const { return node_->shape; }
  Index rank() const { return static_cast<Index>(node_->shape.size()); }
  Index extent(Index d) const { return node_->shape.at(static_cast<std::size_t>(d)); }
  Index size() const { return node_->numel(); }
  Index rows() const { return extent(0); }
  Index cols() const { return extent(1); }

  S* data() { return node_->value.data(); }
  const S* data() const { return node_->value.data(); }
  std::vector<S>& raw() { return node_->value; }
  const std::vector<S>& raw() const { return node_->value; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool b) { node_->requires_grad = b; }

  bool has_grad() const { return !node_->grad.empty(); }
  std::vector<S>& grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  const std::vector<S>& grad_view() const {
    if (node_->grad.empty()) throw UsageError("gradient not populated; run backward first");
    return node_->grad;
  }
  void zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), S(0)); }

  S scalar() const {
    if (size() != 1) throw DimensionError("scalar() on tensor of shape " + shape_str(shape()));
    return node_->value[0];
  }

  S& at(Index r, Index c) {
    if (rank() != 2) throw DimensionError("at(r,c) requires rank 2");
    return node_->value[static_cast<std::size_t>(r * cols() + c)];
  }
  S at(Index r, Index c) const { return const_cast<TensorT*>(this)->at(r, c); }

  MatMap mat() {
    if (rank() != 2) throw DimensionError("mat() requires rank 2, got " + shape_str(shape()));
    return MatMap(data(), rows(), cols());
  }
  ConstMatMap mat() const {
    if (rank() != 2) throw DimensionError("mat() requires rank 2, got " + shape_str(shape()));
    return ConstMatMap(data(), rows(), cols());
  }
  ArrMap arr() { return ArrMap(data(), size()); }
  ConstArrMap arr() const { return ConstArrMap(data(), size()); }

  std::shared_ptr<Node> node() const { return node_; }

  bool all_finite() const {
    for (S v : node_->value)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

 private:
  std::shared_ptr<Node> node_;
};

namespace detail {

template <class S>
inline bool track(std::initializer_list<const TensorT<S>*> ins) {
  if (!active_tape<S>()) return false;
  for (const TensorT<S>* t : ins)
    if (t->requires_grad()) return true;
  return false;
}

template <class S>
inline void mark_out(TensorT<S>& out, std::function<void()> fn) {
  out.set_requires_grad(true);
  active_tape<S>()->record(out.node(), std::move(fn));
}

}  // namespace detail

// ---- elementwise ----

template <class S>
TensorT<S> add(const TensorT<S>& a, const TensorT<S>& b) {
  if (a.shape() != b.shape())
    throw DimensionError("add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  TensorT<S> out(a.shape());
  out.arr() = a.arr() + b.arr();
  if (detail::track<S>({&a, &b})) {
    auto an = a.node(), bn = b.node(), on = out.node();
    detail::mark_out(out, [an, bn, on] {
      const Index n = on->numel();
      if (an->requires_grad) {
        an->ensure_grad();
        for (Index i = 0; i < n; ++i) an->grad[i] += on->grad[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (Index i = 0; i < n; ++i) bn->grad[i] += on->grad[i];
      }
    });
  }
  return out;
}

template <class S>
TensorT<S> sub(const TensorT<S>& a, const TensorT<S>& b) {
  if (a.shape() != b.shape())
    throw DimensionError("sub: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  TensorT<S> out(a.shape());
  out.arr() = a.arr() - b.arr();
  if (detail::track<S>({&a, &b})) {
    auto an = a.node(), bn = b.node(), on = out.node();
    detail::mark_out(out, [an, bn, on] {
      const Index n = on->numel();
      if (an->requires_grad) {
        an->ensure_grad();
        for (Index i = 0; i < n; ++i) an->grad[i] += on->grad[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (Index i = 0; i < n; ++i) bn->grad[i] -= on->grad[i];
      }
    });
  }
  return out;
}

template <class S>
TensorT<S> mul(const TensorT<S>& a, const TensorT<S>& b) {
  if (a.shape() != b.shape())
    throw DimensionError("mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  TensorT<S> out(a.shape());
  out.arr() = a.arr() * b.arr();
  if (detail::track<S>({&a, &b})) {
    auto an = a.node(), bn = b.node(), on = out.node();
    detail::mark_out(out, [an, bn, on] {
      const Index n = on->numel();
      if (an->requires_grad) {
        an->ensure_grad();
        for (Index i = 0; i < n; ++i) an->grad[i] += on->grad[i] * bn->value[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (Index i = 0; i < n; ++i) bn->grad[i] += on->grad[i] * an->value[i];
      }
    });
  }
  return out;
}

template <class S>
TensorT<S> scale(const TensorT<S>& a, S c) {
  TensorT<S> out(a.shape());
  out.arr() = a.arr() * c;
  if (detail::track<S>({&a})) {
    auto an = a.node(), on = out.node();
    detail::mark_out(out, [an, on, c] {
      an->ensure_grad();
      const Index n = on->numel();
      for (Index i = 0; i < n; ++i) an->grad[i] += c * on->grad[i];
    });
  }
  return out;
}

template <class S>
TensorT<S> gelu(const TensorT<S>& x) {
  TensorT<S> out(x.shape());
  const Index n = x.size();
  const S* xv = x.data();
  S* ov = out.data();
  for (Index i = 0; i < n; ++i) {
    const double v = static_cast<double>(xv[i]);
    ov[i] = static_cast<S>(0.5 * v * (1.0 + std::erf(v / std::sqrt(2.0))));
  }
  if (detail::track<S>({&x})) {
    auto xn = x.node(), on = out.node();
    detail::mark_out(out, [xn, on] {
      xn->ensure_grad();
      const Index n2 = on->numel();
      for (Index i = 0; i < n2; ++i) {
        const double v = static_cast<double>(xn->value[i]);
        const double cdf = 0.5 * (1.0 + std::erf(v / std::sqrt(2.0)));
        const double pdf = std::exp(-0.5 * v * v) / std::sqrt(2.0 * M_PI);
        xn->grad[i] += on->grad[i] * static_cast<S>(cdf + v * pdf);
      }
    });
  }
  return out;
}

// ---- structural ----

template <class S>
TensorT<S> reshape(const TensorT<S>& x, Shape shape) {
  if (shape_numel(shape) != x.size())
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  TensorT<S> out(std::move(shape), x.raw());
  if (detail::track<S>({&x})) {
    auto xn = x.node(), on = out.node();
    detail::mark_out(out, [xn, on] {
      xn->ensure_grad();
      const Index n = on->numel();
      for (Index i = 0; i < n; ++i) xn->grad[i] += on->grad[i];
    });
  }
  return out;
}

template <class S>
TensorT<S> transpose(const TensorT<S>& x) {
  if (x.rank() != 2) throw DimensionError("transpose: rank-2 required, got " + shape_str(x.shape()));
  TensorT<S> out({x.cols(), x.rows()});
  out.mat() = x.mat().transpose();
  if (detail::track<S>({&x})) {
    auto xn = x.node(), on = out.node();
    const Index r = x.rows(), c = x.cols();
    detail::mark_out(out, [xn, on, r, c] {
      xn->ensure_grad();
      typename TensorT<S>::MatMap gx(xn->grad.data(), r, c);
      typename TensorT<S>::ConstMatMap go(on->grad.data(), c, r);
      gx += go.transpose();
    });
  }
  return out;
}

// Concatenate rank-2 tensors along axis 0 (rows) or 1 (cols).
template <class S>
TensorT<S> concat(const std::vector<TensorT<S>>& parts, int axis) {
  if (parts.empty()) throw ArgumentError("concat: empty input list");
  if (axis != 0 && axis != 1) throw ArgumentError("concat: axis must be 0 or 1");
  for (const auto& p : parts)
    if (p.rank() != 2) throw DimensionError("concat: rank-2 tensors required");
  Index rows = parts[0].rows(), cols = parts[0].cols();
  Index total = 0;
  for (const auto& p : parts) {
    if (axis == 0) {
      if (p.cols() != cols) throw DimensionError("concat axis 0: column mismatch");
      total += p.rows();
    } else {
      if (p.rows() != rows) throw DimensionError("concat axis 1: row mismatch");
      total += p.cols();
    }
  }
  TensorT<S> out(axis == 0 ? Shape{total, cols} : Shape{rows, total});
  Index off = 0;
  for (const auto& p : parts) {
    if (axis == 0) {
      out.mat().middleRows(off, p.rows()) = p.mat();
      off += p.rows();
    } else {
      out.mat().middleCols(off, p.cols()) = p.mat();
      off += p.cols();
    }
  }
  bool any = false;
  for (const auto& p : parts) any = any || p.requires_grad();
  if (active_tape<S>() && any) {
    std::vector<std::shared_ptr<TensorNodeT<S>>> pn;
    std::vector<Index> sizes;
    for (const auto& p : parts) {
      pn.push_back(p.node());
      sizes.push_back(axis == 0 ? p.rows() : p.cols());
    }
    auto on = out.node();
    const Index orows = out.rows(), ocols = out.cols();
    detail::mark_out(out, [pn, sizes, on, axis, orows, ocols] {
      typename TensorT<S>::ConstMatMap go(on->grad.data(), orows, ocols);
      Index off2 = 0;
      for (std::size_t k = 0; k < pn.size(); ++k) {
        if (pn[k]->requires_grad) {
          pn[k]->ensure_grad();
          const Index pr = pn[k]->shape[0], pc = pn[k]->shape[1];
          typename TensorT<S>::MatMap gp(pn[k]->grad.data(), pr, pc);
          if (axis == 0)
            gp += go.middleRows(off2, sizes[k]);
          else
            gp += go.middleCols(off2, sizes[k]);
        }
        off2 += sizes[k];
      }
    });
  }
  return out;
}

// Select slabs along dim 0: out[i, ...] = x[indices[i], ...].
template <class S>
TensorT<S> gather(const TensorT<S>& x, const std::vector<Index>& indices) {
  if (x.rank() < 1) throw DimensionError("gather: rank >= 1 required");
  const Index n0 = x.extent(0);
  const Index slab = x.size() / n0;
  for (Index idx : indices)
    if (idx < 0 || idx >= n0) throw ArgumentError("gather: index out of range");
  Shape os = x.shape();
  os[0] = static_cast<Index>(indices.size());
  TensorT<S> out(os);
  for (std::size_t i = 0; i < indices.size(); ++i)
    std::memcpy(out.data() + static_cast<Index>(i) * slab, x.data() + indices[i] * slab,
                static_cast<std::size_t>(slab) * sizeof(S));
  if (detail::track<S>({&x})) {
    auto xn = x.node(), on = out.node();
    detail::mark_out(out, [xn, on, indices, slab] {
      xn->ensure_grad();
      for (std::size_t i = 0; i < indices.size(); ++i)
        for (Index j = 0; j < slab; ++j)
          xn->grad[indices[i] * slab + j] += on->grad[static_cast<Index>(i) * slab + j];
    });
  }
  return out;
}

template <class S>
TensorT<S> slice_cols(const TensorT<S>& x, Index c0, Index len) {
  if (x.rank() != 2) throw DimensionError("slice_cols: rank-2 required");
  if (c0 < 0 || len <= 0 || c0 + len > x.cols()) throw ArgumentError("slice_cols: range out of bounds");
  TensorT<S> out({x.rows(), len});
  out.mat() = x.mat().middleCols(c0, len);
  if (detail::track<S>({&x})) {
    auto xn = x.node(), on = out.node();
    const Index r = x.rows(), c = x.cols();
    detail::mark_out(out, [xn, on, c0, len, r, c] {
      xn->ensure_grad();
      typename TensorT<S>::MatMap gx(xn->grad.data(), r, c);
      typename TensorT<S>::ConstMatMap go(on->grad.data(), r, len);
      gx.middleCols(c0, len) += go;
    });
  }
  return out;
}

// Repeat a [1,C] row n times.
template <class S>
TensorT<S> tile_rows(const TensorT<S>& x, Index n) {
  if (x.rank() != 2 || x.rows() != 1) throw DimensionError("tile_rows: [1,C] input required");
  if (n <= 0) throw ArgumentError("tile_rows: n must be positive");
  TensorT<S> out({n, x.cols()});
  out.mat() = x.mat().replicate(n, 1);
  if (detail::track<S>({&x})) {
    auto xn = x.node(), on = out.node();
    const Index c = x.cols();
    detail::mark_out(out, [xn, on, n, c] {
      xn->ensure_grad();
      typename TensorT<S>::ConstMatMap go(on->grad.data(), n, c);
      typename TensorT<S>::MatMap gx(xn->grad.data(), 1, c);
      gx += go.colwise().sum();
    });
  }
  return out;
}

// ---- linear algebra ----

template <class S>
TensorT<S> matmul(const TensorT<S>& a, const TensorT<S>& b) {
  if (a.rank() != 2 || b.rank() != 2)
    throw DimensionError("matmul: rank-2 required, got " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  if (a.cols() != b.rows())
    throw DimensionError("matmul: inner dimensions disagree " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  TensorT<S> out({a.rows(), b.cols()});
  out.mat().noalias() = a.mat() * b.mat();
  if (detail::track<S>({&a, &b})) {
    auto an = a.node(), bn = b.node(), on = out.node();
    const Index m = a.rows(), k = a.cols(), n = b.cols();
    detail::mark_out(out, [an, bn, on, m, k, n] {
      typename TensorT<S>::ConstMatMap go(on->grad.data(), m, n);
      if (an->requires_grad) {
        an->ensure_grad();
        typename TensorT<S>::MatMap ga(an->grad.data(), m, k);
        typename TensorT<S>::ConstMatMap bv(bn->value.data(), k, n);
        ga.noalias() += go * bv.transpose();
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        typename TensorT<S>::MatMap gb(bn->grad.data(), k, n);
        typename TensorT<S>::ConstMatMap av(an->value.data(), m, k);
        gb.noalias() += av.transpose() * go;
      }
    });
  }
  return out;
}

// x: [R,C], bias: [C] or [1,C]; broadcast over rows.
template <class S>
TensorT<S> add_rowvec(const TensorT<S>& x, const TensorT<S>& bias) {
  if (x.rank() != 2) throw DimensionError("add_rowvec: rank-2 input required");
  const Index c = x.cols();
  if (bias.size() != c) throw DimensionError("add_rowvec: bias length mismatch");
  TensorT<S> out(x.shape());
  out.mat() = x.mat().rowwise() + Eigen::Map<const Eigen::Matrix<S, 1, Eigen::Dynamic>>(bias.data(), c);
  if (detail::track<S>({&x, &bias})) {
    auto xn = x.node(), bn = bias.node(), on = out.node();
    const Index r = x.rows();
    detail::mark_out(out, [xn, bn, on, r, c] {
      typename TensorT<S>::ConstMatMap go(on->grad.data(), r, c);
      if (xn->requires_grad) {
        xn->ensure_grad();
        typename TensorT<S>::MatMap gx(xn->grad.data(), r, c);
        gx += go;
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        Eigen::Map<Eigen::Matrix<S, 1, Eigen::Dynamic>> gb(bn->grad.data(), c);
        gb += go.colwise().sum();
      }
    });
  }
  return out;
}

// ---- reductions ----

template <class S>
TensorT<S> sum(const TensorT<S>& x) {
  TensorT<S> out({1});
  out.data()[0] = x.arr().sum();
  if (detail::track<S>({&x})) {
    auto xn = x.node(), on = out.node();
    detail::mark_out(out, [xn, on] {
      xn->ensure_grad();
      const S g = on->grad[0];
      for (auto& gv : xn->grad) gv += g;
    });
  }
  return out;
}

template <class S>
TensorT<S> mean(const TensorT<S>& x) {
  TensorT<S> out({1});
  out.data()[0] = x.arr().sum() / static_cast<S>(x.size());
  if (detail::track<S>({&x})) {
    auto xn = x.node(), on = out.node();
    const S inv = S(1) / static_cast<S>(x.size());
    detail::mark_out(out, [xn, on, inv] {
      xn->ensure_grad();
      const S g = on->grad[0] * inv;
      for (auto& gv : xn->grad) gv += g;
    });
  }
  return out;
}

// Column means over rows: [R,C] -> [1,C].
template <class S>
TensorT<S> mean_rows(const TensorT<S>& x) {
  if (x.rank() != 2) throw DimensionError("mean_rows: rank-2 required");
  TensorT<S> out({1, x.cols()});
  out.mat() = x.mat().colwise().mean();
  if (detail::track<S>({&x})) {
    auto xn = x.node(), on = out.node();
    const Index r = x.rows(), c = x.cols();
    detail::mark_out(out, [xn, on, r, c] {
      xn->ensure_grad();
      typename TensorT<S>::MatMap gx(xn->grad.data(), r, c);
      typename TensorT<S>::ConstMatMap go(on->grad.data(), 1, c);
      gx.rowwise() += (go / static_cast<S>(r)).row(0);
    });
  }
  return out;
}

// Column-wise max over row groups: [G*k, C] -> [G, C]. Ties route the
// gradient to the lowest row index.
template <class S>
TensorT<S> maxpool_rows_grouped(const TensorT<S>& x, Index group) {
  if (x.rank() != 2) throw DimensionError("maxpool: rank-2 required");
  if (group <= 0 || x.rows() % group != 0) throw DimensionError("maxpool: rows not divisible by group size");
  const Index g = x.rows() / group, c = x.cols();
  TensorT<S> out({g, c});
  std::vector<Index> argmax(static_cast<std::size_t>(g * c));
  for (Index b = 0; b < g; ++b) {
    for (Index j = 0; j < c; ++j) {
      Index best = b * group;
      S bv = x.at(best, j);
      for (Index r = b * group + 1; r < (b + 1) * group; ++r) {
        const S v = x.at(r, j);
        if (v > bv) {
          bv = v;
          best = r;
        }
      }
      out.at(b, j) = bv;
      argmax[static_cast<std::size_t>(b * c + j)] = best;
    }
  }
  if (detail::track<S>({&x})) {
    auto xn = x.node(), on = out.node();
    detail::mark_out(out, [xn, on, argmax, g, c] {
      xn->ensure_grad();
      for (Index b = 0; b < g; ++b)
        for (Index j = 0; j < c; ++j)
          xn->grad[argmax[static_cast<std::size_t>(b * c + j)] * c + j] += on->grad[b * c + j];
    });
  }
  return out;
}

template <class S>
TensorT<S> maxpool_rows(const TensorT<S>& x) {
  return maxpool_rows_grouped(x, x.rows());
}

// Mean over rows of squared L2 row distance: sum((a-b)^2) / nrows.
template <class S>
TensorT<S> mse(const TensorT<S>& a, const TensorT<S>& b) {
  if (a.shape() != b.shape())
    throw DimensionError("mse: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const Index m = a.extent(0);
  TensorT<S> out({1});
  out.data()[0] = (a.arr() - b.arr()).square().sum() / static_cast<S>(m);
  if (detail::track<S>({&a, &b})) {
    auto an = a.node(), bn = b.node(), on = out.node();
    const S inv = S(2) / static_cast<S>(m);
    detail::mark_out(out, [an, bn, on, inv] {
      const S g = on->grad[0] * inv;
      const Index n = an->numel();
      if (an->requires_grad) {
        an->ensure_grad();
        for (Index i = 0; i < n; ++i) an->grad[i] += g * (an->value[i] - bn->value[i]);
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (Index i = 0; i < n; ++i) bn->grad[i] -= g * (an->value[i] - bn->value[i]);
      }
    });
  }
  return out;
}

// ---- normalization / attention pieces ----

template <class S>
TensorT<S> softmax_lastdim(const TensorT<S>& x) {
  if (x.rank() < 1 || x.extent(x.rank() - 1) < 1) throw DimensionError("softmax: last extent must be >= 1");
  for (S v : x.raw())
    if (std::isnan(static_cast<double>(v))) throw NumericError("softmax: NaN input");
  const Index c = x.extent(x.rank() - 1);
  const Index rows = x.size() / c;
  TensorT<S> out(x.shape());
  for (Index r = 0; r < rows; ++r) {
    const S* xr = x.data() + r * c;
    S* orow = out.data() + r * c;
    S mx = xr[0];
    for (Index j = 1; j < c; ++j) mx = std::max(mx, xr[j]);
    S tot = S(0);
    for (Index j = 0; j < c; ++j) {
      orow[j] = std::exp(xr[j] - mx);
      tot += orow[j];
    }
    for (Index j = 0; j < c; ++j) orow[j] /= tot;
  }
  if (detail::track<S>({&x})) {
    auto xn = x.node(), on = out.node();
    detail::mark_out(out, [xn, on, rows, c] {
      xn->ensure_grad();
      for (Index r = 0; r < rows; ++r) {
        const S* y = on->value.data() + r * c;
        const S* gy = on->grad.data() + r * c;
        S dot = S(0);
        for (Index j = 0; j < c; ++j) dot += gy[j] * y[j];
        for (Index j = 0; j < c; ++j) xn->grad[r * c + j] += y[j] * (gy[j] - dot);
      }
    });
  }
  return out;
}

template <class S>
TensorT<S> layernorm(const TensorT<S>& x, const TensorT<S>& gamma, const TensorT<S>& beta, S eps) {
  const Index c = x.extent(x.rank() - 1);
  if (gamma.size() != c || beta.size() != c) throw DimensionError("layernorm: gamma/beta must match last extent");
  const Index rows = x.size() / c;
  TensorT<S> out(x.shape());
  std::vector<S> inv_std(static_cast<std::size_t>(rows));
  std::vector<S> xhat(static_cast<std::size_t>(x.size()));
  for (Index r = 0; r < rows; ++r) {
    const S* xr = x.data() + r * c;
    S mu = S(0);
    for (Index j = 0; j < c; ++j) mu += xr[j];
    mu /= static_cast<S>(c);
    S var = S(0);
    for (Index j = 0; j < c; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<S>(c);
    const S is = S(1) / std::sqrt(var + eps);
    inv_std[static_cast<std::size_t>(r)] = is;
    for (Index j = 0; j < c; ++j) {
      const S xh = (xr[j] - mu) * is;
      xhat[static_cast<std::size_t>(r * c + j)] = xh;
      out.data()[r * c + j] = xh * gamma.data()[j] + beta.data()[j];
    }
  }
  if (detail::track<S>({&x, &gamma, &beta})) {
    auto xn = x.node(), gn = gamma.node(), bn = beta.node(), on = out.node();
    detail::mark_out(out, [xn, gn, bn, on, rows, c, inv_std, xhat] {
      for (Index r = 0; r < rows; ++r) {
        const S* gy = on->grad.data() + r * c;
        const S* xh = xhat.data() + r * c;
        if (gn->requires_grad) {
          gn->ensure_grad();
          for (Index j = 0; j < c; ++j) gn->grad[j] += gy[j] * xh[j];
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          for (Index j = 0; j < c; ++j) bn->grad[j] += gy[j];
        }
        if (xn->requires_grad) {
          xn->ensure_grad();
          S m1 = S(0), m2 = S(0);
          for (Index j = 0; j < c; ++j) {
            const S t = gy[j] * gn->value[j];
            m1 += t;
            m2 += t * xh[j];
          }
          m1 /= static_cast<S>(c);
          m2 /= static_cast<S>(c);
          const S is = inv_std[static_cast<std::size_t>(r)];
          for (Index j = 0; j < c; ++j)
            xn->grad[r * c + j] += is * (gy[j] * gn->value[j] - m1 - xh[j] * m2);
        }
      }
    });
  }
  return out;
}

// Inverted dropout; identity when p == 0 or not training.
template <class S>
TensorT<S> dropout(const TensorT<S>& x, double p, Rng& rng, bool training) {
  if (p < 0.0 || p >= 1.0) throw ArgumentError("dropout: p must be in [0,1)");
  if (!training || p == 0.0) return x;
  TensorT<S> out(x.shape());
  std::vector<S> mask(static_cast<std::size_t>(x.size()));
  const S keep = static_cast<S>(1.0 - p);
  for (Index i = 0; i < x.size(); ++i) {
    mask[static_cast<std::size_t>(i)] = rng.uniform() < p ? S(0) : S(1) / keep;
    out.data()[i] = x.data()[i] * mask[static_cast<std::size_t>(i)];
  }
  if (detail::track<S>({&x})) {
    auto xn = x.node(), on = out.node();
    detail::mark_out(out, [xn, on, mask] {
      xn->ensure_grad();
      const Index n = on->numel();
      for (Index i = 0; i < n; ++i) xn->grad[i] += on->grad[i] * mask[static_cast<std::size_t>(i)];
    });
  }
  return out;
}

// ---- fused domain ops ----

// Per-head bilinear attention bias. qb: [G,D] (tokens already multiplied by
// the query weight), rm: [G*G,D] pair embeddings (row i*G+j), D split into
// `heads` contiguous chunks. out[h,i,j] = dot(qb[i,hs], rm[i*G+j,hs]).
template <class S>
TensorT<S> ri_bias(const TensorT<S>& qb, const TensorT<S>& rm, Index heads) {
  if (qb.rank() != 2 || rm.rank() != 2) throw DimensionError("ri_bias: rank-2 inputs required");
  const Index g = qb.rows(), d = qb.cols();
  if (rm.rows() != g * g || rm.cols() != d) throw DimensionError("ri_bias: pair matrix must be [G*G,D]");
  if (heads <= 0 || d % heads != 0) throw DimensionError("ri_bias: D must divide into heads");
  const Index dk = d / heads;
  TensorT<S> out({heads, g, g});
  for (Index h = 0; h < heads; ++h)
    for (Index i = 0; i < g; ++i)
      for (Index j = 0; j < g; ++j) {
        S acc = S(0);
        const S* q = qb.data() + i * d + h * dk;
        const S* r = rm.data() + (i * g + j) * d + h * dk;
        for (Index t = 0; t < dk; ++t) acc += q[t] * r[t];
        out.data()[(h * g + i) * g + j] = acc;
      }
  if (detail::track<S>({&qb, &rm})) {
    auto qn = qb.node(), rn = rm.node(), on = out.node();
    detail::mark_out(out, [qn, rn, on, heads, g, d, dk] {
      for (Index h = 0; h < heads; ++h)
        for (Index i = 0; i < g; ++i)
          for (Index j = 0; j < g; ++j) {
            const S go = on->grad[(h * g + i) * g + j];
            if (go == S(0)) continue;
            if (qn->requires_grad) {
              qn->ensure_grad();
              for (Index t = 0; t < dk; ++t)
                qn->grad[i * d + h * dk + t] += go * rn->value[(i * g + j) * d + h * dk + t];
            }
            if (rn->requires_grad) {
              rn->ensure_grad();
              for (Index t = 0; t < dk; ++t)
                rn->grad[(i * g + j) * d + h * dk + t] += go * qn->value[i * d + h * dk + t];
            }
          }
    });
  }
  return out;
}

// Symmetric squared-L2 Chamfer between predicted and fixed target patches.
// pred: [M, K*3] rows reshape to K points; targets: M patches of K points.
template <class S>
TensorT<S> chamfer_loss(const TensorT<S>& pred, const std::vector<std::vector<std::array<S, 3>>>& targets) {
  if (pred.rank() != 2) throw DimensionError("chamfer: rank-2 prediction required");
  const Index m = pred.rows();
  if (static_cast<Index>(targets.size()) != m) throw DimensionError("chamfer: target count mismatch");
  if (m == 0) throw ArgumentError("chamfer: empty prediction");
  if (pred.cols() % 3 != 0) throw DimensionError("chamfer: columns must be K*3");
  const Index k = pred.cols() / 3;

  auto sq = [](S dx, S dy, S dz) { return dx * dx + dy * dy + dz * dz; };

  TensorT<S> out({1});
  std::vector<Index> near_pt(static_cast<std::size_t>(m * k));  // nearest target per pred point
  std::vector<Index> near_tp(static_cast<std::size_t>(m * k));  // nearest pred per target point
  S total = S(0);
  for (Index p = 0; p < m; ++p) {
    const auto& tgt = targets[static_cast<std::size_t>(p)];
    if (static_cast<Index>(tgt.size()) != k) throw DimensionError("chamfer: target patch size mismatch");
    const S* pr = pred.data() + p * k * 3;
    S fwd = S(0), bwd = S(0);
    for (Index a = 0; a < k; ++a) {
      Index best = 0;
      S bd = std::numeric_limits<S>::max();
      for (Index b = 0; b < k; ++b) {
        const S d = sq(pr[a * 3] - tgt[b][0], pr[a * 3 + 1] - tgt[b][1], pr[a * 3 + 2] - tgt[b][2]);
        if (d < bd) {
          bd = d;
          best = b;
        }
      }
      near_pt[static_cast<std::size_t>(p * k + a)] = best;
      fwd += bd;
    }
    for (Index b = 0; b < k; ++b) {
      Index best = 0;
      S bd = std::numeric_limits<S>::max();
      for (Index a = 0; a < k; ++a) {
        const S d = sq(pr[a * 3] - tgt[b][0], pr[a * 3 + 1] - tgt[b][1], pr[a * 3 + 2] - tgt[b][2]);
        if (d < bd) {
          bd = d;
          best = a;
        }
      }
      near_tp[static_cast<std::size_t>(p * k + b)] = best;
      bwd += bd;
    }
    total += (fwd + bwd) / static_cast<S>(k);
  }
  out.data()[0] = total / static_cast<S>(m);

  if (detail::track<S>({&pred})) {
    auto pn = pred.node(), on = out.node();
    detail::mark_out(out, [pn, on, targets, near_pt, near_tp, m, k] {
      pn->ensure_grad();
      const S g = on->grad[0] / (static_cast<S>(m) * static_cast<S>(k));
      for (Index p = 0; p < m; ++p) {
        const auto& tgt = targets[static_cast<std::size_t>(p)];
        for (Index a = 0; a < k; ++a) {
          const Index b = near_pt[static_cast<std::size_t>(p * k + a)];
          for (int c = 0; c < 3; ++c)
            pn->grad[(p * k + a) * 3 + c] += g * S(2) * (pn->value[(p * k + a) * 3 + c] - tgt[b][c]);
        }
        for (Index b = 0; b < k; ++b) {
          const Index a = near_tp[static_cast<std::size_t>(p * k + b)];
          for (int c = 0; c < 3; ++c)
            pn->grad[(p * k + a) * 3 + c] += g * S(2) * (pn->value[(p * k + a) * 3 + c] - tgt[b][c]);
        }
      }
    });
  }
  return out;
}

// Softmax cross-entropy over logits [B,C] with integer labels; mean over B.
template <class S>
TensorT<S> softmax_cross_entropy(const TensorT<S>& logits, const std::vector<Index>& labels) {
  if (logits.rank() != 2) throw DimensionError("cross_entropy: rank-2 logits required");
  const Index b = logits.rows(), c = logits.cols();
  if (static_cast<Index>(labels.size()) != b) throw DimensionError("cross_entropy: label count mismatch");
  for (Index y : labels)
    if (y < 0 || y >= c) throw ArgumentError("cross_entropy: label out of range");
  TensorT<S> out({1});
  std::vector<S> probs(static_cast<std::size_t>(b * c));
  S total = S(0);
  for (Index r = 0; r < b; ++r) {
    const S* x = logits.data() + r * c;
    S mx = x[0];
    for (Index j = 1; j < c; ++j) mx = std::max(mx, x[j]);
    S z = S(0);
    for (Index j = 0; j < c; ++j) {
      probs[static_cast<std::size_t>(r * c + j)] = std::exp(x[j] - mx);
      z += probs[static_cast<std::size_t>(r * c + j)];
    }
    for (Index j = 0; j < c; ++j) probs[static_cast<std::size_t>(r * c + j)] /= z;
    total -= std::log(std::max(probs[static_cast<std::size_t>(r * c + labels[r])], std::numeric_limits<S>::min()));
  }
  out.data()[0] = total / static_cast<S>(b);
  if (detail::track<S>({&logits})) {
    auto ln = logits.node(), on = out.node();
    detail::mark_out(out, [ln, on, probs, labels, b, c] {
      ln->ensure_grad();
      const S g = on->grad[0] / static_cast<S>(b);
      for (Index r = 0; r < b; ++r)
        for (Index j = 0; j < c; ++j)
          ln->grad[r * c + j] += g * (probs[static_cast<std::size_t>(r * c + j)] - (labels[r] == j ? S(1) : S(0)));
    });
  }
  return out;
}

// ---- backward driver ----

// Reverse sweep from a scalar loss. Populates grads of every requires_grad
// leaf reachable from the loss, then clears the tape; a second call without
// re-running the forward pass is a usage error.
template <class S>
void backward(const TensorT<S>& loss) {
  if (loss.size() != 1) throw UsageError("backward: loss must be scalar");
  auto node = loss.node();
  TapeT<S>* tape = node->tape;
  if (tape == nullptr) throw UsageError("backward: loss is not on a tape");
  if (node->tape_epoch != tape->epoch() || tape->empty())
    throw UsageError("backward: tape already consumed; re-run the forward pass");
  node->grad.assign(1, S(1));
  tape->run_backward();
  tape->clear();
}

// Default-scalar aliases.
using Tensor = TensorT<Real>;
using Tape = TapeT<Real>;
using TapeScope = TapeScopeT<Real>;
using NoGradScope = NoGradScopeT<Real>;

}  // namespace rimae
