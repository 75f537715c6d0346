#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "vitrm/gemm.hpp"

// Dense row-major 2-D tensors with reverse-mode automatic differentiation.
// Every operation the model needs is a free function here; each one records
// a backward closure on the thread's active tape when an input is tracked.
// Tensor values are immutable once an op has produced them; only gradients
// accumulate.

namespace vitrm {

namespace detail {

// Recycles value/grad buffers between forward passes. A training step keeps
// every activation alive until backward finishes, so without reuse each op
// output would touch fresh pages; fault-in cost dwarfs the arithmetic on
// virtualized hosts. Buffers are bucketed by exact element count, which
// recurs for the handful of shapes a model produces.
template <class Real>
class BufferPoolT {
 public:
  static BufferPoolT& instance() {
    static thread_local BufferPoolT* pool = new BufferPoolT();  // immortal
    return *pool;
  }

  std::vector<Real> acquire(std::size_t n) {
    auto it = free_.find(n);
    if (it != free_.end() && !it->second.empty()) {
      std::vector<Real> v = std::move(it->second.back());
      it->second.pop_back();
      held_ -= n;
      return v;  // contents are stale; caller decides whether to zero
    }
    return std::vector<Real>(n);
  }

  void release(std::vector<Real>&& v) {
    const std::size_t n = v.size();
    if (n < kMinPooled || held_ + n > kMaxHeld) return;
    held_ += n;
    free_[n].push_back(std::move(v));
  }

 private:
  static constexpr std::size_t kMinPooled = 1024;
  static constexpr std::size_t kMaxHeld =
      (std::size_t(3) << 30) / sizeof(Real);
  std::unordered_map<std::size_t, std::vector<std::vector<Real>>> free_;
  std::size_t held_ = 0;
};

}  // namespace detail

template <class Real>
struct TensorStoreT {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<Real> values;
  std::vector<Real> grad;  // empty until the first accumulation
  bool tracked = false;

  TensorStoreT() = default;
  TensorStoreT(const TensorStoreT&) = delete;
  TensorStoreT& operator=(const TensorStoreT&) = delete;
  ~TensorStoreT() {
    auto& pool = detail::BufferPoolT<Real>::instance();
    pool.release(std::move(values));
    pool.release(std::move(grad));
  }
};

template <class Real>
class TensorT {
 public:
  TensorT() = default;
  TensorT(std::size_t rows, std::size_t cols, bool tracked = false)
      : TensorT(rows, cols, tracked, true) {}

  static TensorT zeros(std::size_t rows, std::size_t cols,
                       bool tracked = false) {
    return TensorT(rows, cols, tracked);
  }

  // Pooled buffer without the zero pass; for op outputs that overwrite
  // every element before anyone reads them.
  static TensorT uninitialized(std::size_t rows, std::size_t cols) {
    return TensorT(rows, cols, false, false);
  }

  static TensorT full(std::size_t rows, std::size_t cols, Real value,
                      bool tracked = false) {
    TensorT t(rows, cols, tracked);
    std::fill(t.s_->values.begin(), t.s_->values.end(), value);
    return t;
  }

  static TensorT from_values(std::size_t rows, std::size_t cols,
                             std::vector<Real> values, bool tracked = false) {
    if (values.size() != rows * cols)
      throw std::invalid_argument("tensor: " + std::to_string(values.size()) +
                                  " values for shape " + std::to_string(rows) +
                                  "x" + std::to_string(cols));
    TensorT t;
    t.s_ = std::make_shared<TensorStoreT<Real>>();
    t.s_->rows = rows;
    t.s_->cols = cols;
    t.s_->values = std::move(values);
    t.s_->tracked = tracked;
    return t;
  }

  static TensorT identity(std::size_t n, bool tracked = false) {
    TensorT t(n, n, tracked);
    for (std::size_t i = 0; i < n; ++i) t.at(i, i) = Real(1);
    return t;
  }

  bool defined() const { return static_cast<bool>(s_); }
  std::size_t rows() const { return s_->rows; }
  std::size_t cols() const { return s_->cols; }
  std::size_t size() const { return s_->values.size(); }

  Real* data() { return s_->values.data(); }
  const Real* data() const { return s_->values.data(); }
  std::vector<Real>& values() { return s_->values; }
  const std::vector<Real>& values() const { return s_->values; }

  Real& at(std::size_t r, std::size_t c) {
    return s_->values[r * s_->cols + c];
  }
  Real at(std::size_t r, std::size_t c) const {
    return s_->values[r * s_->cols + c];
  }
  Real item() const {
    if (size() != 1)
      throw std::invalid_argument("tensor: item() on non-scalar " +
                                  shape_str());
    return s_->values[0];
  }

  bool tracked() const { return s_ && s_->tracked; }
  TensorT& set_tracked(bool v) {
    s_->tracked = v;
    return *this;
  }

  bool has_grad() const { return s_ && !s_->grad.empty(); }
  const std::vector<Real>& grad() const { return s_->grad; }
  Real grad_at(std::size_t r, std::size_t c) const {
    return s_->grad.empty() ? Real(0) : s_->grad[r * s_->cols + c];
  }
  Real* ensure_grad() {
    if (s_->grad.empty()) {
      s_->grad =
          detail::BufferPoolT<Real>::instance().acquire(s_->values.size());
      std::fill(s_->grad.begin(), s_->grad.end(), Real(0));
    }
    return s_->grad.data();
  }
  void zero_grad() {
    if (!s_->grad.empty())
      std::fill(s_->grad.begin(), s_->grad.end(), Real(0));
  }

  std::shared_ptr<TensorStoreT<Real>> store() const { return s_; }

  std::string shape_str() const {
    if (!s_) return "<null>";
    return std::to_string(s_->rows) + "x" + std::to_string(s_->cols);
  }

 private:
  TensorT(std::size_t rows, std::size_t cols, bool tracked, bool zeroed)
      : s_(std::make_shared<TensorStoreT<Real>>()) {
    s_->rows = rows;
    s_->cols = cols;
    s_->values = detail::BufferPoolT<Real>::instance().acquire(rows * cols);
    if (zeroed) std::fill(s_->values.begin(), s_->values.end(), Real(0));
    s_->tracked = tracked;
  }

  std::shared_ptr<TensorStoreT<Real>> s_;
};

// The tape is an ordered log of backward closures for one forward pass.
// Constructing a tape makes it the active one for the thread; destruction
// restores the previous tape. backward() replays the log in reverse and
// drops each closure right after it runs so saved activations free early.
template <class Real>
class TapeT {
 public:
  TapeT() : parent_(active_) { active_ = this; }
  ~TapeT() { active_ = parent_; }
  TapeT(const TapeT&) = delete;
  TapeT& operator=(const TapeT&) = delete;

  static TapeT* active() { return active_; }

  void record(std::function<void()> fn) { nodes_.push_back(std::move(fn)); }
  std::size_t node_count() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

  void replay_and_clear() {
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      (*it)();
      *it = nullptr;
    }
    nodes_.clear();
  }

 private:
  std::vector<std::function<void()>> nodes_;
  TapeT* parent_ = nullptr;
  inline static thread_local TapeT* active_ = nullptr;
};

namespace detail {

template <class Real>
bool recording(std::initializer_list<const TensorT<Real>*> inputs) {
  if (!TapeT<Real>::active()) return false;
  for (const auto* t : inputs)
    if (t->tracked()) return true;
  return false;
}

template <class Real>
Real* grad_buffer(const std::shared_ptr<TensorStoreT<Real>>& s) {
  if (s->grad.empty()) {
    s->grad = BufferPoolT<Real>::instance().acquire(s->values.size());
    std::fill(s->grad.begin(), s->grad.end(), Real(0));
  }
  return s->grad.data();
}

template <class Real>
std::shared_ptr<std::vector<Real>> pooled_vector(std::size_t n) {
  auto* v =
      new std::vector<Real>(BufferPoolT<Real>::instance().acquire(n));
  return std::shared_ptr<std::vector<Real>>(v, [](std::vector<Real>* p) {
    BufferPoolT<Real>::instance().release(std::move(*p));
    delete p;
  });
}

// Numerically stable in-place softmax of one row.
template <class Real>
void softmax_row(Real* row, std::size_t n) {
  Real mx = row[0];
  for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, row[i]);
  Real sum = Real(0);
  for (std::size_t i = 0; i < n; ++i) {
    row[i] = std::exp(row[i] - mx);
    sum += row[i];
  }
  const Real inv = Real(1) / sum;
  for (std::size_t i = 0; i < n; ++i) row[i] *= inv;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// core ops

template <class Real>
TensorT<Real> matmul(const TensorT<Real>& a, const TensorT<Real>& b) {
  if (a.cols() != b.rows())
    throw std::invalid_argument("matmul: inner extents disagree, " +
                                a.shape_str() + " * " + b.shape_str());
  const int m = static_cast<int>(a.rows());
  const int k = static_cast<int>(a.cols());
  const int n = static_cast<int>(b.cols());
  auto out = TensorT<Real>::uninitialized(a.rows(), b.cols());
  detail::gemm(false, false, m, n, k, Real(1), a.data(), k, b.data(), n,
               Real(0), out.data(), n);
  if (detail::recording<Real>({&a, &b})) {
    out.set_tracked(true);
    auto as = a.store(), bs = b.store(), os = out.store();
    TapeT<Real>::active()->record([as, bs, os, m, n, k] {
      if (os->grad.empty()) return;
      const Real* g = os->grad.data();
      if (as->tracked)
        detail::gemm(false, true, m, k, n, Real(1), g, n, bs->values.data(),
                     n, Real(1), detail::grad_buffer(as), k);
      if (bs->tracked)
        detail::gemm(true, false, k, n, m, Real(1), as->values.data(), k, g,
                     n, Real(1), detail::grad_buffer(bs), n);
    });
  }
  return out;
}

// Elementwise sum; b may also be a 1 x n bias row broadcast over the rows
// of a. The broadcast backward is the column sum of the upstream gradient.
template <class Real>
TensorT<Real> add(const TensorT<Real>& a, const TensorT<Real>& b) {
  const bool same = a.rows() == b.rows() && a.cols() == b.cols();
  const bool bias_row = !same && b.rows() == 1 && b.cols() == a.cols();
  if (!same && !bias_row)
    throw std::invalid_argument("add: shapes not broadcastable, " +
                                a.shape_str() + " + " + b.shape_str());
  auto out = TensorT<Real>::uninitialized(a.rows(), a.cols());
  const Real* ap = a.data();
  const Real* bp = b.data();
  Real* op = out.data();
  const std::size_t rows = a.rows(), cols = a.cols();
  if (same) {
    for (std::size_t i = 0; i < rows * cols; ++i) op[i] = ap[i] + bp[i];
  } else {
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c)
        op[r * cols + c] = ap[r * cols + c] + bp[c];
  }
  if (detail::recording<Real>({&a, &b})) {
    out.set_tracked(true);
    auto as = a.store(), bs = b.store(), os = out.store();
    TapeT<Real>::active()->record([as, bs, os, same, rows, cols] {
      if (os->grad.empty()) return;
      const Real* g = os->grad.data();
      if (as->tracked) {
        Real* ga = detail::grad_buffer(as);
        for (std::size_t i = 0; i < rows * cols; ++i) ga[i] += g[i];
      }
      if (bs->tracked) {
        Real* gb = detail::grad_buffer(bs);
        if (same) {
          for (std::size_t i = 0; i < rows * cols; ++i) gb[i] += g[i];
        } else {
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c) gb[c] += g[r * cols + c];
        }
      }
    });
  }
  return out;
}

template <class Real>
TensorT<Real> mul_elem(const TensorT<Real>& a, const TensorT<Real>& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw std::invalid_argument("mul_elem: shapes differ, " + a.shape_str() +
                                " vs " + b.shape_str());
  auto out = TensorT<Real>::uninitialized(a.rows(), a.cols());
  const Real* ap = a.data();
  const Real* bp = b.data();
  Real* op = out.data();
  for (std::size_t i = 0; i < a.size(); ++i) op[i] = ap[i] * bp[i];
  if (detail::recording<Real>({&a, &b})) {
    out.set_tracked(true);
    auto as = a.store(), bs = b.store(), os = out.store();
    TapeT<Real>::active()->record([as, bs, os] {
      if (os->grad.empty()) return;
      const Real* g = os->grad.data();
      if (as->tracked) {
        Real* ga = detail::grad_buffer(as);
        for (std::size_t i = 0; i < as->values.size(); ++i)
          ga[i] += g[i] * bs->values[i];
      }
      if (bs->tracked) {
        Real* gb = detail::grad_buffer(bs);
        for (std::size_t i = 0; i < bs->values.size(); ++i)
          gb[i] += g[i] * as->values[i];
      }
    });
  }
  return out;
}

template <class Real>
TensorT<Real> scale_by(const TensorT<Real>& a, Real factor) {
  auto out = TensorT<Real>::uninitialized(a.rows(), a.cols());
  const Real* ap = a.data();
  Real* op = out.data();
  for (std::size_t i = 0; i < a.size(); ++i) op[i] = ap[i] * factor;
  if (detail::recording<Real>({&a})) {
    out.set_tracked(true);
    auto as = a.store(), os = out.store();
    TapeT<Real>::active()->record([as, os, factor] {
      if (os->grad.empty() || !as->tracked) return;
      const Real* g = os->grad.data();
      Real* ga = detail::grad_buffer(as);
      for (std::size_t i = 0; i < as->values.size(); ++i)
        ga[i] += factor * g[i];
    });
  }
  return out;
}

template <class Real>
TensorT<Real> sum_all(const TensorT<Real>& a) {
  TensorT<Real> out(1, 1);
  Real acc = Real(0);
  const Real* ap = a.data();
  for (std::size_t i = 0; i < a.size(); ++i) acc += ap[i];
  out.data()[0] = acc;
  if (detail::recording<Real>({&a})) {
    out.set_tracked(true);
    auto as = a.store(), os = out.store();
    TapeT<Real>::active()->record([as, os] {
      if (os->grad.empty() || !as->tracked) return;
      const Real g = os->grad[0];
      Real* ga = detail::grad_buffer(as);
      for (std::size_t i = 0; i < as->values.size(); ++i) ga[i] += g;
    });
  }
  return out;
}

// Rows of all parts stacked in argument order. With batch > 1, every part
// holds `batch` stacked per-example blocks and the result interleaves them
// so each example's rows stay contiguous.
template <class Real>
TensorT<Real> concat_tokens(const std::vector<TensorT<Real>>& parts,
                            std::size_t batch = 1) {
  if (parts.empty())
    throw std::invalid_argument("concat_tokens: no parts given");
  const std::size_t cols = parts[0].cols();
  std::size_t total_rows = 0;
  for (const auto& p : parts) {
    if (p.cols() != cols)
      throw std::invalid_argument("concat_tokens: width mismatch, " +
                                  parts[0].shape_str() + " vs " +
                                  p.shape_str());
    if (p.rows() % batch != 0)
      throw std::invalid_argument(
          "concat_tokens: rows " + std::to_string(p.rows()) +
          " not divisible by batch " + std::to_string(batch));
    total_rows += p.rows();
  }
  const std::size_t out_per_ex = total_rows / batch;
  auto out = TensorT<Real>::uninitialized(total_rows, cols);
  Real* op = out.data();
  for (std::size_t e = 0; e < batch; ++e) {
    std::size_t row = e * out_per_ex;
    for (const auto& p : parts) {
      const std::size_t pn = p.rows() / batch;
      std::copy_n(p.data() + e * pn * cols, pn * cols, op + row * cols);
      row += pn;
    }
  }
  bool any_tracked = false;
  for (const auto& p : parts) any_tracked = any_tracked || p.tracked();
  if (TapeT<Real>::active() && any_tracked) {
    out.set_tracked(true);
    std::vector<std::shared_ptr<TensorStoreT<Real>>> stores;
    stores.reserve(parts.size());
    for (const auto& p : parts) stores.push_back(p.store());
    auto os = out.store();
    TapeT<Real>::active()->record([stores, os, batch, out_per_ex, cols] {
      if (os->grad.empty()) return;
      const Real* g = os->grad.data();
      for (std::size_t e = 0; e < batch; ++e) {
        std::size_t row = e * out_per_ex;
        for (const auto& s : stores) {
          const std::size_t pn = s->rows / batch;
          if (s->tracked) {
            Real* gp = detail::grad_buffer(s) + e * pn * cols;
            const Real* gs = g + row * cols;
            for (std::size_t i = 0; i < pn * cols; ++i) gp[i] += gs[i];
          }
          row += pn;
        }
      }
    });
  }
  return out;
}

// Contiguous per-example row selection [from, from + count). The backward
// pass scatters the gradient into the selected rows and leaves the rest
// untouched.
template <class Real>
TensorT<Real> slice_tokens(const TensorT<Real>& t, std::size_t from,
                           std::size_t count, std::size_t batch = 1) {
  if (batch == 0 || t.rows() % batch != 0)
    throw std::invalid_argument("slice_tokens: rows " +
                                std::to_string(t.rows()) +
                                " not divisible by batch " +
                                std::to_string(batch));
  const std::size_t per_ex = t.rows() / batch;
  if (from + count > per_ex)
    throw std::out_of_range("slice_tokens: rows [" + std::to_string(from) +
                            ", " + std::to_string(from + count) +
                            ") out of range for " + std::to_string(per_ex) +
                            " rows per example");
  const std::size_t cols = t.cols();
  auto out = TensorT<Real>::uninitialized(batch * count, cols);
  for (std::size_t e = 0; e < batch; ++e)
    std::copy_n(t.data() + (e * per_ex + from) * cols, count * cols,
                out.data() + e * count * cols);
  if (detail::recording<Real>({&t})) {
    out.set_tracked(true);
    auto ts = t.store(), os = out.store();
    TapeT<Real>::active()->record([ts, os, from, count, batch, per_ex, cols] {
      if (os->grad.empty() || !ts->tracked) return;
      const Real* g = os->grad.data();
      Real* gt = detail::grad_buffer(ts);
      for (std::size_t e = 0; e < batch; ++e) {
        Real* dst = gt + (e * per_ex + from) * cols;
        const Real* src = g + e * count * cols;
        for (std::size_t i = 0; i < count * cols; ++i) dst[i] += src[i];
      }
    });
  }
  return out;
}

// x * W^T + b with x: n x d_in, W: d_out x d_in, b: 1 x d_out.
template <class Real>
TensorT<Real> linear(const TensorT<Real>& x, const TensorT<Real>& w,
                     const TensorT<Real>& b) {
  if (x.cols() != w.cols())
    throw std::invalid_argument("linear: input width " + x.shape_str() +
                                " does not match weight " + w.shape_str());
  if (b.rows() != 1 || b.cols() != w.rows())
    throw std::invalid_argument("linear: bias " + b.shape_str() +
                                " does not match weight " + w.shape_str());
  const int n = static_cast<int>(x.rows());
  const int din = static_cast<int>(x.cols());
  const int dout = static_cast<int>(w.rows());
  auto out = TensorT<Real>::uninitialized(x.rows(), w.rows());
  detail::gemm(false, true, n, dout, din, Real(1), x.data(), din, w.data(),
               din, Real(0), out.data(), dout);
  {
    Real* op = out.data();
    const Real* bp = b.data();
    for (int r = 0; r < n; ++r)
      for (int c = 0; c < dout; ++c) op[r * dout + c] += bp[c];
  }
  if (detail::recording<Real>({&x, &w, &b})) {
    out.set_tracked(true);
    auto xs = x.store(), ws = w.store(), bs = b.store(), os = out.store();
    TapeT<Real>::active()->record([xs, ws, bs, os, n, din, dout] {
      if (os->grad.empty()) return;
      const Real* g = os->grad.data();
      if (xs->tracked)
        detail::gemm(false, false, n, din, dout, Real(1), g, dout,
                     ws->values.data(), din, Real(1), detail::grad_buffer(xs),
                     din);
      if (ws->tracked)
        detail::gemm(true, false, dout, din, n, Real(1), g, dout,
                     xs->values.data(), din, Real(1), detail::grad_buffer(ws),
                     din);
      if (bs->tracked) {
        Real* gb = detail::grad_buffer(bs);
        for (int r = 0; r < n; ++r)
          for (int c = 0; c < dout; ++c) gb[c] += g[r * dout + c];
      }
    });
  }
  return out;
}

// Per-row standardization followed by the gamma/beta affine map.
template <class Real>
TensorT<Real> layer_norm(const TensorT<Real>& x, const TensorT<Real>& gamma,
                         const TensorT<Real>& beta, Real eps = Real(1e-5)) {
  const std::size_t rows = x.rows(), d = x.cols();
  if (d < 2)
    throw std::invalid_argument("layer_norm: needs width >= 2, got " +
                                x.shape_str());
  if (gamma.rows() != 1 || gamma.cols() != d || beta.rows() != 1 ||
      beta.cols() != d)
    throw std::invalid_argument("layer_norm: affine params " +
                                gamma.shape_str() + "/" + beta.shape_str() +
                                " do not match input " + x.shape_str());
  auto out = TensorT<Real>::uninitialized(rows, d);
  auto stats = std::make_shared<std::vector<Real>>(2 * rows);  // mean, rstd
  const Real* xp = x.data();
  const Real* gp = gamma.data();
  const Real* bp = beta.data();
  Real* op = out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const Real* row = xp + r * d;
    Real mean = Real(0);
    for (std::size_t c = 0; c < d; ++c) mean += row[c];
    mean /= Real(d);
    Real var = Real(0);
    for (std::size_t c = 0; c < d; ++c) {
      const Real dv = row[c] - mean;
      var += dv * dv;
    }
    var /= Real(d);
    const Real rstd = Real(1) / std::sqrt(var + eps);
    (*stats)[2 * r] = mean;
    (*stats)[2 * r + 1] = rstd;
    for (std::size_t c = 0; c < d; ++c)
      op[r * d + c] = gp[c] * ((row[c] - mean) * rstd) + bp[c];
  }
  if (detail::recording<Real>({&x, &gamma, &beta})) {
    out.set_tracked(true);
    auto xs = x.store(), gs = gamma.store(), bs = beta.store(),
         os = out.store();
    TapeT<Real>::active()->record([xs, gs, bs, os, stats, rows, d] {
      if (os->grad.empty()) return;
      const Real* g = os->grad.data();
      const Real* xv = xs->values.data();
      const Real* gv = gs->values.data();
      Real* gx = xs->tracked ? detail::grad_buffer(xs) : nullptr;
      Real* gg = gs->tracked ? detail::grad_buffer(gs) : nullptr;
      Real* gb = bs->tracked ? detail::grad_buffer(bs) : nullptr;
      for (std::size_t r = 0; r < rows; ++r) {
        const Real mean = (*stats)[2 * r];
        const Real rstd = (*stats)[2 * r + 1];
        const Real* grow = g + r * d;
        const Real* xrow = xv + r * d;
        if (gg || gb) {
          for (std::size_t c = 0; c < d; ++c) {
            const Real xh = (xrow[c] - mean) * rstd;
            if (gg) gg[c] += grow[c] * xh;
            if (gb) gb[c] += grow[c];
          }
        }
        if (gx) {
          Real m1 = Real(0), m2 = Real(0);
          for (std::size_t c = 0; c < d; ++c) {
            const Real w = grow[c] * gv[c];
            m1 += w;
            m2 += w * (xrow[c] - mean) * rstd;
          }
          m1 /= Real(d);
          m2 /= Real(d);
          Real* gxrow = gx + r * d;
          for (std::size_t c = 0; c < d; ++c) {
            const Real xh = (xrow[c] - mean) * rstd;
            gxrow[c] += rstd * (grow[c] * gv[c] - m1 - xh * m2);
          }
        }
      }
    });
  }
  return out;
}

template <class Real>
TensorT<Real> softmax_rows(const TensorT<Real>& x) {
  const std::size_t rows = x.rows(), cols = x.cols();
  auto out = TensorT<Real>::uninitialized(rows, cols);
  std::copy_n(x.data(), x.size(), out.data());
  for (std::size_t r = 0; r < rows; ++r)
    detail::softmax_row(out.data() + r * cols, cols);
  if (detail::recording<Real>({&x})) {
    out.set_tracked(true);
    auto xs = x.store(), os = out.store();
    TapeT<Real>::active()->record([xs, os, rows, cols] {
      if (os->grad.empty() || !xs->tracked) return;
      const Real* g = os->grad.data();
      const Real* y = os->values.data();
      Real* gx = detail::grad_buffer(xs);
      for (std::size_t r = 0; r < rows; ++r) {
        const Real* grow = g + r * cols;
        const Real* yrow = y + r * cols;
        Real dot = Real(0);
        for (std::size_t c = 0; c < cols; ++c) dot += grow[c] * yrow[c];
        Real* gxrow = gx + r * cols;
        for (std::size_t c = 0; c < cols; ++c)
          gxrow[c] += yrow[c] * (grow[c] - dot);
      }
    });
  }
  return out;
}

namespace detail {
// tanh form, evaluated through the identity
// 0.5 * (1 + tanh(u)) = 1 / (1 + exp(-2u)) so the hot loops need one exp.
template <class Real>
inline Real gelu_gate(Real x) {
  const Real kAlpha = Real(0.7978845608028653558798921198687637);  // sqrt(2/pi)
  const Real kCubic = Real(0.044715);
  const Real u = kAlpha * (x + kCubic * x * x * x);
  return Real(1) / (Real(1) + std::exp(Real(-2) * u));
}
template <class Real>
inline Real gelu_value(Real x) {
  return x * gelu_gate(x);
}
template <class Real>
inline Real gelu_derivative(Real x) {
  const Real kAlpha = Real(0.7978845608028653558798921198687637);
  const Real kCubic = Real(0.044715);
  const Real s = gelu_gate(x);          // 0.5 * (1 + tanh(u))
  const Real t = Real(2) * s - Real(1);  // tanh(u)
  const Real du = kAlpha * (Real(1) + Real(3) * kCubic * x * x);
  return s + Real(0.5) * x * (Real(1) - t * t) * du;
}
}  // namespace detail

// Elementwise GELU, tanh form.
template <class Real>
TensorT<Real> gelu(const TensorT<Real>& x) {
  auto out = TensorT<Real>::uninitialized(x.rows(), x.cols());
  const Real* __restrict__ xp = x.data();
  Real* __restrict__ op = out.data();
  const std::size_t count = x.size();
  for (std::size_t i = 0; i < count; ++i)
    op[i] = detail::gelu_value(xp[i]);
  if (detail::recording<Real>({&x})) {
    out.set_tracked(true);
    auto xs = x.store(), os = out.store();
    TapeT<Real>::active()->record([xs, os] {
      if (os->grad.empty() || !xs->tracked) return;
      const Real* __restrict__ g = os->grad.data();
      const Real* __restrict__ xv = xs->values.data();
      Real* __restrict__ gx = detail::grad_buffer(xs);
      const std::size_t count = xs->values.size();
      for (std::size_t i = 0; i < count; ++i)
        gx[i] += g[i] * detail::gelu_derivative(xv[i]);
    });
  }
  return out;
}

// Mean over the batch of -sum_c target * log softmax(logits). The target is
// treated as constant data; gradients flow to the logits only.
template <class Real>
TensorT<Real> cross_entropy_soft(const TensorT<Real>& logits,
                                 const TensorT<Real>& target) {
  const std::size_t rows = logits.rows(), cols = logits.cols();
  if (target.rows() != rows || target.cols() != cols)
    throw std::invalid_argument("cross_entropy_soft: logits " +
                                logits.shape_str() + " vs target " +
                                target.shape_str());
  const Real* xp = logits.data();
  const Real* tp = target.data();
  auto lse = std::make_shared<std::vector<Real>>(rows);
  Real total = Real(0);
  for (std::size_t r = 0; r < rows; ++r) {
    const Real* row = xp + r * cols;
    const Real* trow = tp + r * cols;
    Real tsum = Real(0);
    for (std::size_t c = 0; c < cols; ++c) {
      if (trow[c] < Real(-1e-6))
        throw std::invalid_argument(
            "cross_entropy_soft: negative target weight in row " +
            std::to_string(r));
      tsum += trow[c];
    }
    if (std::abs(tsum - Real(1)) > Real(1e-4))
      throw std::invalid_argument(
          "cross_entropy_soft: target row " + std::to_string(r) +
          " sums to " + std::to_string(static_cast<double>(tsum)));
    Real mx = row[0];
    for (std::size_t c = 1; c < cols; ++c) mx = std::max(mx, row[c]);
    Real sum = Real(0);
    for (std::size_t c = 0; c < cols; ++c) sum += std::exp(row[c] - mx);
    const Real l = mx + std::log(sum);
    (*lse)[r] = l;
    Real dot = Real(0);
    for (std::size_t c = 0; c < cols; ++c) dot += trow[c] * row[c];
    total += l - dot;
  }
  TensorT<Real> out(1, 1);
  out.data()[0] = total / Real(rows);
  if (detail::recording<Real>({&logits})) {
    out.set_tracked(true);
    auto xs = logits.store(), ts = target.store(), os = out.store();
    TapeT<Real>::active()->record([xs, ts, os, lse, rows, cols] {
      if (os->grad.empty() || !xs->tracked) return;
      const Real w = os->grad[0] / Real(rows);
      const Real* xv = xs->values.data();
      const Real* tv = ts->values.data();
      Real* gx = detail::grad_buffer(xs);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c)
          gx[r * cols + c] += w * (std::exp(xv[r * cols + c] - (*lse)[r]) -
                                   tv[r * cols + c]);
    });
  }
  return out;
}

// Mean binary cross-entropy on sigmoid(p), log-sum-exp form.
template <class Real>
TensorT<Real> bce_with_logits(const TensorT<Real>& p,
                              const TensorT<Real>& target) {
  if (p.cols() != 1 || target.rows() != p.rows() || target.cols() != 1)
    throw std::invalid_argument("bce_with_logits: expected Bx1 inputs, got " +
                                p.shape_str() + " and " + target.shape_str());
  const std::size_t rows = p.rows();
  const Real* pp = p.data();
  const Real* tp = target.data();
  Real total = Real(0);
  for (std::size_t r = 0; r < rows; ++r) {
    if (tp[r] != Real(0) && tp[r] != Real(1))
      throw std::invalid_argument("bce_with_logits: target row " +
                                  std::to_string(r) + " is not binary");
    const Real v = pp[r];
    total += std::max(v, Real(0)) - v * tp[r] +
             std::log1p(std::exp(-std::abs(v)));
  }
  TensorT<Real> out(1, 1);
  out.data()[0] = total / Real(rows);
  if (detail::recording<Real>({&p})) {
    out.set_tracked(true);
    auto ps = p.store(), ts = target.store(), os = out.store();
    TapeT<Real>::active()->record([ps, ts, os, rows] {
      if (os->grad.empty() || !ps->tracked) return;
      const Real w = os->grad[0] / Real(rows);
      const Real* pv = ps->values.data();
      const Real* tv = ts->values.data();
      Real* gp = detail::grad_buffer(ps);
      for (std::size_t r = 0; r < rows; ++r) {
        const Real sig = Real(1) / (Real(1) + std::exp(-pv[r]));
        gp[r] += w * (sig - tv[r]);
      }
    });
  }
  return out;
}

// Stacks `copies` copies of t; the backward sums the per-copy gradients back
// into t. This is how per-example state is replicated from learned
// embeddings.
template <class Real>
TensorT<Real> tile_rows(const TensorT<Real>& t, std::size_t copies) {
  const std::size_t rows = t.rows(), cols = t.cols();
  auto out = TensorT<Real>::uninitialized(copies * rows, cols);
  for (std::size_t e = 0; e < copies; ++e)
    std::copy_n(t.data(), rows * cols, out.data() + e * rows * cols);
  if (detail::recording<Real>({&t})) {
    out.set_tracked(true);
    auto ts = t.store(), os = out.store();
    TapeT<Real>::active()->record([ts, os, copies, rows, cols] {
      if (os->grad.empty() || !ts->tracked) return;
      const Real* g = os->grad.data();
      Real* gt = detail::grad_buffer(ts);
      for (std::size_t e = 0; e < copies; ++e)
        for (std::size_t i = 0; i < rows * cols; ++i)
          gt[i] += g[e * rows * cols + i];
    });
  }
  return out;
}

// Scaled dot-product attention over already-projected q/k/v, per example and
// per head. Rows hold `batch` stacked examples; heads split the columns.
// Attention never crosses example boundaries.
template <class Real>
TensorT<Real> multihead_attention(const TensorT<Real>& q,
                                  const TensorT<Real>& k,
                                  const TensorT<Real>& v,
                                  std::size_t num_heads,
                                  std::size_t batch = 1) {
  const std::size_t rows = q.rows(), d = q.cols();
  if (k.rows() != rows || k.cols() != d || v.rows() != rows || v.cols() != d)
    throw std::invalid_argument("multihead_attention: q/k/v shapes differ: " +
                                q.shape_str() + ", " + k.shape_str() + ", " +
                                v.shape_str());
  if (num_heads == 0 || d % num_heads != 0)
    throw std::invalid_argument("multihead_attention: width " +
                                std::to_string(d) + " not divisible by " +
                                std::to_string(num_heads) + " heads");
  if (batch == 0 || rows % batch != 0)
    throw std::invalid_argument("multihead_attention: rows " +
                                std::to_string(rows) +
                                " not divisible by batch " +
                                std::to_string(batch));
  const std::size_t n = rows / batch;
  const std::size_t dh = d / num_heads;
  const Real scale = Real(1) / std::sqrt(static_cast<Real>(dh));
  const int ni = static_cast<int>(n);
  const int dhi = static_cast<int>(dh);
  const int di = static_cast<int>(d);

  auto out = TensorT<Real>::uninitialized(rows, d);
  const bool rec = detail::recording<Real>({&q, &k, &v});
  // Attention weights are kept only when a backward pass will need them.
  std::shared_ptr<std::vector<Real>> probs;
  std::vector<Real> scratch;
  if (rec)
    probs = detail::pooled_vector<Real>(batch * num_heads * n * n);
  else
    scratch.assign(n * n, Real(0));

  for (std::size_t e = 0; e < batch; ++e) {
    for (std::size_t h = 0; h < num_heads; ++h) {
      const std::size_t off = e * n * d + h * dh;
      Real* p = rec ? probs->data() + (e * num_heads + h) * n * n
                    : scratch.data();
      detail::gemm(false, true, ni, ni, dhi, scale, q.data() + off, di,
                   k.data() + off, di, Real(0), p, ni);
      for (std::size_t r = 0; r < n; ++r)
        detail::softmax_row(p + r * n, n);
      detail::gemm(false, false, ni, dhi, ni, Real(1), p, ni, v.data() + off,
                   di, Real(0), out.data() + off, di);
    }
  }

  if (rec) {
    out.set_tracked(true);
    auto qs = q.store(), ks = k.store(), vs = v.store(), os = out.store();
    TapeT<Real>::active()->record(
        [qs, ks, vs, os, probs, batch, num_heads, n, dh, d, scale] {
          if (os->grad.empty()) return;
          const int ni = static_cast<int>(n);
          const int dhi = static_cast<int>(dh);
          const int di = static_cast<int>(d);
          const Real* g = os->grad.data();
          Real* gq = qs->tracked ? detail::grad_buffer(qs) : nullptr;
          Real* gk = ks->tracked ? detail::grad_buffer(ks) : nullptr;
          Real* gv = vs->tracked ? detail::grad_buffer(vs) : nullptr;
          std::vector<Real> gp(n * n);
          for (std::size_t e = 0; e < batch; ++e) {
            for (std::size_t h = 0; h < num_heads; ++h) {
              const std::size_t off = e * n * d + h * dh;
              const Real* p = probs->data() + (e * num_heads + h) * n * n;
              const Real* go = g + off;
              if (gv)
                detail::gemm(true, false, ni, dhi, ni, Real(1), p, ni, go, di,
                             Real(1), gv + off, di);
              if (gq || gk) {
                // d(softmax): gS = P o (gP - rowsum(gP o P))
                detail::gemm(false, true, ni, ni, dhi, Real(1), go, di,
                             vs->values.data() + off, di, Real(0), gp.data(),
                             ni);
                for (std::size_t r = 0; r < n; ++r) {
                  Real dot = Real(0);
                  const Real* prow = p + r * n;
                  Real* gprow = gp.data() + r * n;
                  for (std::size_t c = 0; c < n; ++c)
                    dot += gprow[c] * prow[c];
                  for (std::size_t c = 0; c < n; ++c)
                    gprow[c] = prow[c] * (gprow[c] - dot);
                }
                if (gq)
                  detail::gemm(false, false, ni, dhi, ni, scale, gp.data(),
                               ni, ks->values.data() + off, di, Real(1),
                               gq + off, di);
                if (gk)
                  detail::gemm(true, false, ni, dhi, ni, scale, gp.data(), ni,
                               qs->values.data() + off, di, Real(1), gk + off,
                               di);
              }
            }
          }
        });
  }
  return out;
}

// Same values, no tape participation: gradients never flow through the
// result.
template <class Real>
TensorT<Real> detach(const TensorT<Real>& t) {
  return TensorT<Real>::from_values(t.rows(), t.cols(),
                                    std::vector<Real>(t.values()), false);
}

// Accumulates d(loss)/d(leaf) into every tracked tensor reachable from the
// loss, then consumes the active tape.
template <class Real>
void backward(const TensorT<Real>& loss) {
  auto* tape = TapeT<Real>::active();
  if (!tape) throw std::logic_error("backward: no active tape");
  if (!loss.defined() || !loss.tracked())
    throw std::logic_error("backward: loss tensor is not tracked");
  if (loss.size() != 1)
    throw std::invalid_argument("backward: loss must be a scalar, got " +
                                loss.shape_str());
  auto s = loss.store();
  detail::grad_buffer(s)[0] += Real(1);
  tape->replay_and_clear();
}

// ---------------------------------------------------------------------------
// small non-differentiable helpers

template <class Real>
std::size_t argmax_row(const TensorT<Real>& t, std::size_t row) {
  const Real* p = t.data() + row * t.cols();
  std::size_t best = 0;
  for (std::size_t c = 1; c < t.cols(); ++c)
    if (p[c] > p[best]) best = c;  // ties keep the lowest index
  return best;
}

template <class Real>
bool all_finite(const TensorT<Real>& t) {
  const Real* p = t.data();
  for (std::size_t i = 0; i < t.size(); ++i)
    if (!std::isfinite(p[i])) return false;
  return true;
}

template <class Real>
Real sigmoid_value(Real x) {
  return Real(1) / (Real(1) + std::exp(-x));
}

}  // namespace vitrm
