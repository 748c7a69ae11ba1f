#pragma once

#include <algorithm>
#include <cassert>
#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <utility>
#include <vector>

#include "dsafdet/common.hpp"
#include "dsafdet/flops.hpp"

namespace dsafdet {

/// Dense row-major tensor with an optional gradient buffer. Handle
/// semantics: copies share storage, so tape closures can capture
/// tensors cheaply and gradient accumulation is visible everywhere.
template <typename T>
class Tensor {
  struct Storage {
    Shape shape;
    std::vector<T> values;
    bool requires_grad = false;
    std::vector<T> grad;  // empty until first accumulation
  };

 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    Tensor t;
    t.d_ = std::make_shared<Storage>();
    t.d_->shape = std::move(shape);
    t.d_->values.assign(static_cast<size_t>(numel_of(t.d_->shape)), T{0});
    t.d_->requires_grad = requires_grad;
    return t;
  }

  static Tensor full(Shape shape, T value, bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    std::fill(t.d_->values.begin(), t.d_->values.end(), value);
    return t;
  }

  static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false) {
    if (numel_of(shape) != static_cast<int64_t>(values.size())) {
      throw ShapeError("tensor data length " + std::to_string(values.size()) +
                       " does not match shape " + shape_str(shape));
    }
    Tensor t;
    t.d_ = std::make_shared<Storage>();
    t.d_->shape = std::move(shape);
    t.d_->values = std::move(values);
    t.d_->requires_grad = requires_grad;
    return t;
  }

  static Tensor scalar(T v, bool requires_grad = false) {
    return from({1}, {v}, requires_grad);
  }

  bool defined() const { return static_cast<bool>(d_); }
  const Shape& shape() const { return d_->shape; }
  int rank() const { return static_cast<int>(d_->shape.size()); }
  int64_t dim(int i) const { return d_->shape[static_cast<size_t>(i)]; }
  int64_t numel() const { return static_cast<int64_t>(d_->values.size()); }

  // Shallow const: a Tensor behaves like a reference to its storage.
  T* data() const { return d_->values.data(); }
  std::vector<T>& values() const { return d_->values; }
  T item() const {
    if (numel() != 1) throw ShapeError("item() on non-scalar tensor " + shape_str(shape()));
    return d_->values[0];
  }

  template <typename... Is>
  T& at(Is... idx) const {
    const int64_t ii[] = {static_cast<int64_t>(idx)...};
    size_t n = sizeof...(idx);
    assert(n == d_->shape.size());
    int64_t flat = 0;
    for (size_t i = 0; i < n; ++i) flat = flat * d_->shape[i] + ii[i];
    return d_->values[static_cast<size_t>(flat)];
  }

  bool requires_grad() const { return d_->requires_grad; }
  const Tensor& set_requires_grad(bool rg) const {
    d_->requires_grad = rg;
    return *this;
  }

  /// Gradient buffer, allocated (zeroed) on first use.
  std::vector<T>& grad() const {
    if (d_->grad.empty()) d_->grad.assign(d_->values.size(), T{0});
    return d_->grad;
  }
  bool has_grad() const { return !d_->grad.empty(); }
  void zero_grad() const { std::fill(d_->grad.begin(), d_->grad.end(), T{0}); }
  void drop_grad() const { d_->grad.clear(); }

  /// Storage identity, for dead-parameter diagnostics and aliasing checks.
  const void* id() const { return d_.get(); }

  Tensor clone() const {
    Tensor t = from(d_->shape, d_->values, d_->requires_grad);
    return t;
  }

  bool all_finite() const {
    for (T v : d_->values) {
      if (!std::isfinite(static_cast<double>(v))) return false;
    }
    return true;
  }

 private:
  std::shared_ptr<Storage> d_;
};

#ifndef NDEBUG
#define DSAFDET_DEBUG_CHECK_FINITE(t) assert((t).all_finite() && "non-finite values after forward op")
#else
#define DSAFDET_DEBUG_CHECK_FINITE(t) ((void)0)
#endif

/// Reverse-mode tape. Append-only during forward; backward() replays the
/// recorded closures in reverse. One thread-local tape per scalar type.
template <typename T>
class Tape {
 public:
  static Tape& active() {
    static thread_local Tape tape;
    return tape;
  }

  bool recording() const { return enabled_ && pause_depth_ == 0; }
  void record(std::function<void()> backward) { nodes_.push_back(std::move(backward)); }
  size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

  /// Seeds d(loss)/d(loss) = 1 and propagates. The tape is kept; the
  /// caller clears it explicitly between steps.
  void backward(const Tensor<T>& loss) {
    if (loss.numel() != 1) {
      throw ShapeError("backward() expects a scalar loss, got " + shape_str(loss.shape()));
    }
    loss.grad()[0] += T{1};
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
  }

  class NoGradGuard {
   public:
    NoGradGuard() { ++Tape::active().pause_depth_; }
    ~NoGradGuard() { --Tape::active().pause_depth_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
  };

 private:
  std::vector<std::function<void()>> nodes_;
  bool enabled_ = true;
  int pause_depth_ = 0;
};

namespace detail {

template <typename T>
bool grad_wanted(std::initializer_list<Tensor<T>> inputs) {
  if (!Tape<T>::active().recording()) return false;
  for (const auto& t : inputs) {
    if (t.requires_grad()) return true;
  }
  return false;
}

/// Row-major strides; broadcast dims (size 1) get stride 0.
inline std::vector<int64_t> broadcast_strides(const Shape& s, const Shape& out) {
  std::vector<int64_t> st(s.size());
  int64_t acc = 1;
  for (int i = static_cast<int>(s.size()) - 1; i >= 0; --i) {
    st[static_cast<size_t>(i)] = (s[static_cast<size_t>(i)] == 1) ? 0 : acc;
    acc *= s[static_cast<size_t>(i)];
  }
  (void)out;
  return st;
}

/// Shapes broadcast if equal rank and every dim matches or is 1.
/// No implicit rank promotion.
inline Shape broadcast_shape(const Shape& a, const Shape& b) {
  if (a.size() != b.size()) {
    throw ShapeError("broadcast rank mismatch: " + shape_str(a) + " vs " + shape_str(b));
  }
  Shape out(a.size());
  for (size_t i = 0; i < a.size(); ++i) {
    if (a[i] == b[i] || a[i] == 1 || b[i] == 1) {
      out[i] = std::max(a[i], b[i]);
    } else {
      throw ShapeError("incompatible shapes: " + shape_str(a) + " vs " + shape_str(b));
    }
  }
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

namespace detail {

/// Generic broadcast binary op: fwd(a,b) -> out; dfa/dfb give the local
/// partials as functions of (a, b, out).
template <typename T, typename F, typename Da, typename Db>
Tensor<T> binary_op(const Tensor<T>& a, const Tensor<T>& b, F fwd, Da dfa, Db dfb) {
  Shape os = broadcast_shape(a.shape(), b.shape());
  Tensor<T> out = Tensor<T>::zeros(os);
  const int64_t n = out.numel();
  flops::add(n);

  const bool same = a.shape() == b.shape();
  if (same) {
    const T* pa = a.data();
    const T* pb = b.data();
    T* po = out.data();
    for (int64_t i = 0; i < n; ++i) po[i] = fwd(pa[i], pb[i]);
  } else {
    const auto sa = broadcast_strides(a.shape(), os);
    const auto sb = broadcast_strides(b.shape(), os);
    const int r = static_cast<int>(os.size());
    std::vector<int64_t> idx(os.size(), 0);
    const T* pa = a.data();
    const T* pb = b.data();
    T* po = out.data();
    int64_t ia = 0, ib = 0;
    for (int64_t i = 0; i < n; ++i) {
      po[i] = fwd(pa[ia], pb[ib]);
      for (int d = r - 1; d >= 0; --d) {
        idx[d]++;
        ia += sa[d];
        ib += sb[d];
        if (idx[d] < os[static_cast<size_t>(d)]) break;
        ia -= sa[d] * os[static_cast<size_t>(d)];
        ib -= sb[d] * os[static_cast<size_t>(d)];
        idx[d] = 0;
      }
    }
  }
  DSAFDET_DEBUG_CHECK_FINITE(out);

  if (grad_wanted<T>({a, b})) {
    out.set_requires_grad(true);
    Tape<T>::active().record([a, b, out, dfa, dfb]() {
      if (!out.has_grad()) return;
      const std::vector<T>& og = out.grad();
      const Shape& os = out.shape();
      const auto sa = broadcast_strides(a.shape(), os);
      const auto sb = broadcast_strides(b.shape(), os);
      const int r = static_cast<int>(os.size());
      std::vector<int64_t> idx(os.size(), 0);
      const T* pa = a.data();
      const T* pb = b.data();
      const T* po = out.data();
      T* ga = a.requires_grad() ? a.grad().data() : nullptr;
      T* gb = b.requires_grad() ? b.grad().data() : nullptr;
      int64_t ia = 0, ib = 0;
      const int64_t n = out.numel();
      for (int64_t i = 0; i < n; ++i) {
        if (ga) ga[ia] += og[static_cast<size_t>(i)] * dfa(pa[ia], pb[ib], po[i]);
        if (gb) gb[ib] += og[static_cast<size_t>(i)] * dfb(pa[ia], pb[ib], po[i]);
        for (int d = r - 1; d >= 0; --d) {
          idx[d]++;
          ia += sa[d];
          ib += sb[d];
          if (idx[d] < os[static_cast<size_t>(d)]) break;
          ia -= sa[d] * os[static_cast<size_t>(d)];
          ib -= sb[d] * os[static_cast<size_t>(d)];
          idx[d] = 0;
        }
      }
    });
  }
  return out;
}

template <typename T, typename F, typename D>
Tensor<T> unary_op(const Tensor<T>& x, F fwd, D dfx) {
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  const int64_t n = x.numel();
  flops::add(n);
  const T* px = x.data();
  T* po = out.data();
  for (int64_t i = 0; i < n; ++i) po[i] = fwd(px[i]);
  DSAFDET_DEBUG_CHECK_FINITE(out);

  if (grad_wanted<T>({x})) {
    out.set_requires_grad(true);
    Tape<T>::active().record([x, out, dfx]() {
      if (!out.has_grad()) return;
      const std::vector<T>& og = out.grad();
      const T* px = x.data();
      const T* po = out.data();
      T* gx = x.grad().data();
      const int64_t n = x.numel();
      for (int64_t i = 0; i < n; ++i) gx[i] += og[static_cast<size_t>(i)] * dfx(px[i], po[i]);
    });
  }
  return out;
}

}  // namespace detail

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op(
      a, b, [](T x, T y) { return x + y; }, [](T, T, T) { return T{1}; },
      [](T, T, T) { return T{1}; });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op(
      a, b, [](T x, T y) { return x - y; }, [](T, T, T) { return T{1}; },
      [](T, T, T) { return T{-1}; });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op(
      a, b, [](T x, T y) { return x * y; }, [](T, T y, T) { return y; },
      [](T x, T, T) { return x; });
}

template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& x, T s) {
  return detail::unary_op(
      x, [s](T v) { return v * s; }, [s](T, T) { return s; });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, T s) {
  return detail::unary_op(
      x, [s](T v) { return v + s; }, [](T, T) { return T{1}; });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return detail::unary_op(
      x,
      [](T v) {
        return v >= T{0} ? T{1} / (T{1} + std::exp(-v))
                         : std::exp(v) / (T{1} + std::exp(v));
      },
      [](T, T y) { return y * (T{1} - y); });
}

template <typename T>
Tensor<T> silu(const Tensor<T>& x) {
  return detail::unary_op(
      x,
      [](T v) {
        T s = v >= T{0} ? T{1} / (T{1} + std::exp(-v)) : std::exp(v) / (T{1} + std::exp(v));
        return v * s;
      },
      [](T v, T) {
        T s = v >= T{0} ? T{1} / (T{1} + std::exp(-v)) : std::exp(v) / (T{1} + std::exp(v));
        return s + v * s * (T{1} - s);
      });
}

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

namespace detail {

/// C (+)= A[M,K] * B[K,N]; ikj order so the inner loop vectorizes.
template <typename T>
void gemm(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n, bool accumulate) {
  if (!accumulate) std::fill(c, c + m * n, T{0});
  for (int64_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    T* crow = c + i * n;
    for (int64_t p = 0; p < k; ++p) {
      const T av = arow[p];
      if (av == T{0}) continue;
      const T* brow = b + p * n;
      for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

/// C (+)= A^T[M,K] * B[K,N] where A is stored [K,M].
template <typename T>
void gemm_at(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n, bool accumulate) {
  if (!accumulate) std::fill(c, c + m * n, T{0});
  for (int64_t p = 0; p < k; ++p) {
    const T* arow = a + p * m;
    const T* brow = b + p * n;
    for (int64_t i = 0; i < m; ++i) {
      const T av = arow[i];
      if (av == T{0}) continue;
      T* crow = c + i * n;
      for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

/// C (+)= A[M,K] * B^T[K,N] where B is stored [N,K].
template <typename T>
void gemm_bt(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n, bool accumulate) {
  if (!accumulate) std::fill(c, c + m * n, T{0});
  for (int64_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    T* crow = c + i * n;
    for (int64_t j = 0; j < n; ++j) {
      const T* brow = b + j * k;
      T acc{0};
      for (int64_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      crow[j] += acc;
    }
  }
}

}  // namespace detail

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2) {
    throw ShapeError("matmul expects rank-2 tensors, got " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  }
  const int64_t m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
  if (k != k2) {
    throw ShapeError("matmul inner dims disagree: " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  Tensor<T> out = Tensor<T>::zeros({m, n});
  detail::gemm(a.data(), b.data(), out.data(), m, k, n, false);
  flops::add(2 * m * k * n);
  DSAFDET_DEBUG_CHECK_FINITE(out);

  if (detail::grad_wanted<T>({a, b})) {
    out.set_requires_grad(true);
    Tape<T>::active().record([a, b, out, m, k, n]() {
      if (!out.has_grad()) return;
      const T* og = out.grad().data();
      if (a.requires_grad()) {
        // dA = dC * B^T
        detail::gemm_bt(og, b.data(), a.grad().data(), m, n, k, true);
      }
      if (b.requires_grad()) {
        // dB = A^T * dC
        detail::gemm_at(a.data(), og, b.grad().data(), k, m, n, true);
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

enum class ReduceKind { kMax, kMean, kSum };

template <typename T>
Tensor<T> reduce(ReduceKind kind, const Tensor<T>& x, int axis, bool keepdim = false) {
  if (axis < 0 || axis >= x.rank()) {
    throw ShapeError("reduce axis " + std::to_string(axis) + " out of range for " +
                     shape_str(x.shape()));
  }
  const Shape& s = x.shape();
  const int64_t axis_len = s[static_cast<size_t>(axis)];
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s[static_cast<size_t>(i)];
  for (int i = axis + 1; i < x.rank(); ++i) inner *= s[static_cast<size_t>(i)];

  Shape os;
  for (int i = 0; i < x.rank(); ++i) {
    if (i == axis) {
      if (keepdim) os.push_back(1);
    } else {
      os.push_back(s[static_cast<size_t>(i)]);
    }
  }
  if (os.empty()) os.push_back(1);

  Tensor<T> out = Tensor<T>::zeros(os);
  flops::add(x.numel());
  const T* px = x.data();
  T* po = out.data();
  // argmax (lowest flat index wins ties) kept for the max backward
  std::shared_ptr<std::vector<int64_t>> arg;
  if (kind == ReduceKind::kMax) arg = std::make_shared<std::vector<int64_t>>(outer * inner);

  for (int64_t o = 0; o < outer; ++o) {
    for (int64_t i = 0; i < inner; ++i) {
      const int64_t base = o * axis_len * inner + i;
      if (kind == ReduceKind::kMax) {
        T best = px[base];
        int64_t besta = 0;
        for (int64_t a = 1; a < axis_len; ++a) {
          T v = px[base + a * inner];
          if (v > best) {
            best = v;
            besta = a;
          }
        }
        po[o * inner + i] = best;
        (*arg)[static_cast<size_t>(o * inner + i)] = besta;
      } else {
        T acc{0};
        for (int64_t a = 0; a < axis_len; ++a) acc += px[base + a * inner];
        po[o * inner + i] = (kind == ReduceKind::kMean) ? acc / static_cast<T>(axis_len) : acc;
      }
    }
  }
  DSAFDET_DEBUG_CHECK_FINITE(out);

  if (detail::grad_wanted<T>({x})) {
    out.set_requires_grad(true);
    Tape<T>::active().record([x, out, kind, outer, inner, axis_len, arg]() {
      if (!out.has_grad()) return;
      const T* og = out.grad().data();
      T* gx = x.grad().data();
      for (int64_t o = 0; o < outer; ++o) {
        for (int64_t i = 0; i < inner; ++i) {
          const int64_t base = o * axis_len * inner + i;
          const T g = og[o * inner + i];
          switch (kind) {
            case ReduceKind::kMax:
              gx[base + (*arg)[static_cast<size_t>(o * inner + i)] * inner] += g;
              break;
            case ReduceKind::kMean:
              for (int64_t a = 0; a < axis_len; ++a)
                gx[base + a * inner] += g / static_cast<T>(axis_len);
              break;
            case ReduceKind::kSum:
              for (int64_t a = 0; a < axis_len; ++a) gx[base + a * inner] += g;
              break;
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> reduce_max(const Tensor<T>& x, int axis, bool keepdim = false) {
  return reduce(ReduceKind::kMax, x, axis, keepdim);
}
template <typename T>
Tensor<T> reduce_mean(const Tensor<T>& x, int axis, bool keepdim = false) {
  return reduce(ReduceKind::kMean, x, axis, keepdim);
}
template <typename T>
Tensor<T> reduce_sum(const Tensor<T>& x, int axis, bool keepdim = false) {
  return reduce(ReduceKind::kSum, x, axis, keepdim);
}

/// Sum of all elements, as a scalar tensor.
template <typename T>
Tensor<T> sum_all(const Tensor<T>& x) {
  Tensor<T> out = Tensor<T>::zeros({1});
  const T* px = x.data();
  T acc{0};
  const int64_t n = x.numel();
  for (int64_t i = 0; i < n; ++i) acc += px[i];
  out.data()[0] = acc;
  flops::add(n);
  if (detail::grad_wanted<T>({x})) {
    out.set_requires_grad(true);
    Tape<T>::active().record([x, out]() {
      if (!out.has_grad()) return;
      const T g = out.grad()[0];
      T* gx = x.grad().data();
      const int64_t n = x.numel();
      for (int64_t i = 0; i < n; ++i) gx[i] += g;
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape new_shape) {
  if (numel_of(new_shape) != x.numel()) {
    throw ShapeError("reshape " + shape_str(x.shape()) + " -> " + shape_str(new_shape) +
                     " changes element count");
  }
  Tensor<T> out = Tensor<T>::from(std::move(new_shape), x.values());
  if (detail::grad_wanted<T>({x})) {
    out.set_requires_grad(true);
    Tape<T>::active().record([x, out]() {
      if (!out.has_grad()) return;
      const std::vector<T>& og = out.grad();
      T* gx = x.grad().data();
      for (size_t i = 0; i < og.size(); ++i) gx[i] += og[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<int>& perm) {
  const int r = x.rank();
  if (static_cast<int>(perm.size()) != r) {
    throw ShapeError("permute spec rank mismatch for " + shape_str(x.shape()));
  }
  std::vector<bool> seen(perm.size(), false);
  for (int p : perm) {
    if (p < 0 || p >= r || seen[static_cast<size_t>(p)]) {
      throw ShapeError("invalid axis permutation");
    }
    seen[static_cast<size_t>(p)] = true;
  }
  const Shape& s = x.shape();
  Shape os(s.size());
  for (int i = 0; i < r; ++i) os[static_cast<size_t>(i)] = s[static_cast<size_t>(perm[i])];

  std::vector<int64_t> in_strides(s.size()), out_src_stride(s.size());
  int64_t acc = 1;
  for (int i = r - 1; i >= 0; --i) {
    in_strides[static_cast<size_t>(i)] = acc;
    acc *= s[static_cast<size_t>(i)];
  }
  for (int i = 0; i < r; ++i) {
    out_src_stride[static_cast<size_t>(i)] = in_strides[static_cast<size_t>(perm[i])];
  }

  Tensor<T> out = Tensor<T>::zeros(os);
  const T* px = x.data();
  T* po = out.data();
  std::vector<int64_t> idx(s.size(), 0);
  int64_t src = 0;
  const int64_t n = x.numel();
  for (int64_t i = 0; i < n; ++i) {
    po[i] = px[src];
    for (int d = r - 1; d >= 0; --d) {
      idx[static_cast<size_t>(d)]++;
      src += out_src_stride[static_cast<size_t>(d)];
      if (idx[static_cast<size_t>(d)] < os[static_cast<size_t>(d)]) break;
      src -= out_src_stride[static_cast<size_t>(d)] * os[static_cast<size_t>(d)];
      idx[static_cast<size_t>(d)] = 0;
    }
  }

  if (detail::grad_wanted<T>({x})) {
    out.set_requires_grad(true);
    Tape<T>::active().record([x, out, os, out_src_stride, r]() {
      if (!out.has_grad()) return;
      const T* og = out.grad().data();
      T* gx = x.grad().data();
      std::vector<int64_t> idx(os.size(), 0);
      int64_t src = 0;
      const int64_t n = out.numel();
      for (int64_t i = 0; i < n; ++i) {
        gx[src] += og[i];
        for (int d = r - 1; d >= 0; --d) {
          idx[static_cast<size_t>(d)]++;
          src += out_src_stride[static_cast<size_t>(d)];
          if (idx[static_cast<size_t>(d)] < os[static_cast<size_t>(d)]) break;
          src -= out_src_stride[static_cast<size_t>(d)] * os[static_cast<size_t>(d)];
          idx[static_cast<size_t>(d)] = 0;
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& xs, int axis) {
  if (xs.empty()) throw ShapeError("concat of empty list");
  const int r = xs[0].rank();
  if (axis < 0 || axis >= r) throw ShapeError("concat axis out of range");
  Shape os = xs[0].shape();
  int64_t axis_total = 0;
  for (const auto& t : xs) {
    if (t.rank() != r) throw ShapeError("concat rank mismatch");
    for (int i = 0; i < r; ++i) {
      if (i != axis && t.dim(i) != os[static_cast<size_t>(i)]) {
        throw ShapeError("concat non-axis dim mismatch: " + shape_str(t.shape()) + " vs " +
                         shape_str(xs[0].shape()));
      }
    }
    axis_total += t.dim(axis);
  }
  os[static_cast<size_t>(axis)] = axis_total;

  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= os[static_cast<size_t>(i)];
  for (int i = axis + 1; i < r; ++i) inner *= os[static_cast<size_t>(i)];

  Tensor<T> out = Tensor<T>::zeros(os);
  T* po = out.data();
  int64_t offset = 0;
  for (const auto& t : xs) {
    const int64_t alen = t.dim(axis);
    const T* pt = t.data();
    for (int64_t o = 0; o < outer; ++o) {
      std::copy(pt + o * alen * inner, pt + (o + 1) * alen * inner,
                po + (o * axis_total + offset) * inner);
    }
    offset += alen;
  }

  bool want = false;
  for (const auto& t : xs) want = want || t.requires_grad();
  if (Tape<T>::active().recording() && want) {
    out.set_requires_grad(true);
    Tape<T>::active().record([xs, out, outer, inner, axis_total, axis]() {
      if (!out.has_grad()) return;
      const T* og = out.grad().data();
      int64_t offset = 0;
      for (const auto& t : xs) {
        const int64_t alen = t.dim(axis);
        if (t.requires_grad()) {
          T* gt = t.grad().data();
          for (int64_t o = 0; o < outer; ++o) {
            const T* src = og + (o * axis_total + offset) * inner;
            T* dst = gt + o * alen * inner;
            for (int64_t i = 0; i < alen * inner; ++i) dst[i] += src[i];
          }
        }
        offset += alen;
      }
    });
  }
  return out;
}

template <typename T>
std::vector<Tensor<T>> split(const Tensor<T>& x, int parts, int axis) {
  if (axis < 0 || axis >= x.rank()) throw ShapeError("split axis out of range");
  const int64_t alen = x.dim(axis);
  if (parts <= 0 || alen % parts != 0) {
    throw ShapeError("split: axis length " + std::to_string(alen) + " not divisible into " +
                     std::to_string(parts) + " parts");
  }
  const int64_t plen = alen / parts;
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= x.dim(i);
  for (int i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);

  std::vector<Tensor<T>> outs;
  const T* px = x.data();
  for (int p = 0; p < parts; ++p) {
    Shape os = x.shape();
    os[static_cast<size_t>(axis)] = plen;
    Tensor<T> o = Tensor<T>::zeros(os);
    T* po = o.data();
    for (int64_t ot = 0; ot < outer; ++ot) {
      const T* src = px + (ot * alen + p * plen) * inner;
      std::copy(src, src + plen * inner, po + ot * plen * inner);
    }
    if (detail::grad_wanted<T>({x})) {
      o.set_requires_grad(true);
      Tape<T>::active().record([x, o, p, plen, inner, outer, alen]() {
        if (!o.has_grad()) return;
        const T* og = o.grad().data();
        T* gx = x.grad().data();
        for (int64_t ot = 0; ot < outer; ++ot) {
          T* dst = gx + (ot * alen + p * plen) * inner;
          const T* src = og + ot * plen * inner;
          for (int64_t i = 0; i < plen * inner; ++i) dst[i] += src[i];
        }
      });
    }
    outs.push_back(std::move(o));
  }
  return outs;
}

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

}  // namespace dsafdet
