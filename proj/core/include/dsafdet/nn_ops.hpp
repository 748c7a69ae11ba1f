#pragma once

#include <optional>

#include "dsafdet/tensor.hpp"

namespace dsafdet {

template <typename T>
struct ConvParams {
  Tensor<T> weight;  // [C_out, C_in/groups, kH, kW]
  Tensor<T> bias;    // [C_out] or undefined
  int stride = 1;
  int padding = 0;
  int groups = 1;

  int64_t out_channels() const { return weight.dim(0); }
  int64_t in_channels() const { return weight.dim(1) * groups; }
  int64_t kh() const { return weight.dim(2); }
  int64_t kw() const { return weight.dim(3); }

  static ConvParams make(int cin, int cout, int k, int stride, int padding, int groups,
                         bool with_bias, Rng& rng) {
    if (cin % groups != 0 || cout % groups != 0) {
      throw ConfigError("conv channels must be divisible by groups");
    }
    ConvParams p;
    p.weight = Tensor<T>::zeros({cout, cin / groups, k, k}, true);
    const double fan_in = static_cast<double>(cin / groups) * k * k;
    const double std = std::sqrt(2.0 / fan_in);
    for (auto& v : p.weight.values()) v = static_cast<T>(rng.normal(0.0, std));
    if (with_bias) p.bias = Tensor<T>::zeros({cout}, true);
    p.stride = stride;
    p.padding = padding;
    p.groups = groups;
    return p;
  }
};

template <typename T>
struct BatchNormParams {
  Tensor<T> gamma;         // learnable scale
  Tensor<T> beta;          // learnable shift
  Tensor<T> running_mean;  // buffer
  Tensor<T> running_var;   // buffer
  T eps = static_cast<T>(1e-3);
  T momentum = static_cast<T>(0.03);

  static BatchNormParams make(int channels) {
    BatchNormParams p;
    p.gamma = Tensor<T>::full({channels}, T{1}, true);
    p.beta = Tensor<T>::zeros({channels}, true);
    p.running_mean = Tensor<T>::zeros({channels});
    p.running_var = Tensor<T>::full({channels}, T{1});
    return p;
  }
};

namespace detail {

inline int64_t conv_out_dim(int64_t in, int64_t k, int pad, int stride) {
  return (in + 2 * pad - k) / stride + 1;
}

/// col[(c*kh+ky)*kw+kx, oy*Wo+ox] = x[c, oy*s-p+ky, ox*s-p+kx], zero outside.
template <typename T>
void im2col(const T* x, int64_t c_in, int64_t h, int64_t w, int64_t kh, int64_t kw, int pad,
            int stride, int64_t ho, int64_t wo, T* col) {
  for (int64_t c = 0; c < c_in; ++c) {
    const T* xc = x + c * h * w;
    for (int64_t ky = 0; ky < kh; ++ky) {
      for (int64_t kx = 0; kx < kw; ++kx) {
        T* row = col + ((c * kh + ky) * kw + kx) * ho * wo;
        for (int64_t oy = 0; oy < ho; ++oy) {
          const int64_t iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) {
            std::fill(row + oy * wo, row + (oy + 1) * wo, T{0});
            continue;
          }
          for (int64_t ox = 0; ox < wo; ++ox) {
            const int64_t ix = ox * stride - pad + kx;
            row[oy * wo + ox] = (ix >= 0 && ix < w) ? xc[iy * w + ix] : T{0};
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* col, int64_t c_in, int64_t h, int64_t w, int64_t kh, int64_t kw, int pad,
                int stride, int64_t ho, int64_t wo, T* x) {
  for (int64_t c = 0; c < c_in; ++c) {
    T* xc = x + c * h * w;
    for (int64_t ky = 0; ky < kh; ++ky) {
      for (int64_t kx = 0; kx < kw; ++kx) {
        const T* row = col + ((c * kh + ky) * kw + kx) * ho * wo;
        for (int64_t oy = 0; oy < ho; ++oy) {
          const int64_t iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) continue;
          for (int64_t ox = 0; ox < wo; ++ox) {
            const int64_t ix = ox * stride - pad + kx;
            if (ix >= 0 && ix < w) xc[iy * w + ix] += row[oy * wo + ox];
          }
        }
      }
    }
  }
}

}  // namespace detail

/// Standard 2-D convolution (im2col + gemm), zero padding, grouped.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const ConvParams<T>& p) {
  if (x.rank() != 4) throw ShapeError("conv2d expects NCHW input, got " + shape_str(x.shape()));
  const int64_t n = x.dim(0), c_in = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (c_in != p.in_channels()) {
    throw ShapeError("conv2d channel mismatch: input " + std::to_string(c_in) + " vs weight " +
                     std::to_string(p.in_channels()));
  }
  const int64_t kh = p.kh(), kw = p.kw(), c_out = p.out_channels();
  const int64_t ho = detail::conv_out_dim(h, kh, p.padding, p.stride);
  const int64_t wo = detail::conv_out_dim(w, kw, p.padding, p.stride);
  if (ho <= 0 || wo <= 0) {
    throw ShapeError("conv2d kernel does not fit input " + shape_str(x.shape()));
  }
  const int64_t groups = p.groups;
  const int64_t cg_in = c_in / groups, cg_out = c_out / groups;
  const int64_t krows = cg_in * kh * kw;
  const int64_t l = ho * wo;

  Tensor<T> out = Tensor<T>::zeros({n, c_out, ho, wo});
  std::vector<T> col(static_cast<size_t>(c_in * kh * kw * l));
  const T* wt = p.weight.data();
  const bool with_bias = p.bias.defined();
  const T* bias = with_bias ? p.bias.data() : nullptr;

  for (int64_t b = 0; b < n; ++b) {
    detail::im2col(x.data() + b * c_in * h * w, c_in, h, w, kh, kw, p.padding, p.stride, ho, wo,
                   col.data());
    for (int64_t g = 0; g < groups; ++g) {
      detail::gemm(wt + g * cg_out * krows, col.data() + g * cg_in * kh * kw * l,
                   out.data() + (b * c_out + g * cg_out) * l, cg_out, krows, l, false);
    }
    if (with_bias) {
      T* ob = out.data() + b * c_out * l;
      for (int64_t co = 0; co < c_out; ++co) {
        const T bv = bias[co];
        for (int64_t i = 0; i < l; ++i) ob[co * l + i] += bv;
      }
    }
  }
  flops::add(2 * kh * kw * cg_in * c_out * l * n);
  DSAFDET_DEBUG_CHECK_FINITE(out);

  const bool want = Tape<T>::active().recording() &&
                    (x.requires_grad() || p.weight.requires_grad() ||
                     (with_bias && p.bias.requires_grad()));
  if (want) {
    out.set_requires_grad(true);
    const int pad = p.padding, stride = p.stride;
    Tensor<T> weight = p.weight, bias_t = p.bias;
    Tape<T>::active().record([x, weight, bias_t, out, n, c_in, h, w, kh, kw, pad, stride, ho, wo,
                              groups, cg_in, cg_out, krows, l, c_out]() {
      if (!out.has_grad()) return;
      const T* og = out.grad().data();
      const T* wt = weight.data();
      std::vector<T> col(static_cast<size_t>(c_in * kh * kw * l));
      std::vector<T> dcol(x.requires_grad() ? static_cast<size_t>(c_in * kh * kw * l) : 0);
      for (int64_t b = 0; b < n; ++b) {
        const bool need_col = weight.requires_grad();
        if (need_col) {
          detail::im2col(x.data() + b * c_in * h * w, c_in, h, w, kh, kw, pad, stride, ho, wo,
                         col.data());
        }
        for (int64_t g = 0; g < groups; ++g) {
          const T* dy = og + (b * c_out + g * cg_out) * l;
          if (weight.requires_grad()) {
            detail::gemm_bt(dy, col.data() + g * cg_in * kh * kw * l,
                            weight.grad().data() + g * cg_out * krows, cg_out, l, krows, true);
          }
          if (x.requires_grad()) {
            detail::gemm_at(wt + g * cg_out * krows, dy, dcol.data() + g * cg_in * kh * kw * l,
                            krows, cg_out, l, false);
          }
        }
        if (x.requires_grad()) {
          detail::col2im_add(dcol.data(), c_in, h, w, kh, kw, pad, stride, ho, wo,
                             x.grad().data() + b * c_in * h * w);
        }
        if (bias_t.defined() && bias_t.requires_grad()) {
          T* gb = bias_t.grad().data();
          for (int64_t co = 0; co < c_out; ++co) {
            T acc{0};
            const T* dy = og + (b * c_out + co) * l;
            for (int64_t i = 0; i < l; ++i) acc += dy[i];
            gb[co] += acc;
          }
        }
      }
    });
  }
  return out;
}

/// Per-channel convolution: groups == C_in == C_out.
template <typename T>
Tensor<T> depthwise_conv2d(const Tensor<T>& x, const ConvParams<T>& p) {
  if (p.groups != p.out_channels() || p.in_channels() != p.out_channels()) {
    throw ConfigError("depthwise_conv2d requires groups == C_in == C_out");
  }
  return conv2d(x, p);
}

/// Per-pixel linear map over channels (1x1 convolution).
template <typename T>
Tensor<T> pointwise_conv2d(const Tensor<T>& x, const Tensor<T>& weight,
                           const Tensor<T>& bias = {}) {
  if (weight.rank() != 4 || weight.dim(2) != 1 || weight.dim(3) != 1) {
    throw ShapeError("pointwise_conv2d weight must be [C_out,C,1,1], got " +
                     shape_str(weight.shape()));
  }
  ConvParams<T> p;
  p.weight = weight;
  p.bias = bias;
  p.stride = 1;
  p.padding = 0;
  p.groups = 1;
  return conv2d(x, p);
}

/// Batch normalization over N,H,W per channel.
template <typename T>
Tensor<T> batchnorm2d(const Tensor<T>& x, BatchNormParams<T>& p, bool training) {
  if (x.rank() != 4) throw ShapeError("batchnorm2d expects NCHW input");
  const int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (c != p.gamma.numel()) {
    throw ShapeError("batchnorm2d channel mismatch: " + std::to_string(c) + " vs " +
                     std::to_string(p.gamma.numel()));
  }
  const int64_t m = n * h * w;
  const int64_t hw = h * w;

  auto mean = std::make_shared<std::vector<T>>(c);
  auto invstd = std::make_shared<std::vector<T>>(c);
  const T* px = x.data();

  if (training) {
    for (int64_t ci = 0; ci < c; ++ci) {
      T acc{0};
      for (int64_t b = 0; b < n; ++b) {
        const T* xc = px + (b * c + ci) * hw;
        for (int64_t i = 0; i < hw; ++i) acc += xc[i];
      }
      const T mu = acc / static_cast<T>(m);
      T var{0};
      for (int64_t b = 0; b < n; ++b) {
        const T* xc = px + (b * c + ci) * hw;
        for (int64_t i = 0; i < hw; ++i) {
          const T d = xc[i] - mu;
          var += d * d;
        }
      }
      var /= static_cast<T>(m);
      (*mean)[static_cast<size_t>(ci)] = mu;
      (*invstd)[static_cast<size_t>(ci)] = T{1} / std::sqrt(var + p.eps);
      // running stats keep the unbiased variance
      const T unbiased = m > 1 ? var * static_cast<T>(m) / static_cast<T>(m - 1) : var;
      T& rm = p.running_mean.data()[ci];
      T& rv = p.running_var.data()[ci];
      rm = (T{1} - p.momentum) * rm + p.momentum * mu;
      rv = (T{1} - p.momentum) * rv + p.momentum * unbiased;
    }
  } else {
    for (int64_t ci = 0; ci < c; ++ci) {
      (*mean)[static_cast<size_t>(ci)] = p.running_mean.data()[ci];
      (*invstd)[static_cast<size_t>(ci)] = T{1} / std::sqrt(p.running_var.data()[ci] + p.eps);
    }
  }

  Tensor<T> out = Tensor<T>::zeros(x.shape());
  T* po = out.data();
  const T* gam = p.gamma.data();
  const T* bet = p.beta.data();
  for (int64_t b = 0; b < n; ++b) {
    for (int64_t ci = 0; ci < c; ++ci) {
      const T mu = (*mean)[static_cast<size_t>(ci)];
      const T is = (*invstd)[static_cast<size_t>(ci)];
      const T g = gam[ci], be = bet[ci];
      const T* xc = px + (b * c + ci) * hw;
      T* oc = po + (b * c + ci) * hw;
      for (int64_t i = 0; i < hw; ++i) oc[i] = g * (xc[i] - mu) * is + be;
    }
  }
  flops::add(2 * x.numel());
  DSAFDET_DEBUG_CHECK_FINITE(out);

  const bool want = Tape<T>::active().recording() &&
                    (x.requires_grad() || p.gamma.requires_grad() || p.beta.requires_grad());
  if (want) {
    out.set_requires_grad(true);
    Tensor<T> gamma = p.gamma, beta = p.beta;
    Tape<T>::active().record([x, gamma, beta, out, mean, invstd, n, c, hw, m, training]() {
      if (!out.has_grad()) return;
      const T* og = out.grad().data();
      const T* px = x.data();
      const T* gam = gamma.data();
      for (int64_t ci = 0; ci < c; ++ci) {
        const T mu = (*mean)[static_cast<size_t>(ci)];
        const T is = (*invstd)[static_cast<size_t>(ci)];
        // sum_dy and sum_dy_xhat feed both the param grads and, in
        // training mode, the batch-statistics terms of dx
        T sum_dy{0}, sum_dy_xhat{0};
        for (int64_t b = 0; b < n; ++b) {
          const T* dyc = og + (b * c + ci) * hw;
          const T* xc = px + (b * c + ci) * hw;
          for (int64_t i = 0; i < hw; ++i) {
            sum_dy += dyc[i];
            sum_dy_xhat += dyc[i] * (xc[i] - mu) * is;
          }
        }
        if (gamma.requires_grad()) gamma.grad()[static_cast<size_t>(ci)] += sum_dy_xhat;
        if (beta.requires_grad()) beta.grad()[static_cast<size_t>(ci)] += sum_dy;
        if (x.requires_grad()) {
          T* gx = x.grad().data();
          const T g = gam[ci];
          for (int64_t b = 0; b < n; ++b) {
            const T* dyc = og + (b * c + ci) * hw;
            const T* xc = px + (b * c + ci) * hw;
            T* gxc = gx + (b * c + ci) * hw;
            if (training) {
              const T k1 = sum_dy / static_cast<T>(m);
              const T k2 = sum_dy_xhat / static_cast<T>(m);
              for (int64_t i = 0; i < hw; ++i) {
                const T xhat = (xc[i] - mu) * is;
                gxc[i] += g * is * (dyc[i] - k1 - xhat * k2);
              }
            } else {
              for (int64_t i = 0; i < hw; ++i) gxc[i] += g * is * dyc[i];
            }
          }
        }
      }
    });
  }
  return out;
}

enum class PoolKind { kMax, kAvg };

/// Unpadded window pooling.
template <typename T>
Tensor<T> pool2d(PoolKind kind, const Tensor<T>& x, int kernel, int stride) {
  if (x.rank() != 4) throw ShapeError("pool2d expects NCHW input");
  const int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (kernel > h || kernel > w) {
    throw ShapeError("pool2d kernel " + std::to_string(kernel) + " larger than input " +
                     shape_str(x.shape()));
  }
  const int64_t ho = (h - kernel) / stride + 1;
  const int64_t wo = (w - kernel) / stride + 1;
  Tensor<T> out = Tensor<T>::zeros({n, c, ho, wo});
  flops::add(out.numel() * kernel * kernel);

  const T* px = x.data();
  T* po = out.data();
  // first-encountered max (lowest flat index) wins ties
  std::shared_ptr<std::vector<int64_t>> arg;
  if (kind == PoolKind::kMax) {
    arg = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(out.numel()));
  }
  int64_t oi = 0;
  for (int64_t b = 0; b < n; ++b) {
    for (int64_t ci = 0; ci < c; ++ci) {
      const T* xc = px + (b * c + ci) * h * w;
      for (int64_t oy = 0; oy < ho; ++oy) {
        for (int64_t ox = 0; ox < wo; ++ox, ++oi) {
          const int64_t y0 = oy * stride, x0 = ox * stride;
          if (kind == PoolKind::kMax) {
            T best = xc[y0 * w + x0];
            int64_t besti = y0 * w + x0;
            for (int64_t ky = 0; ky < kernel; ++ky) {
              for (int64_t kx = 0; kx < kernel; ++kx) {
                const int64_t ii = (y0 + ky) * w + (x0 + kx);
                if (xc[ii] > best) {
                  best = xc[ii];
                  besti = ii;
                }
              }
            }
            po[oi] = best;
            (*arg)[static_cast<size_t>(oi)] = (b * c + ci) * h * w + besti;
          } else {
            T acc{0};
            for (int64_t ky = 0; ky < kernel; ++ky) {
              for (int64_t kx = 0; kx < kernel; ++kx) acc += xc[(y0 + ky) * w + (x0 + kx)];
            }
            po[oi] = acc / static_cast<T>(kernel * kernel);
          }
        }
      }
    }
  }
  DSAFDET_DEBUG_CHECK_FINITE(out);

  if (detail::grad_wanted<T>({x})) {
    out.set_requires_grad(true);
    const int64_t k = kernel, s = stride;
    Tape<T>::active().record([x, out, kind, arg, n, c, h, w, ho, wo, k, s]() {
      if (!out.has_grad()) return;
      const T* og = out.grad().data();
      T* gx = x.grad().data();
      if (kind == PoolKind::kMax) {
        const int64_t total = out.numel();
        for (int64_t i = 0; i < total; ++i) gx[(*arg)[static_cast<size_t>(i)]] += og[i];
      } else {
        const T inv = T{1} / static_cast<T>(k * k);
        int64_t oi = 0;
        for (int64_t b = 0; b < n; ++b) {
          for (int64_t ci = 0; ci < c; ++ci) {
            T* gxc = gx + (b * c + ci) * h * w;
            for (int64_t oy = 0; oy < ho; ++oy) {
              for (int64_t ox = 0; ox < wo; ++ox, ++oi) {
                const T g = og[oi] * inv;
                for (int64_t ky = 0; ky < k; ++ky) {
                  for (int64_t kx = 0; kx < k; ++kx) {
                    gxc[(oy * s + ky) * w + (ox * s + kx)] += g;
                  }
                }
              }
            }
          }
        }
      }
    });
  }
  return out;
}

/// Extract sliding patches: [N, C*k*k, L] with L the number of placements.
template <typename T>
Tensor<T> unfold2d(const Tensor<T>& x, int kernel, int stride) {
  if (x.rank() != 4) throw ShapeError("unfold2d expects NCHW input");
  const int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (kernel > h || kernel > w) {
    throw ShapeError("unfold2d kernel larger than input " + shape_str(x.shape()));
  }
  const int64_t ho = (h - kernel) / stride + 1;
  const int64_t wo = (w - kernel) / stride + 1;
  const int64_t l = ho * wo;
  Tensor<T> out = Tensor<T>::zeros({n, c * kernel * kernel, l});
  flops::add(out.numel());
  for (int64_t b = 0; b < n; ++b) {
    detail::im2col(x.data() + b * c * h * w, c, h, w, kernel, kernel, /*pad=*/0, stride, ho, wo,
                   out.data() + b * c * kernel * kernel * l);
  }
  if (detail::grad_wanted<T>({x})) {
    out.set_requires_grad(true);
    const int64_t k = kernel, s = stride;
    Tape<T>::active().record([x, out, n, c, h, w, ho, wo, l, k, s]() {
      if (!out.has_grad()) return;
      const T* og = out.grad().data();
      for (int64_t b = 0; b < n; ++b) {
        detail::col2im_add(og + b * c * k * k * l, c, h, w, k, k, 0, static_cast<int>(s), ho, wo,
                           x.grad().data() + b * c * h * w);
      }
    });
  }
  return out;
}

/// Nearest-neighbour 2x upsampling.
template <typename T>
Tensor<T> upsample_nearest2x(const Tensor<T>& x) {
  if (x.rank() != 4) throw ShapeError("upsample_nearest2x expects NCHW input");
  const int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  Tensor<T> out = Tensor<T>::zeros({n, c, h * 2, w * 2});
  const T* px = x.data();
  T* po = out.data();
  for (int64_t bc = 0; bc < n * c; ++bc) {
    const T* xc = px + bc * h * w;
    T* oc = po + bc * 4 * h * w;
    for (int64_t y = 0; y < h; ++y) {
      for (int64_t xx = 0; xx < w; ++xx) {
        const T v = xc[y * w + xx];
        oc[(2 * y) * 2 * w + 2 * xx] = v;
        oc[(2 * y) * 2 * w + 2 * xx + 1] = v;
        oc[(2 * y + 1) * 2 * w + 2 * xx] = v;
        oc[(2 * y + 1) * 2 * w + 2 * xx + 1] = v;
      }
    }
  }
  if (detail::grad_wanted<T>({x})) {
    out.set_requires_grad(true);
    Tape<T>::active().record([x, out, n, c, h, w]() {
      if (!out.has_grad()) return;
      const T* og = out.grad().data();
      T* gx = x.grad().data();
      for (int64_t bc = 0; bc < n * c; ++bc) {
        const T* oc = og + bc * 4 * h * w;
        T* xc = gx + bc * h * w;
        for (int64_t y = 0; y < h; ++y) {
          for (int64_t xx = 0; xx < w; ++xx) {
            xc[y * w + xx] += oc[(2 * y) * 2 * w + 2 * xx] + oc[(2 * y) * 2 * w + 2 * xx + 1] +
                              oc[(2 * y + 1) * 2 * w + 2 * xx] +
                              oc[(2 * y + 1) * 2 * w + 2 * xx + 1];
          }
        }
      }
    });
  }
  return out;
}

}  // namespace dsafdet
