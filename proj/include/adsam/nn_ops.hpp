#pragma once

#include <cmath>
#include <numbers>
#include <numeric>
#include <optional>
#include <vector>

#include "adsam/kernels.hpp"
#include "adsam/ops.hpp"
#include "adsam/random.hpp"

namespace adsam {

// Spatial output extent of a convolution; nullopt when not integral.
inline std::optional<std::size_t> conv_output_extent(std::size_t in, std::size_t kernel, std::size_t stride,
                                                     std::size_t padding) {
  const auto padded = in + 2 * padding;
  if (stride == 0 || padded < kernel || (padded - kernel) % stride != 0) return std::nullopt;
  return (padded - kernel) / stride + 1;
}

inline Shape conv2d_output_shape(const Shape& x, const Shape& w, std::size_t stride, std::size_t padding) {
  detail::require(x.size() == 4 && w.size() == 4, "conv2d: expected 4-D input and weight");
  detail::require(x[1] == w[1], "conv2d: channel mismatch, input has " + std::to_string(x[1]) +
                                    " channels, weight expects " + std::to_string(w[1]));
  detail::require(w[2] % 2 == 1 && w[3] % 2 == 1, "conv2d: kernel extents must be odd");
  const auto oh = conv_output_extent(x[2], w[2], stride, padding);
  const auto ow = conv_output_extent(x[3], w[3], stride, padding);
  detail::require(oh && ow, "conv2d: non-integral output extent for input " + shape_str(x) + ", kernel " +
                                shape_str(w) + ", stride " + std::to_string(stride));
  return {x[0], w[0], *oh, *ow};
}

// Zero-padded cross-correlation. `bias` may be an undefined tensor.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias, std::size_t stride = 1,
                 std::size_t padding = 0) {
  const Shape out_shape = conv2d_output_shape(x.shape(), w.shape(), stride, padding);
  const bool has_bias = bias.defined();
  if (has_bias) {
    detail::require(bias.rank() == 1 && bias.dim(0) == w.dim(0), "conv2d: bias must have Cout entries");
  }
  const detail::ConvGeometry geo{x.dim(0), x.dim(1), x.dim(2),     x.dim(3), w.dim(0), w.dim(2),
                                 w.dim(3), out_shape[2], out_shape[3], stride, padding};
  const std::size_t taps = geo.taps(), area = geo.out_area();
  const std::size_t in_plane = geo.cin * geo.h * geo.w, out_plane = geo.cout * area;

  std::vector<T> out(shape_numel(out_shape), T(0));
  {
    const T* xv = x.data().data();
    const T* wv = w.data().data();
    std::vector<T> cols(geo.pointwise() ? 0 : taps * area);
    for (std::size_t b = 0; b < geo.batch; ++b) {
      T* ob = out.data() + b * out_plane;
      if (has_bias)
        for (std::size_t co = 0; co < geo.cout; ++co) std::fill(ob + co * area, ob + (co + 1) * area, bias.data()[co]);
      const T* src = xv + b * in_plane;
      if (!geo.pointwise()) {
        detail::im2col(geo, src, cols.data());
        src = cols.data();
      }
      detail::gemm_acc(geo.cout, area, taps, wv, taps, 1, src, area, ob, area);
    }
  }

  std::vector<Tensor<T>> inputs{x, w};
  if (has_bias) inputs.push_back(bias);
  return detail::make_result<T>("conv2d", out_shape, std::move(out), inputs, [geo, has_bias](detail::Node<T>& self) {
    const auto& xv = self.inputs[0]->data;
    const auto& wv = self.inputs[1]->data;
    const auto& g = self.grad;
    const std::size_t taps = geo.taps(), area = geo.out_area();
    const std::size_t in_plane = geo.cin * geo.h * geo.w, out_plane = geo.cout * area;
    auto* gx = detail::grad_sink(self, 0);
    auto* gw = detail::grad_sink(self, 1);
    if (has_bias) {
      if (auto* gb = detail::grad_sink(self, 2)) {
        for (std::size_t b = 0; b < geo.batch; ++b)
          for (std::size_t co = 0; co < geo.cout; ++co) {
            const T* row = g.data() + b * out_plane + co * area;
            (*gb)[co] += std::accumulate(row, row + area, T(0));
          }
      }
    }
    if (!gx && !gw) return;
    std::vector<T> cols(geo.pointwise() ? 0 : taps * area);
    std::vector<T> gcols(geo.pointwise() ? 0 : taps * area);
    for (std::size_t b = 0; b < geo.batch; ++b) {
      const T* gb = g.data() + b * out_plane;
      if (gw) {
        const T* src = xv.data() + b * in_plane;
        if (!geo.pointwise()) {
          detail::im2col(geo, src, cols.data());
          src = cols.data();
        }
        detail::gemm_nt_acc(geo.cout, taps, area, gb, area, src, area, gw->data(), taps);
      }
      if (gx) {
        T* dst = gx->data() + b * in_plane;
        if (geo.pointwise()) {
          detail::gemm_acc(taps, area, geo.cout, wv.data(), 1, taps, gb, area, dst, area);
        } else {
          std::fill(gcols.begin(), gcols.end(), T(0));
          detail::gemm_acc(taps, area, geo.cout, wv.data(), 1, taps, gb, area, gcols.data(), area);
          detail::col2im_acc(geo, gcols.data(), dst);
        }
      }
    }
  });
}

// Group normalization with biased per-group variance and per-channel affine.
template <typename T>
Tensor<T> group_norm(const Tensor<T>& x, std::size_t groups, const Tensor<T>& gamma, const Tensor<T>& beta,
                     T eps = T(1e-5)) {
  detail::require(x.rank() == 4, "group_norm: expected B x C x H x W");
  const std::size_t batch = x.dim(0), channels = x.dim(1), area = x.dim(2) * x.dim(3);
  detail::require(groups >= 1 && channels % groups == 0,
                  "group_norm: " + std::to_string(groups) + " groups do not divide " + std::to_string(channels) +
                      " channels");
  detail::require(gamma.numel() == channels && beta.numel() == channels, "group_norm: affine size mismatch");
  detail::require(eps > T(0), "group_norm: eps must be positive");
  const std::size_t per_group = channels / groups;
  const std::size_t count = per_group * area;

  std::vector<T> xhat(x.numel());
  std::vector<T> rstd(batch * groups);
  std::vector<T> out(x.numel());
  const auto xv = x.data();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t grp = 0; grp < groups; ++grp) {
      const std::size_t base = (b * channels + grp * per_group) * area;
      T mu = 0;
      for (std::size_t i = 0; i < count; ++i) mu += xv[base + i];
      mu /= static_cast<T>(count);
      T var = 0;
      for (std::size_t i = 0; i < count; ++i) var += (xv[base + i] - mu) * (xv[base + i] - mu);
      var /= static_cast<T>(count);
      const T r = T(1) / std::sqrt(var + eps);
      rstd[b * groups + grp] = r;
      for (std::size_t i = 0; i < count; ++i) {
        const std::size_t c = grp * per_group + i / area;
        xhat[base + i] = (xv[base + i] - mu) * r;
        out[base + i] = gamma.data()[c] * xhat[base + i] + beta.data()[c];
      }
    }

  return detail::make_result<T>(
      "group_norm", x.shape(), std::move(out), {&x, &gamma, &beta},
      [batch, channels, area, groups, per_group, count, xhat = std::move(xhat),
       rstd = std::move(rstd)](detail::Node<T>& self) {
        const auto& g = self.grad;
        const auto& gamma_v = self.inputs[1]->data;
        if (auto* gg = detail::grad_sink(self, 1)) {
          for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t c = 0; c < channels; ++c)
              for (std::size_t i = 0; i < area; ++i) {
                const std::size_t at = (b * channels + c) * area + i;
                (*gg)[c] += g[at] * xhat[at];
              }
        }
        if (auto* gb = detail::grad_sink(self, 2)) {
          for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t c = 0; c < channels; ++c)
              for (std::size_t i = 0; i < area; ++i) (*gb)[c] += g[(b * channels + c) * area + i];
        }
        auto* gx = detail::grad_sink(self, 0);
        if (!gx) return;
        for (std::size_t b = 0; b < batch; ++b)
          for (std::size_t grp = 0; grp < groups; ++grp) {
            const std::size_t base = (b * channels + grp * per_group) * area;
            T mean_d = 0, mean_dx = 0;
            for (std::size_t i = 0; i < count; ++i) {
              const T d = g[base + i] * gamma_v[grp * per_group + i / area];
              mean_d += d;
              mean_dx += d * xhat[base + i];
            }
            mean_d /= static_cast<T>(count);
            mean_dx /= static_cast<T>(count);
            const T r = rstd[b * groups + grp];
            for (std::size_t i = 0; i < count; ++i) {
              const T d = g[base + i] * gamma_v[grp * per_group + i / area];
              (*gx)[base + i] += r * (d - mean_d - xhat[base + i] * mean_dx);
            }
          }
      });
}

// Exact GELU: x * Phi(x).
template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr T inv_sqrt2 = T(1) / std::numbers::sqrt2_v<T>;
  constexpr T inv_sqrt_2pi = std::numbers::inv_sqrtpi_v<T> * inv_sqrt2;
  return detail::unary_op<T>(
      "gelu", x, [](T v) { return v * T(0.5) * (T(1) + std::erf(v * inv_sqrt2)); },
      [](T v, T) {
        const T cdf = T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
        const T pdf = inv_sqrt_2pi * std::exp(T(-0.5) * v * v);
        return cdf + v * pdf;
      });
}

// Inverted dropout; identity in eval mode or when p == 0.
template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double p, bool training, Rng& rng) {
  detail::require(p >= 0.0 && p < 1.0, "dropout: p must lie in [0, 1)");
  if (!training || p == 0.0) return x;
  const T keep_scale = T(1) / static_cast<T>(1.0 - p);
  std::vector<T> mask(x.numel());
  for (auto& m : mask) m = rng.uniform() < p ? T(0) : keep_scale;
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] * mask[i];
  return detail::make_result<T>("dropout", x.shape(), std::move(out), {&x},
                                [mask = std::move(mask)](detail::Node<T>& self) {
                                  if (auto* g = detail::grad_sink(self, 0)) {
                                    for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * mask[i];
                                  }
                                });
}

namespace detail {

// Source taps for align-corners=false resampling along one axis.
struct ResizeTaps {
  std::vector<std::size_t> lo, hi;
  std::vector<double> frac;
};

inline ResizeTaps resize_taps(std::size_t in, std::size_t out) {
  ResizeTaps taps;
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t i = 0; i < out; ++i) {
    double src = (static_cast<double>(i) + 0.5) * scale - 0.5;
    if (src < 0.0) src = 0.0;
    auto lo = static_cast<std::size_t>(src);
    if (lo > in - 1) lo = in - 1;
    const std::size_t hi = std::min(lo + 1, in - 1);
    taps.lo.push_back(lo);
    taps.hi.push_back(hi);
    taps.frac.push_back(src - static_cast<double>(lo));
  }
  return taps;
}

}  // namespace detail

// Bilinear resampling with half-pixel centers (align_corners = false); the
// source coordinate is clamped to the border.
template <typename T>
Tensor<T> bilinear_resize(const Tensor<T>& x, std::size_t out_h, std::size_t out_w) {
  detail::require(x.rank() == 4, "bilinear_resize: expected B x C x H x W");
  detail::require(out_h >= 1 && out_w >= 1, "bilinear_resize: target extents must be >= 1");
  const std::size_t planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  if (out_h == h && out_w == w) return x;
  auto ty = detail::resize_taps(h, out_h);
  auto tx = detail::resize_taps(w, out_w);
  std::vector<T> out(planes * out_h * out_w);
  const auto xv = x.data();
  for (std::size_t p = 0; p < planes; ++p) {
    const T* src = xv.data() + p * h * w;
    for (std::size_t i = 0; i < out_h; ++i) {
      const T fy = static_cast<T>(ty.frac[i]);
      const T* r0 = src + ty.lo[i] * w;
      const T* r1 = src + ty.hi[i] * w;
      T* dst = out.data() + (p * out_h + i) * out_w;
      for (std::size_t j = 0; j < out_w; ++j) {
        const T fx = static_cast<T>(tx.frac[j]);
        const T top = r0[tx.lo[j]] * (T(1) - fx) + r0[tx.hi[j]] * fx;
        const T bottom = r1[tx.lo[j]] * (T(1) - fx) + r1[tx.hi[j]] * fx;
        dst[j] = top * (T(1) - fy) + bottom * fy;
      }
    }
  }
  Shape shape{x.dim(0), x.dim(1), out_h, out_w};
  return detail::make_result<T>("bilinear_resize", std::move(shape), std::move(out), {&x},
                                [planes, h, w, out_h, out_w, ty = std::move(ty),
                                 tx = std::move(tx)](detail::Node<T>& self) {
                                  auto* g = detail::grad_sink(self, 0);
                                  if (!g) return;
                                  for (std::size_t p = 0; p < planes; ++p) {
                                    T* dsrc = g->data() + p * h * w;
                                    for (std::size_t i = 0; i < out_h; ++i) {
                                      const T fy = static_cast<T>(ty.frac[i]);
                                      T* r0 = dsrc + ty.lo[i] * w;
                                      T* r1 = dsrc + ty.hi[i] * w;
                                      const T* gout = self.grad.data() + (p * out_h + i) * out_w;
                                      for (std::size_t j = 0; j < out_w; ++j) {
                                        const T fx = static_cast<T>(tx.frac[j]);
                                        const T d = gout[j];
                                        r0[tx.lo[j]] += d * (T(1) - fy) * (T(1) - fx);
                                        r0[tx.hi[j]] += d * (T(1) - fy) * fx;
                                        r1[tx.lo[j]] += d * fy * (T(1) - fx);
                                        r1[tx.hi[j]] += d * fy * fx;
                                      }
                                    }
                                  }
                                });
}

enum class PoolKind { average, maximum };

// Per-channel global reduction to B x C x 1 x 1. Max routes its gradient to
// the first maximal element in row-major order.
template <typename T>
Tensor<T> global_pool(const Tensor<T>& x, PoolKind kind) {
  detail::require(x.rank() == 4, "global_pool: expected B x C x H x W");
  const std::size_t planes = x.dim(0) * x.dim(1), area = x.dim(2) * x.dim(3);
  std::vector<T> out(planes);
  std::vector<std::size_t> argmax(kind == PoolKind::maximum ? planes : 0);
  const auto xv = x.data();
  for (std::size_t p = 0; p < planes; ++p) {
    const T* src = xv.data() + p * area;
    if (kind == PoolKind::average) {
      T total = 0;
      for (std::size_t i = 0; i < area; ++i) total += src[i];
      out[p] = total / static_cast<T>(area);
    } else {
      std::size_t best = 0;
      for (std::size_t i = 1; i < area; ++i)
        if (src[i] > src[best]) best = i;
      argmax[p] = best;
      out[p] = src[best];
    }
  }
  Shape shape{x.dim(0), x.dim(1), 1, 1};
  return detail::make_result<T>(kind == PoolKind::average ? "global_avg_pool" : "global_max_pool", std::move(shape),
                                std::move(out), {&x},
                                [kind, planes, area, argmax = std::move(argmax)](detail::Node<T>& self) {
                                  auto* g = detail::grad_sink(self, 0);
                                  if (!g) return;
                                  for (std::size_t p = 0; p < planes; ++p) {
                                    if (kind == PoolKind::average) {
                                      const T share = self.grad[p] / static_cast<T>(area);
                                      for (std::size_t i = 0; i < area; ++i) (*g)[p * area + i] += share;
                                    } else {
                                      (*g)[p * area + argmax[p]] += self.grad[p];
                                    }
                                  }
                                });
}

// Non-overlapping k x k mean pooling; extents must be divisible by k.
template <typename T>
Tensor<T> avg_pool2d(const Tensor<T>& x, std::size_t k) {
  detail::require(x.rank() == 4 && k >= 1 && x.dim(2) % k == 0 && x.dim(3) % k == 0,
                  "avg_pool2d: extents of " + shape_str(x.shape()) + " not divisible by " + std::to_string(k));
  const std::size_t planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3), oh = h / k, ow = w / k;
  const T inv = T(1) / static_cast<T>(k * k);
  std::vector<T> out(planes * oh * ow, T(0));
  const auto xv = x.data();
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t xx = 0; xx < w; ++xx) out[(p * oh + y / k) * ow + xx / k] += xv[(p * h + y) * w + xx] * inv;
  Shape shape{x.dim(0), x.dim(1), oh, ow};
  return detail::make_result<T>("avg_pool2d", std::move(shape), std::move(out), {&x},
                                [planes, h, w, oh, ow, k, inv](detail::Node<T>& self) {
                                  auto* g = detail::grad_sink(self, 0);
                                  if (!g) return;
                                  for (std::size_t p = 0; p < planes; ++p)
                                    for (std::size_t y = 0; y < h; ++y)
                                      for (std::size_t xx = 0; xx < w; ++xx)
                                        (*g)[(p * h + y) * w + xx] += self.grad[(p * oh + y / k) * ow + xx / k] * inv;
                                });
}

}  // namespace adsam
