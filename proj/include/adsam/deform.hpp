#pragma once

#include <array>
#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "adsam/module.hpp"
#include "adsam/nn_ops.hpp"

namespace adsam {

namespace detail {

// Four-neighbour bilinear stencil of one continuous (row, col) point on an
// H x W plane. Neighbours outside the plane read as zero.
struct BilinearStencil {
  std::array<std::ptrdiff_t, 4> index{-1, -1, -1, -1};  // (y0,x0) (y0,x1) (y1,x0) (y1,x1)
  double ly = 0.0;
  double lx = 0.0;

  BilinearStencil(double y, double x, std::size_t h, std::size_t w) {
    const double fy = std::floor(y);
    const double fx = std::floor(x);
    ly = y - fy;
    lx = x - fx;
    // Points this far out touch no neighbour; keeps the casts below in range.
    if (fy < -2.0 || fx < -2.0 || fy > static_cast<double>(h) || fx > static_cast<double>(w)) return;
    const auto y0 = static_cast<std::ptrdiff_t>(fy);
    const auto x0 = static_cast<std::ptrdiff_t>(fx);
    const auto hh = static_cast<std::ptrdiff_t>(h);
    const auto ww = static_cast<std::ptrdiff_t>(w);
    auto at = [&](std::ptrdiff_t r, std::ptrdiff_t c) -> std::ptrdiff_t {
      return (r >= 0 && r < hh && c >= 0 && c < ww) ? r * ww + c : -1;
    };
    index = {at(y0, x0), at(y0, x0 + 1), at(y0 + 1, x0), at(y0 + 1, x0 + 1)};
  }

  template <typename T>
  std::array<T, 4> weights() const {
    const T a = static_cast<T>(ly), b = static_cast<T>(lx);
    return {(T(1) - a) * (T(1) - b), (T(1) - a) * b, a * (T(1) - b), a * b};
  }

  template <typename T>
  std::array<T, 4> corners(const T* plane) const {
    std::array<T, 4> v{};
    for (std::size_t i = 0; i < 4; ++i) v[i] = index[i] >= 0 ? plane[index[i]] : T(0);
    return v;
  }

  template <typename T>
  T sample(const T* plane) const {
    const auto v = corners(plane);
    const auto wt = weights<T>();
    return wt[0] * v[0] + wt[1] * v[1] + wt[2] * v[2] + wt[3] * v[3];
  }

  // d(sample)/d(row), d(sample)/d(col).
  template <typename T>
  std::pair<T, T> coordinate_grad(const T* plane) const {
    const auto v = corners(plane);
    const T a = static_cast<T>(ly), b = static_cast<T>(lx);
    const T d_row = (T(1) - b) * (v[2] - v[0]) + b * (v[3] - v[1]);
    const T d_col = (T(1) - a) * (v[1] - v[0]) + a * (v[3] - v[2]);
    return {d_row, d_col};
  }

  template <typename T>
  void scatter(T* plane, T value) const {
    const auto wt = weights<T>();
    for (std::size_t i = 0; i < 4; ++i)
      if (index[i] >= 0) plane[index[i]] += value * wt[i];
  }
};

}  // namespace detail

// Samples feature (B x C x H x W) at B x N continuous (row, col) points,
// giving B x C x N. Differentiable in both the features and the points.
template <typename T>
Tensor<T> bilinear_sample(const Tensor<T>& feature, const Tensor<T>& points) {
  detail::require(feature.rank() == 4, "bilinear_sample: feature must be B x C x H x W");
  detail::require(points.rank() == 3 && points.dim(0) == feature.dim(0) && points.dim(2) == 2,
                  "bilinear_sample: points must be B x N x 2, got " + shape_str(points.shape()));
  const std::size_t batch = feature.dim(0), channels = feature.dim(1), h = feature.dim(2), w = feature.dim(3);
  const std::size_t n = points.dim(1);
  std::vector<detail::BilinearStencil> stencils;
  stencils.reserve(batch * n);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t i = 0; i < n; ++i) {
      const auto* pt = points.data().data() + (b * n + i) * 2;
      stencils.emplace_back(static_cast<double>(pt[0]), static_cast<double>(pt[1]), h, w);
    }
  std::vector<T> out(batch * channels * n);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t c = 0; c < channels; ++c) {
      const T* plane = feature.data().data() + (b * channels + c) * h * w;
      for (std::size_t i = 0; i < n; ++i) out[(b * channels + c) * n + i] = stencils[b * n + i].sample(plane);
    }
  return detail::make_result<T>("bilinear_sample", {batch, channels, n}, std::move(out), {&feature, &points},
                                [batch, channels, h, w, n, stencils = std::move(stencils)](detail::Node<T>& self) {
                                  const auto& fv = self.inputs[0]->data;
                                  auto* gf = detail::grad_sink(self, 0);
                                  auto* gp = detail::grad_sink(self, 1);
                                  for (std::size_t b = 0; b < batch; ++b)
                                    for (std::size_t c = 0; c < channels; ++c) {
                                      const std::size_t plane_at = (b * channels + c) * h * w;
                                      for (std::size_t i = 0; i < n; ++i) {
                                        const T g = self.grad[(b * channels + c) * n + i];
                                        const auto& st = stencils[b * n + i];
                                        if (gf) st.scatter(gf->data() + plane_at, g);
                                        if (gp) {
                                          const auto [dr, dc] = st.coordinate_grad(fv.data() + plane_at);
                                          (*gp)[(b * n + i) * 2] += g * dr;
                                          (*gp)[(b * n + i) * 2 + 1] += g * dc;
                                        }
                                      }
                                    }
                                });
}

inline Shape deform_conv2d_output_shape(const Shape& x, const Shape& w) {
  detail::require(x.size() == 4 && w.size() == 4, "deform_conv2d: expected 4-D input and weight");
  detail::require(x[1] == w[1], "deform_conv2d: channel mismatch, input has " + std::to_string(x[1]) +
                                    " channels, weight expects " + std::to_string(w[1]));
  detail::require(w[2] % 2 == 1 && w[3] % 2 == 1, "deform_conv2d: kernel extents must be odd");
  return {x[0], w[0], x[2], x[3]};
}

// Modulated deformable convolution, stride 1, "same" zero padding.
//
//   y(p0) = bias + sum_k w_k * x(p0 + p_k + dp_k) * m_k
//
// offsets: B x 2K x H x W with (d_row, d_col) of tap k at channels 2k, 2k+1;
// masks:   B x K x H x W. Taps run over the kernel window in row-major order.
// One offset field is shared by all input channels.
template <typename T>
Tensor<T> deform_conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                        const Tensor<T>& offsets, const Tensor<T>& masks) {
  const Shape out_shape = deform_conv2d_output_shape(x.shape(), weight.shape());
  const std::size_t batch = x.dim(0), cin = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t cout = weight.dim(0), kh = weight.dim(2), kw = weight.dim(3), taps = kh * kw;
  const std::size_t area = h * w, depth = cin * taps;
  detail::require(offsets.shape() == Shape{batch, 2 * taps, h, w},
                  "deform_conv2d: offsets must be " + shape_str({batch, 2 * taps, h, w}) + ", got " +
                      shape_str(offsets.shape()));
  detail::require(masks.shape() == Shape{batch, taps, h, w}, "deform_conv2d: masks must be " +
                                                                 shape_str({batch, taps, h, w}) + ", got " +
                                                                 shape_str(masks.shape()));
  const bool has_bias = bias.defined();
  if (has_bias) detail::require(bias.numel() == cout, "deform_conv2d: bias must have Cout entries");

  // stencils[(b * taps + k) * area + p]; samples[((b * cin + ci) * taps + k) * area + p] (unmodulated).
  std::vector<detail::BilinearStencil> stencils;
  stencils.reserve(batch * taps * area);
  const auto ov = offsets.data();
  const auto ry = static_cast<std::ptrdiff_t>(kh / 2), rx = static_cast<std::ptrdiff_t>(kw / 2);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t k = 0; k < taps; ++k) {
      const double tap_row = static_cast<double>(static_cast<std::ptrdiff_t>(k / kw) - ry);
      const double tap_col = static_cast<double>(static_cast<std::ptrdiff_t>(k % kw) - rx);
      const T* d_row = ov.data() + (b * 2 * taps + 2 * k) * area;
      const T* d_col = d_row + area;
      for (std::size_t oy = 0; oy < h; ++oy)
        for (std::size_t ox = 0; ox < w; ++ox) {
          const std::size_t p = oy * w + ox;
          stencils.emplace_back(static_cast<double>(oy) + tap_row + static_cast<double>(d_row[p]),
                                static_cast<double>(ox) + tap_col + static_cast<double>(d_col[p]), h, w);
        }
    }

  std::vector<T> samples(batch * depth * area);
  const auto xv = x.data();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t ci = 0; ci < cin; ++ci) {
      const T* plane = xv.data() + (b * cin + ci) * area;
      for (std::size_t k = 0; k < taps; ++k) {
        const auto* st = stencils.data() + (b * taps + k) * area;
        T* dst = samples.data() + ((b * cin + ci) * taps + k) * area;
        for (std::size_t p = 0; p < area; ++p) dst[p] = st[p].sample(plane);
      }
    }

  std::vector<T> out(batch * cout * area, T(0));
  std::vector<T> column(depth * area);
  const auto wv = weight.data();
  const auto mv = masks.data();
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t j = 0; j < depth; ++j) {
      const T* m = mv.data() + (b * taps + j % taps) * area;
      const T* s = samples.data() + (b * depth + j) * area;
      for (std::size_t p = 0; p < area; ++p) column[j * area + p] = m[p] * s[p];
    }
    T* dst = out.data() + b * cout * area;
    if (has_bias)
      for (std::size_t co = 0; co < cout; ++co) std::fill(dst + co * area, dst + (co + 1) * area, bias.data()[co]);
    detail::gemm_acc(cout, area, depth, wv.data(), depth, 1, column.data(), area, dst, area);
  }

  std::vector<Tensor<T>> inputs{x, weight, offsets, masks};
  if (has_bias) inputs.push_back(bias);
  return detail::make_result<T>(
      "deform_conv2d", out_shape, std::move(out), inputs,
      [batch, cin, h, w, cout, taps, area, depth, has_bias, stencils = std::move(stencils),
       samples = std::move(samples)](detail::Node<T>& self) {
        const auto& xv = self.inputs[0]->data;
        const auto& wv = self.inputs[1]->data;
        const auto& mv = self.inputs[3]->data;
        const auto& g = self.grad;
        auto* gx = detail::grad_sink(self, 0);
        auto* gw = detail::grad_sink(self, 1);
        auto* goff = detail::grad_sink(self, 2);
        auto* gm = detail::grad_sink(self, 3);
        auto* gb = has_bias ? detail::grad_sink(self, 4) : nullptr;
        std::vector<T> dcol(depth * area);
        for (std::size_t b = 0; b < batch; ++b) {
          const T* gout = g.data() + b * cout * area;
          if (gb) {
            for (std::size_t co = 0; co < cout; ++co) {
              T acc = 0;
              for (std::size_t p = 0; p < area; ++p) acc += gout[co * area + p];
              (*gb)[co] += acc;
            }
          }
          if (gw) {
            for (std::size_t j = 0; j < depth; ++j) {
              const T* m = mv.data() + (b * taps + j % taps) * area;
              const T* s = samples.data() + (b * depth + j) * area;
              for (std::size_t p = 0; p < area; ++p) dcol[j * area + p] = m[p] * s[p];
            }
            detail::gemm_nt_acc(cout, depth, area, gout, area, dcol.data(), area, gw->data(), depth);
          }
          if (!gx && !goff && !gm) continue;
          std::fill(dcol.begin(), dcol.end(), T(0));
          detail::gemm_acc(depth, area, cout, wv.data(), 1, depth, gout, area, dcol.data(), area);
          for (std::size_t ci = 0; ci < cin; ++ci) {
            const std::size_t plane_at = (b * cin + ci) * area;
            for (std::size_t k = 0; k < taps; ++k) {
              const std::size_t j = ci * taps + k;
              const T* m = mv.data() + (b * taps + k) * area;
              const T* s = samples.data() + (b * depth + j) * area;
              const T* dc = dcol.data() + j * area;
              const auto* st = stencils.data() + (b * taps + k) * area;
              for (std::size_t p = 0; p < area; ++p) {
                if (gm) (*gm)[(b * taps + k) * area + p] += dc[p] * s[p];
                const T dsample = dc[p] * m[p];
                if (gx) st[p].scatter(gx->data() + plane_at, dsample);
                if (goff) {
                  const auto [dr, dcc] = st[p].coordinate_grad(xv.data() + plane_at);
                  (*goff)[(b * 2 * taps + 2 * k) * area + p] += dsample * dr;
                  (*goff)[(b * 2 * taps + 2 * k + 1) * area + p] += dsample * dcc;
                }
              }
            }
          }
        }
        (void)h;
        (void)w;
      });
}

// Offsets and sigmoid masks predicted by one 3 x 3 convolution producing 3K
// channels: the first 2K are raw offsets, the last K become masks.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> offset_mask_predict(const Tensor<T>& x, const Tensor<T>& weight,
                                                    const Tensor<T>& bias, std::size_t taps) {
  detail::require(weight.rank() == 4 && weight.dim(0) == 3 * taps,
                  "offset_mask_predict: predictor must emit 3K = " + std::to_string(3 * taps) + " channels");
  const auto raw = conv2d(x, weight, bias, 1, weight.dim(2) / 2);
  return {slice_channels(raw, 0, 2 * taps), sigmoid(slice_channels(raw, 2 * taps, taps))};
}

// 3 x 3 modulated deformable convolution whose offsets and masks are
// predicted from its own input by a zero-initialized predictor, so a fresh
// layer computes 0.5 * conv(x) + bias.
template <typename T>
struct DeformConvLayer {
  static constexpr std::size_t kKernel = 3;
  static constexpr std::size_t kTaps = kKernel * kKernel;

  Tensor<T> weight;
  Tensor<T> bias;
  Tensor<T> offset_weight;
  Tensor<T> offset_bias;

  DeformConvLayer() = default;
  DeformConvLayer(std::size_t in_channels, std::size_t out_channels, Rng& rng)
      : weight(init::he_normal<T>({out_channels, in_channels, kKernel, kKernel}, in_channels * kTaps, rng)),
        bias(init::zeros<T>({out_channels})),
        offset_weight(init::zeros<T>({3 * kTaps, in_channels, kKernel, kKernel})),
        offset_bias(init::zeros<T>({3 * kTaps})) {}

  std::size_t in_channels() const { return weight.dim(1); }
  std::size_t out_channels() const { return weight.dim(0); }

  Tensor<T> operator()(const Tensor<T>& x) const {
    const auto [offsets, masks] = offset_mask_predict(x, offset_weight, offset_bias, kTaps);
    return deform_conv2d(x, weight, bias, offsets, masks);
  }

  void collect(ParamList<T>& params, const std::string& prefix, ParamGroup group) const {
    params.push_back({prefix + ".weight", weight, group});
    params.push_back({prefix + ".bias", bias, group});
    params.push_back({prefix + ".offset.weight", offset_weight, group});
    params.push_back({prefix + ".offset.bias", offset_bias, group});
  }
};

}  // namespace adsam
