#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include "adsam/tensor.hpp"

namespace adsam {

namespace detail {

template <typename T, typename Forward, typename Derivative>
Tensor<T> unary_op(const char* name, const Tensor<T>& x, Forward f, Derivative df) {
  std::vector<T> out(x.numel());
  const auto in = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(in[i]);
  return make_result<T>(name, x.shape(), std::move(out), {&x}, [df](Node<T>& self) {
    auto* gx = grad_sink(self, 0);
    if (!gx) return;
    const auto& xin = self.inputs[0]->data;
    for (std::size_t i = 0; i < xin.size(); ++i) (*gx)[i] += self.grad[i] * df(xin[i], self.data[i]);
  });
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  require(a.shape() == b.shape(),
          std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

}  // namespace detail

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  return detail::make_result<T>("add", a.shape(), std::move(out), {&a, &b}, [](detail::Node<T>& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      if (auto* g = detail::grad_sink(self, k)) {
        for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
      }
    }
  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  return detail::make_result<T>("sub", a.shape(), std::move(out), {&a, &b}, [](detail::Node<T>& self) {
    if (auto* g = detail::grad_sink(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    }
    if (auto* g = detail::grad_sink(self, 1)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] -= self.grad[i];
    }
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return detail::make_result<T>("mul", a.shape(), std::move(out), {&a, &b}, [](detail::Node<T>& self) {
    const auto& av = self.inputs[0]->data;
    const auto& bv = self.inputs[1]->data;
    if (auto* g = detail::grad_sink(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * bv[i];
    }
    if (auto* g = detail::grad_sink(self, 1)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * av[i];
    }
  });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, T s) {
  return detail::unary_op<T>("add_scalar", x, [s](T v) { return v + s; }, [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& x, T s) {
  return detail::unary_op<T>("mul_scalar", x, [s](T v) { return v * s; }, [s](T, T) { return s; });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  return detail::unary_op<T>(
      "relu", x, [](T v) { return v > T(0) ? v : T(0); }, [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return detail::unary_op<T>(
      "sigmoid", x,
      [](T v) {
        // Stable for large |v|.
        if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
        const T e = std::exp(v);
        return e / (T(1) + e);
      },
      [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Tensor<T> log(const Tensor<T>& x) {
  for (auto v : x.data()) detail::require(v > T(0), "log: input must be positive");
  return detail::unary_op<T>("log", x, [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
}

template <typename T>
Tensor<T> pow(const Tensor<T>& x, T exponent) {
  return detail::unary_op<T>(
      "pow", x, [exponent](T v) { return std::pow(v, exponent); },
      [exponent](T v, T) { return exponent == T(0) ? T(0) : exponent * std::pow(v, exponent - T(1)); });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T total = 0;
  for (auto v : x.data()) total += v;
  return detail::make_result<T>("sum", {1}, {total}, {&x}, [](detail::Node<T>& self) {
    if (auto* g = detail::grad_sink(self, 0)) {
      for (auto& v : *g) v += self.grad[0];
    }
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  return mul_scalar(sum(x), T(1) / static_cast<T>(x.numel()));
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  detail::require(shape_numel(shape) == x.numel(),
                  "reshape: " + shape_str(x.shape()) + " cannot become " + shape_str(shape));
  std::vector<T> out(x.data().begin(), x.data().end());
  return detail::make_result<T>("reshape", std::move(shape), std::move(out), {&x}, [](detail::Node<T>& self) {
    if (auto* g = detail::grad_sink(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    }
  });
}

// a: M x K, b: K x N.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(0),
                  "matmul: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<T> out(m * n, T(0));
  const auto av = a.data();
  const auto bv = b.data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const T s = av[i * k + p];
      for (std::size_t j = 0; j < n; ++j) out[i * n + j] += s * bv[p * n + j];
    }
  }
  return detail::make_result<T>("matmul", {m, n}, std::move(out), {&a, &b}, [m, k, n](detail::Node<T>& self) {
    const auto& av = self.inputs[0]->data;
    const auto& bv = self.inputs[1]->data;
    const auto& g = self.grad;
    if (auto* ga = detail::grad_sink(self, 0)) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          T acc = 0;
          for (std::size_t j = 0; j < n; ++j) acc += g[i * n + j] * bv[p * n + j];
          (*ga)[i * k + p] += acc;
        }
    }
    if (auto* gb = detail::grad_sink(self, 1)) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const T s = av[i * k + p];
          for (std::size_t j = 0; j < n; ++j) (*gb)[p * n + j] += s * g[i * n + j];
        }
    }
  });
}

// Adds bias[c] along axis 1 of a rank >= 2 tensor.
template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias) {
  detail::require(x.rank() >= 2 && bias.rank() == 1 && bias.dim(0) == x.dim(1),
                  "add_bias: bias " + shape_str(bias.shape()) + " does not match " + shape_str(x.shape()));
  const std::size_t outer = x.dim(0), channels = x.dim(1), inner = x.numel() / (outer * channels);
  std::vector<T> out(x.data().begin(), x.data().end());
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t c = 0; c < channels; ++c)
      for (std::size_t i = 0; i < inner; ++i) out[(o * channels + c) * inner + i] += bias.data()[c];
  return detail::make_result<T>("add_bias", x.shape(), std::move(out), {&x, &bias},
                                [outer, channels, inner](detail::Node<T>& self) {
                                  if (auto* g = detail::grad_sink(self, 0)) {
                                    for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
                                  }
                                  if (auto* g = detail::grad_sink(self, 1)) {
                                    for (std::size_t o = 0; o < outer; ++o)
                                      for (std::size_t c = 0; c < channels; ++c)
                                        for (std::size_t i = 0; i < inner; ++i)
                                          (*g)[c] += self.grad[(o * channels + c) * inner + i];
                                  }
                                });
}

// x: B x C x H x W, scale: B x C; every spatial position of channel c is
// multiplied by scale[b, c].
template <typename T>
Tensor<T> channel_scale(const Tensor<T>& x, const Tensor<T>& scale) {
  detail::require(x.rank() == 4 && scale.rank() == 2 && scale.dim(0) == x.dim(0) && scale.dim(1) == x.dim(1),
                  "channel_scale: " + shape_str(scale.shape()) + " does not match " + shape_str(x.shape()));
  const std::size_t planes = x.dim(0) * x.dim(1), area = x.dim(2) * x.dim(3);
  std::vector<T> out(x.numel());
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t i = 0; i < area; ++i) out[p * area + i] = x.data()[p * area + i] * scale.data()[p];
  return detail::make_result<T>("channel_scale", x.shape(), std::move(out), {&x, &scale},
                                [planes, area](detail::Node<T>& self) {
                                  const auto& xv = self.inputs[0]->data;
                                  const auto& sv = self.inputs[1]->data;
                                  if (auto* g = detail::grad_sink(self, 0)) {
                                    for (std::size_t p = 0; p < planes; ++p)
                                      for (std::size_t i = 0; i < area; ++i)
                                        (*g)[p * area + i] += self.grad[p * area + i] * sv[p];
                                  }
                                  if (auto* g = detail::grad_sink(self, 1)) {
                                    for (std::size_t p = 0; p < planes; ++p) {
                                      T acc = 0;
                                      for (std::size_t i = 0; i < area; ++i)
                                        acc += self.grad[p * area + i] * xv[p * area + i];
                                      (*g)[p] += acc;
                                    }
                                  }
                                });
}

// Softmax over axis 1 of a rank >= 2 tensor (per pixel for B x C x H x W).
template <typename T>
Tensor<T> softmax_channels(const Tensor<T>& x) {
  detail::require(x.rank() >= 2, "softmax_channels: rank must be >= 2");
  const std::size_t outer = x.dim(0), channels = x.dim(1), inner = x.numel() / (outer * channels);
  std::vector<T> out(x.numel());
  const auto in = x.data();
  for (std::size_t o = 0; o < outer; ++o) {
    const std::size_t base = o * channels * inner;
    for (std::size_t i = 0; i < inner; ++i) {
      T peak = -std::numeric_limits<T>::infinity();
      for (std::size_t c = 0; c < channels; ++c) peak = std::max(peak, in[base + c * inner + i]);
      T total = 0;
      for (std::size_t c = 0; c < channels; ++c) {
        const T e = std::exp(in[base + c * inner + i] - peak);
        out[base + c * inner + i] = e;
        total += e;
      }
      for (std::size_t c = 0; c < channels; ++c) out[base + c * inner + i] /= total;
    }
  }
  return detail::make_result<T>("softmax", x.shape(), std::move(out), {&x},
                                [outer, channels, inner](detail::Node<T>& self) {
                                  auto* g = detail::grad_sink(self, 0);
                                  if (!g) return;
                                  const auto& y = self.data;
                                  const auto& dy = self.grad;
                                  for (std::size_t o = 0; o < outer; ++o) {
                                    const std::size_t base = o * channels * inner;
                                    for (std::size_t i = 0; i < inner; ++i) {
                                      T dot = 0;
                                      for (std::size_t c = 0; c < channels; ++c)
                                        dot += dy[base + c * inner + i] * y[base + c * inner + i];
                                      for (std::size_t c = 0; c < channels; ++c) {
                                        const std::size_t at = base + c * inner + i;
                                        (*g)[at] += y[at] * (dy[at] - dot);
                                      }
                                    }
                                  }
                                });
}

// Concatenation along axis 1; all other extents must agree.
template <typename T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& parts) {
  detail::require(!parts.empty(), "concat_channels: no inputs");
  const auto& first = parts.front();
  detail::require(first.rank() >= 2, "concat_channels: rank must be >= 2");
  const std::size_t outer = first.dim(0), inner = first.numel() / (first.dim(0) * first.dim(1));
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& p : parts) {
    Shape expected = p.shape();
    expected[1] = first.dim(1);
    detail::require(expected == first.shape(), "concat_channels: incompatible shape " + shape_str(p.shape()) +
                                                   " vs " + shape_str(first.shape()));
    widths.push_back(p.dim(1));
    total += p.dim(1);
  }
  Shape shape = first.shape();
  shape[1] = total;
  std::vector<T> out(shape_numel(shape));
  for (std::size_t o = 0; o < outer; ++o) {
    std::size_t offset = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
      const auto src = parts[k].data().subspan(o * widths[k] * inner, widths[k] * inner);
      std::copy(src.begin(), src.end(), out.begin() + static_cast<std::ptrdiff_t>((o * total + offset) * inner));
      offset += widths[k];
    }
  }
  return detail::make_result<T>("concat", std::move(shape), std::move(out), parts,
                                [outer, inner, total, widths](detail::Node<T>& self) {
                                  std::size_t offset = 0;
                                  for (std::size_t k = 0; k < widths.size(); ++k) {
                                    if (auto* g = detail::grad_sink(self, k)) {
                                      for (std::size_t o = 0; o < outer; ++o)
                                        for (std::size_t i = 0; i < widths[k] * inner; ++i)
                                          (*g)[o * widths[k] * inner + i] +=
                                              self.grad[(o * total + offset) * inner + i];
                                    }
                                    offset += widths[k];
                                  }
                                });
}

// Channels [begin, begin + count) of axis 1.
template <typename T>
Tensor<T> slice_channels(const Tensor<T>& x, std::size_t begin, std::size_t count) {
  detail::require(x.rank() >= 2 && count >= 1 && begin + count <= x.dim(1),
                  "slice_channels: range out of bounds for " + shape_str(x.shape()));
  const std::size_t outer = x.dim(0), channels = x.dim(1), inner = x.numel() / (outer * channels);
  Shape shape = x.shape();
  shape[1] = count;
  std::vector<T> out(shape_numel(shape));
  for (std::size_t o = 0; o < outer; ++o) {
    const auto src = x.data().subspan((o * channels + begin) * inner, count * inner);
    std::copy(src.begin(), src.end(), out.begin() + static_cast<std::ptrdiff_t>(o * count * inner));
  }
  return detail::make_result<T>("slice_channels", std::move(shape), std::move(out), {&x},
                                [outer, channels, inner, begin, count](detail::Node<T>& self) {
                                  if (auto* g = detail::grad_sink(self, 0)) {
                                    for (std::size_t o = 0; o < outer; ++o)
                                      for (std::size_t i = 0; i < count * inner; ++i)
                                        (*g)[(o * channels + begin) * inner + i] += self.grad[o * count * inner + i];
                                  }
                                });
}

// Per-pixel class labels for a batch; values in [0, C) or the ignore value.
struct LabelBatch {
  std::size_t batch = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> values;

  std::size_t pixels_per_image() const { return height * width; }
  std::span<const std::uint8_t> image(std::size_t b) const {
    return std::span<const std::uint8_t>(values).subspan(b * pixels_per_image(), pixels_per_image());
  }
};

inline constexpr int kIgnoreLabel = 255;

// B x C x H x W indicator tensor; ignored pixels are all-zero. Not differentiable.
template <typename T>
Tensor<T> one_hot(const LabelBatch& labels, std::size_t num_classes, int ignore_value = kIgnoreLabel) {
  const std::size_t area = labels.pixels_per_image();
  std::vector<T> out(labels.batch * num_classes * area, T(0));
  for (std::size_t b = 0; b < labels.batch; ++b)
    for (std::size_t i = 0; i < area; ++i) {
      const int v = labels.values[b * area + i];
      if (v == ignore_value) continue;
      detail::require(v >= 0 && static_cast<std::size_t>(v) < num_classes,
                      "one_hot: label " + std::to_string(v) + " out of range");
      out[(b * num_classes + static_cast<std::size_t>(v)) * area + i] = T(1);
    }
  return Tensor<T>::from_data({labels.batch, num_classes, labels.height, labels.width}, std::move(out));
}

}  // namespace adsam
