#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <vector>

#include "adsam/errors.hpp"
#include "adsam/ops.hpp"

namespace adsam {

namespace detail {
inline constexpr std::int64_t kFarAway = std::numeric_limits<std::int64_t>::max() / 4;
}

// Exact squared Euclidean distance from every pixel to the nearest boundary
// pixel of `mask` (row-major H x W, nonzero = inside). Boundary pixels are
// mask pixels that touch a non-mask pixel through a 4-neighbour or lie on
// the image border. An empty mask yields all zeros.
inline std::vector<std::int64_t> squared_distance_transform(std::span<const std::uint8_t> mask, std::size_t h,
                                                            std::size_t w) {
  detail::require(mask.size() == h * w, "distance_transform: mask size does not match extents");
  const std::size_t n = h * w;
  std::vector<std::int64_t> out(n, 0);
  std::vector<char> boundary(n, 0);
  bool any = false;
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      if (!mask[y * w + x]) continue;
      const bool edge = y == 0 || x == 0 || y + 1 == h || x + 1 == w || !mask[(y - 1) * w + x] ||
                        !mask[(y + 1) * w + x] || !mask[y * w + x - 1] || !mask[y * w + x + 1];
      boundary[y * w + x] = edge;
      any = any || edge;
    }
  if (!any) return out;

  // 1-D lower envelope of parabolas (Felzenszwalb & Huttenlocher), exact in integers.
  auto envelope = [](const std::int64_t* f, std::size_t len, std::int64_t* d, std::vector<std::size_t>& v,
                     std::vector<double>& z) {
    std::size_t k = 0;
    std::size_t first = 0;
    while (first < len && f[first] >= detail::kFarAway) ++first;
    if (first == len) {
      std::fill(d, d + len, detail::kFarAway);
      return;
    }
    v[0] = first;
    z[0] = -std::numeric_limits<double>::infinity();
    z[1] = std::numeric_limits<double>::infinity();
    for (std::size_t q = first + 1; q < len; ++q) {
      if (f[q] >= detail::kFarAway) continue;
      while (true) {
        const auto p = v[k];
        const double s = (static_cast<double>(f[q] + static_cast<std::int64_t>(q * q)) -
                          static_cast<double>(f[p] + static_cast<std::int64_t>(p * p))) /
                         (2.0 * static_cast<double>(q - p));
        if (s <= z[k]) {
          if (k == 0) {
            v[0] = q;
            z[1] = std::numeric_limits<double>::infinity();
            break;
          }
          --k;
          continue;
        }
        ++k;
        v[k] = q;
        z[k] = s;
        z[k + 1] = std::numeric_limits<double>::infinity();
        break;
      }
    }
    k = 0;
    for (std::size_t q = 0; q < len; ++q) {
      while (z[k + 1] < static_cast<double>(q)) ++k;
      const auto dq = static_cast<std::int64_t>(q) - static_cast<std::int64_t>(v[k]);
      d[q] = dq * dq + f[v[k]];
    }
  };

  const std::size_t longest = std::max(h, w);
  std::vector<std::size_t> v(longest);
  std::vector<double> z(longest + 1);
  std::vector<std::int64_t> column(h), column_out(h), row_out(w);
  std::vector<std::int64_t> partial(n);
  for (std::size_t x = 0; x < w; ++x) {
    for (std::size_t y = 0; y < h; ++y) column[y] = boundary[y * w + x] ? 0 : detail::kFarAway;
    envelope(column.data(), h, column_out.data(), v, z);
    for (std::size_t y = 0; y < h; ++y) partial[y * w + x] = column_out[y];
  }
  for (std::size_t y = 0; y < h; ++y) {
    envelope(partial.data() + y * w, w, row_out.data(), v, z);
    std::copy(row_out.begin(), row_out.end(), out.begin() + static_cast<std::ptrdiff_t>(y * w));
  }
  return out;
}

inline std::vector<double> distance_transform(std::span<const std::uint8_t> mask, std::size_t h, std::size_t w) {
  const auto squared = squared_distance_transform(mask, h, w);
  std::vector<double> out(squared.size());
  for (std::size_t i = 0; i < squared.size(); ++i) out[i] = std::sqrt(static_cast<double>(squared[i]));
  return out;
}

// Per image and class, the distance map of that class's ground-truth region.
struct DistanceMapSet {
  std::size_t batch = 0, classes = 0, height = 0, width = 0;
  std::vector<double> values;  // B x C x H x W

  const double* map(std::size_t b, std::size_t c) const {
    return values.data() + (b * classes + c) * height * width;
  }
};

inline DistanceMapSet distance_maps(const LabelBatch& labels, std::size_t num_classes) {
  DistanceMapSet set{labels.batch, num_classes, labels.height, labels.width, {}};
  const std::size_t area = labels.pixels_per_image();
  set.values.assign(labels.batch * num_classes * area, 0.0);
  std::vector<std::uint8_t> mask(area);
  for (std::size_t b = 0; b < labels.batch; ++b) {
    const auto img = labels.image(b);
    for (std::size_t c = 0; c < num_classes; ++c) {
      bool present = false;
      for (std::size_t i = 0; i < area; ++i) {
        mask[i] = img[i] == c;
        present = present || mask[i];
      }
      if (!present) continue;
      const auto d = distance_transform(mask, labels.height, labels.width);
      std::copy(d.begin(), d.end(), set.values.begin() + static_cast<std::ptrdiff_t>((b * num_classes + c) * area));
    }
  }
  return set;
}

struct FocalParams {
  double alpha = 0.25;
  double gamma = 2.0;
};

namespace detail {

template <typename T>
void check_loss_inputs(const Tensor<T>& probs, const LabelBatch& labels, int ignore_value, const char* op) {
  require(probs.rank() == 4, std::string(op) + ": expected B x C x H x W probabilities");
  require(probs.dim(0) == labels.batch && probs.dim(2) == labels.height && probs.dim(3) == labels.width,
          std::string(op) + ": labels " + shape_str({labels.batch, labels.height, labels.width}) +
              " do not match predictions " + shape_str(probs.shape()));
  require(labels.values.size() == labels.batch * labels.pixels_per_image(), std::string(op) + ": label buffer size");
  const std::size_t classes = probs.dim(1);
  bool any = false;
  for (auto v : labels.values) {
    if (v == ignore_value) continue;
    if (v >= classes)
      throw DataError(std::string(op) + ": label " + std::to_string(v) + " outside [0, " + std::to_string(classes) + ")");
    any = true;
  }
  if (!any) throw DataError(std::string(op) + ": every pixel is ignored, the loss is undefined");
}

// Offset of (b, c, i) in a B x C x area buffer.
inline std::size_t at(std::size_t b, std::size_t c, std::size_t i, std::size_t classes, std::size_t area) {
  return (b * classes + c) * area + i;
}

}  // namespace detail

// Losses on softmax probabilities. The logits-taking wrappers below apply the
// softmax; composite_loss shares one softmax between all four terms.

template <typename T>
Tensor<T> focal_loss_from_probs(const Tensor<T>& probs, const LabelBatch& labels, FocalParams params = {},
                                int ignore_value = kIgnoreLabel) {
  detail::check_loss_inputs(probs, labels, ignore_value, "focal_loss");
  const std::size_t batch = probs.dim(0), classes = probs.dim(1), area = labels.pixels_per_image();
  const double lo = 1e-7, hi = 1.0 - 1e-7;
  const auto pv = probs.data();
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t i = 0; i < area; ++i) {
      const int g = labels.values[b * area + i];
      if (g == ignore_value) continue;
      const double pt = std::clamp(static_cast<double>(pv[detail::at(b, g, i, classes, area)]), lo, hi);
      total += -params.alpha * std::pow(1.0 - pt, params.gamma) * std::log(pt);
      ++count;
    }
  const double n = static_cast<double>(count);
  return detail::make_result<T>(
      "focal_loss", {1}, {static_cast<T>(total / n)}, {&probs},
      [labels, params, ignore_value, batch, classes, area, n, lo, hi](detail::Node<T>& self) {
        auto* gp = detail::grad_sink(self, 0);
        if (!gp) return;
        const auto& pv = self.inputs[0]->data;
        const double upstream = static_cast<double>(self.grad[0]) / n;
        for (std::size_t b = 0; b < batch; ++b)
          for (std::size_t i = 0; i < area; ++i) {
            const int g = labels.values[b * area + i];
            if (g == ignore_value) continue;
            const std::size_t idx = detail::at(b, g, i, classes, area);
            const double p = static_cast<double>(pv[idx]);
            if (p < lo || p > hi) continue;
            const double q = 1.0 - p;
            double d = -std::pow(q, params.gamma) / p;
            if (params.gamma != 0.0) d += params.gamma * std::pow(q, params.gamma - 1.0) * std::log(p);
            (*gp)[idx] += static_cast<T>(upstream * params.alpha * d);
          }
      });
}

// Soft Dice over the whole batch, averaged over classes present in the labels.
template <typename T>
Tensor<T> dice_loss_from_probs(const Tensor<T>& probs, const LabelBatch& labels, int ignore_value = kIgnoreLabel,
                               double eps = 1e-6) {
  detail::check_loss_inputs(probs, labels, ignore_value, "dice_loss");
  const std::size_t batch = probs.dim(0), classes = probs.dim(1), area = labels.pixels_per_image();
  const auto pv = probs.data();
  std::vector<double> inter(classes, 0.0), psum(classes, 0.0), gsum(classes, 0.0);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t i = 0; i < area; ++i) {
      const int g = labels.values[b * area + i];
      if (g == ignore_value) continue;
      for (std::size_t c = 0; c < classes; ++c) psum[c] += static_cast<double>(pv[detail::at(b, c, i, classes, area)]);
      inter[g] += static_cast<double>(pv[detail::at(b, g, i, classes, area)]);
      gsum[g] += 1.0;
    }
  std::vector<std::size_t> present;
  double mean_dice = 0.0;
  for (std::size_t c = 0; c < classes; ++c) {
    if (gsum[c] == 0.0) continue;
    present.push_back(c);
    mean_dice += (2.0 * inter[c] + eps) / (psum[c] + gsum[c] + eps);
  }
  mean_dice /= static_cast<double>(present.size());
  return detail::make_result<T>(
      "dice_loss", {1}, {static_cast<T>(1.0 - mean_dice)}, {&probs},
      [labels, ignore_value, batch, classes, area, eps, inter, psum, gsum, present](detail::Node<T>& self) {
        auto* gp = detail::grad_sink(self, 0);
        if (!gp) return;
        const double upstream = static_cast<double>(self.grad[0]) / static_cast<double>(present.size());
        // d(1 - dice_c)/dp_i = -(2 g_i S - (2I + eps)) / S^2, S = P + G + eps.
        std::vector<double> on(classes, 0.0), off(classes, 0.0);
        for (auto c : present) {
          const double s = psum[c] + gsum[c] + eps;
          const double num = 2.0 * inter[c] + eps;
          on[c] = -upstream * (2.0 * s - num) / (s * s);
          off[c] = upstream * num / (s * s);
        }
        for (std::size_t b = 0; b < batch; ++b)
          for (std::size_t i = 0; i < area; ++i) {
            const int g = labels.values[b * area + i];
            if (g == ignore_value) continue;
            for (auto c : present)
              (*gp)[detail::at(b, c, i, classes, area)] += static_cast<T>(static_cast<std::size_t>(g) == c ? on[c] : off[c]);
          }
      });
}

// Gradient of the Jaccard loss with respect to sorted errors, given the
// ground-truth indicators in sorted order.
inline std::vector<double> lovasz_grad(const std::vector<std::uint8_t>& sorted_gt) {
  const std::size_t n = sorted_gt.size();
  std::vector<double> grad(n);
  const double total = std::accumulate(sorted_gt.begin(), sorted_gt.end(), 0.0);
  double cum_gt = 0.0, cum_bg = 0.0, prev = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    cum_gt += sorted_gt[i];
    cum_bg += 1 - sorted_gt[i];
    const double jaccard = 1.0 - (total - cum_gt) / (total + cum_bg);
    grad[i] = jaccard - prev;
    prev = jaccard;
  }
  return grad;
}

namespace detail {

// Per present class: pixel order (sorted by error), the matching weights and
// the class loss.
struct LovaszTerm {
  std::size_t c;
  std::vector<std::size_t> order;
  std::vector<double> grad;
  double value = 0.0;
};

struct LovaszTerms {
  std::vector<std::size_t> pixels;  // b * area + i of non-ignored pixels
  std::vector<LovaszTerm> terms;
};

template <typename T>
LovaszTerms lovasz_terms(const Tensor<T>& probs, const LabelBatch& labels, int ignore_value) {
  const std::size_t classes = probs.dim(1), area = labels.pixels_per_image();
  const auto pv = probs.data();
  LovaszTerms out;
  auto& pixels = out.pixels;
  for (std::size_t j = 0; j < labels.values.size(); ++j)
    if (labels.values[j] != ignore_value) pixels.push_back(j);
  std::vector<char> present(classes, 0);
  for (auto j : pixels) present[labels.values[j]] = 1;

  std::vector<double> errors(pixels.size());
  for (std::size_t c = 0; c < classes; ++c) {
    if (!present[c]) continue;
    for (std::size_t k = 0; k < pixels.size(); ++k) {
      const std::size_t j = pixels[k];
      const double p = static_cast<double>(pv[at(j / area, c, j % area, classes, area)]);
      errors[k] = labels.values[j] == c ? 1.0 - p : p;
    }
    LovaszTerm term{c, std::vector<std::size_t>(pixels.size()), {}};
    std::iota(term.order.begin(), term.order.end(), std::size_t{0});
    std::stable_sort(term.order.begin(), term.order.end(),
                     [&](std::size_t a, std::size_t b) { return errors[a] > errors[b]; });
    std::vector<std::uint8_t> sorted_gt(pixels.size());
    for (std::size_t k = 0; k < pixels.size(); ++k) sorted_gt[k] = labels.values[pixels[term.order[k]]] == c;
    term.grad = lovasz_grad(sorted_gt);
    for (std::size_t k = 0; k < pixels.size(); ++k) term.value += errors[term.order[k]] * term.grad[k];
    out.terms.push_back(std::move(term));
  }
  return out;
}

}  // namespace detail

// Per-class Lovasz extension values; NaN for classes absent from the labels.
template <typename T>
std::vector<double> lovasz_class_losses(const Tensor<T>& probs, const LabelBatch& labels,
                                        int ignore_value = kIgnoreLabel) {
  detail::check_loss_inputs(probs, labels, ignore_value, "lovasz_softmax");
  std::vector<double> out(probs.dim(1), std::numeric_limits<double>::quiet_NaN());
  for (const auto& term : detail::lovasz_terms(probs, labels, ignore_value).terms) out[term.c] = term.value;
  return out;
}

// Lovasz-Softmax over the whole batch, averaged over classes present in the labels.
template <typename T>
Tensor<T> lovasz_softmax_from_probs(const Tensor<T>& probs, const LabelBatch& labels,
                                    int ignore_value = kIgnoreLabel) {
  detail::check_loss_inputs(probs, labels, ignore_value, "lovasz_softmax");
  const std::size_t classes = probs.dim(1), area = labels.pixels_per_image();
  auto [pixels, terms] = detail::lovasz_terms(probs, labels, ignore_value);
  double total = 0.0;
  for (const auto& term : terms) total += term.value;
  const double count = static_cast<double>(terms.size());
  return detail::make_result<T>(
      "lovasz_softmax", {1}, {static_cast<T>(total / count)}, {&probs},
      [labels, classes, area, count, pixels = std::move(pixels), terms = std::move(terms)](detail::Node<T>& self) {
        auto* gp = detail::grad_sink(self, 0);
        if (!gp) return;
        const double upstream = static_cast<double>(self.grad[0]) / count;
        for (const auto& term : terms)
          for (std::size_t k = 0; k < term.order.size(); ++k) {
            const std::size_t j = pixels[term.order[k]];
            const double sign = labels.values[j] == term.c ? -1.0 : 1.0;
            (*gp)[detail::at(j / area, term.c, j % area, classes, area)] +=
                static_cast<T>(upstream * sign * term.grad[k]);
          }
      });
}

// Distance-weighted absolute probability error, normalized by the total
// weight over non-ignored pixels.
template <typename T>
Tensor<T> surface_loss_from_probs(const Tensor<T>& probs, const LabelBatch& labels, const DistanceMapSet& maps,
                                  int ignore_value = kIgnoreLabel) {
  detail::check_loss_inputs(probs, labels, ignore_value, "surface_loss");
  const std::size_t batch = probs.dim(0), classes = probs.dim(1), area = labels.pixels_per_image();
  detail::require(maps.batch == batch && maps.classes == classes && maps.height == labels.height &&
                      maps.width == labels.width,
                  "surface_loss: distance maps do not match the predictions");
  const auto pv = probs.data();
  double weighted = 0.0, norm = 0.0;
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t c = 0; c < classes; ++c) {
      const double* d = maps.map(b, c);
      for (std::size_t i = 0; i < area; ++i) {
        const int g = labels.values[b * area + i];
        if (g == ignore_value || d[i] == 0.0) continue;
        const double target = static_cast<std::size_t>(g) == c ? 1.0 : 0.0;
        weighted += d[i] * std::abs(static_cast<double>(pv[detail::at(b, c, i, classes, area)]) - target);
        norm += d[i];
      }
    }
  norm += 1e-6;
  return detail::make_result<T>(
      "surface_loss", {1}, {static_cast<T>(weighted / norm)}, {&probs},
      [labels, values = maps.values, ignore_value, batch, classes, area, norm](detail::Node<T>& self) {
        auto* gp = detail::grad_sink(self, 0);
        if (!gp) return;
        const auto& pv = self.inputs[0]->data;
        const double upstream = static_cast<double>(self.grad[0]) / norm;
        for (std::size_t b = 0; b < batch; ++b)
          for (std::size_t c = 0; c < classes; ++c) {
            const double* d = values.data() + (b * classes + c) * area;
            for (std::size_t i = 0; i < area; ++i) {
              const int g = labels.values[b * area + i];
              if (g == ignore_value || d[i] == 0.0) continue;
              const std::size_t idx = detail::at(b, c, i, classes, area);
              const double diff = static_cast<double>(pv[idx]) - (static_cast<std::size_t>(g) == c ? 1.0 : 0.0);
              const double sign = diff > 0.0 ? 1.0 : (diff < 0.0 ? -1.0 : 0.0);
              (*gp)[idx] += static_cast<T>(upstream * d[i] * sign);
            }
          }
      });
}

template <typename T>
Tensor<T> focal_loss(const Tensor<T>& logits, const LabelBatch& labels, FocalParams params = {},
                     int ignore_value = kIgnoreLabel) {
  return focal_loss_from_probs(softmax_channels(logits), labels, params, ignore_value);
}

template <typename T>
Tensor<T> dice_loss(const Tensor<T>& logits, const LabelBatch& labels, int ignore_value = kIgnoreLabel,
                    double eps = 1e-6) {
  return dice_loss_from_probs(softmax_channels(logits), labels, ignore_value, eps);
}

template <typename T>
Tensor<T> lovasz_softmax(const Tensor<T>& logits, const LabelBatch& labels, int ignore_value = kIgnoreLabel) {
  return lovasz_softmax_from_probs(softmax_channels(logits), labels, ignore_value);
}

template <typename T>
Tensor<T> surface_loss(const Tensor<T>& logits, const LabelBatch& labels, const DistanceMapSet& maps,
                       int ignore_value = kIgnoreLabel) {
  return surface_loss_from_probs(softmax_channels(logits), labels, maps, ignore_value);
}

template <typename T>
struct LossBundle {
  static constexpr double kFocalWeight = 0.4;
  static constexpr double kDiceWeight = 0.3;
  static constexpr double kLovaszWeight = 0.2;
  static constexpr double kSurfaceWeight = 0.1;

  Tensor<T> focal, dice, lovasz, surface, total;
};

template <typename T>
LossBundle<T> composite_loss_from_probs(const Tensor<T>& probs, const LabelBatch& labels,
                                        int ignore_value = kIgnoreLabel) {
  using B = LossBundle<T>;
  LossBundle<T> out;
  out.focal = focal_loss_from_probs(probs, labels, FocalParams{}, ignore_value);
  out.dice = dice_loss_from_probs(probs, labels, ignore_value);
  out.lovasz = lovasz_softmax_from_probs(probs, labels, ignore_value);
  out.surface = surface_loss_from_probs(probs, labels, distance_maps(labels, probs.dim(1)), ignore_value);
  out.total = add(add(add(mul_scalar(out.focal, static_cast<T>(B::kFocalWeight)),
                          mul_scalar(out.dice, static_cast<T>(B::kDiceWeight))),
                      mul_scalar(out.lovasz, static_cast<T>(B::kLovaszWeight))),
                  mul_scalar(out.surface, static_cast<T>(B::kSurfaceWeight)));
  return out;
}

template <typename T>
LossBundle<T> composite_loss(const Tensor<T>& logits, const LabelBatch& labels, int ignore_value = kIgnoreLabel) {
  return composite_loss_from_probs(softmax_channels(logits), labels, ignore_value);
}

}  // namespace adsam
