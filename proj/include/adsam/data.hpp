#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "adsam/config.hpp"
#include "adsam/errors.hpp"
#include "adsam/ops.hpp"
#include "adsam/png_io.hpp"
#include "adsam/random.hpp"

namespace adsam {

namespace label {
inline constexpr std::uint8_t road = 0, sidewalk = 1, building = 2, vegetation = 3, vehicle = 4, sky = 5;
}

inline std::vector<std::string> class_names(std::size_t num_classes) {
  static const std::array<const char*, 19> names{
      "road",   "sidewalk", "building", "vegetation", "vehicle", "sky",   "pole",       "traffic_light", "traffic_sign",
      "terrain", "person",  "rider",    "truck",      "bus",     "train", "motorcycle", "bicycle",       "wall",
      "fence"};
  detail::require(num_classes <= names.size(), "class_names: at most 19 classes");
  return {names.begin(), names.begin() + static_cast<std::ptrdiff_t>(num_classes)};
}

inline constexpr std::array<double, 3> kImageNetMean{0.485, 0.456, 0.406};
inline constexpr std::array<double, 3> kImageNetStd{0.229, 0.224, 0.225};

struct SceneSample {
  std::string id;
  std::size_t height = 0, width = 0;
  std::vector<float> image;  // H x W x 3 in [0, 1]
  std::vector<std::uint8_t> labels;  // H x W

  bool operator==(const SceneSample&) const = default;
};

inline std::string sample_id(std::uint64_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "scene_%07llu", static_cast<unsigned long long>(index));
  return buf;
}

namespace detail {

inline std::array<double, 3> base_color(std::size_t cls) {
  static const std::array<std::array<double, 3>, 6> palette{{
      {0.33, 0.32, 0.35},  // road
      {0.66, 0.60, 0.56},  // sidewalk
      {0.58, 0.36, 0.28},  // building
      {0.22, 0.50, 0.18},  // vegetation
      {0.12, 0.18, 0.62},  // vehicle
      {0.55, 0.76, 0.96},  // sky
  }};
  if (cls < palette.size()) return palette[cls];
  Rng rng(0xc0102, cls);
  return {rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9)};
}

// Label and flat colour canvas; layers paint over earlier ones.
struct Canvas {
  std::size_t h, w;
  std::vector<std::uint8_t> labels;
  std::vector<std::array<double, 3>> colors;

  Canvas(std::size_t h_, std::size_t w_) : h(h_), w(w_), labels(h_ * w_, 0), colors(h_ * w_) {}

  template <typename Inside>
  void paint(std::uint8_t cls, const std::array<double, 3>& color, Inside&& inside) {
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x)
        if (inside(static_cast<double>(y) + 0.5, static_cast<double>(x) + 0.5)) {
          labels[y * w + x] = cls;
          colors[y * w + x] = color;
        }
  }
};

}  // namespace detail

// Layered road scene: sky band, ground, buildings on the horizon, sidewalk and
// road trapezoids converging to a vanishing point, tree ellipses, vehicles on
// the road and (for more than six classes) small extra objects. A pure
// function of (config, index).
inline SceneSample generate_scene(const SceneConfig& config, std::uint64_t index) {
  config.validate();
  Rng rng(config.seed, index);
  const std::size_t h = config.image_height, w = config.image_width;
  const double H = static_cast<double>(h), W = static_cast<double>(w);
  detail::Canvas canvas(h, w);

  auto color_of = [&](std::size_t cls) {
    auto c = detail::base_color(cls);
    for (std::size_t k = 0; k < 3; ++k) c[k] += rng.normal() * config.color_jitter + config.palette_shift[k];
    return c;
  };

  const double horizon = H * rng.uniform(config.sky_min, config.sky_max);
  canvas.paint(label::sky, color_of(label::sky), [&](double y, double) { return y < horizon; });
  canvas.paint(label::vegetation, color_of(label::vegetation), [&](double y, double) { return y >= horizon; });

  const int buildings = rng.integer(config.buildings_min, config.buildings_max);
  for (int i = 0; i < buildings; ++i) {
    const double left = W * rng.uniform(-0.1, 0.9);
    const double right = left + W * rng.uniform(0.1, 0.3);
    const double top = horizon * rng.uniform(0.15, 0.8);
    const double bottom = horizon + H * rng.uniform(0.0, 0.06);
    canvas.paint(label::building, color_of(label::building),
                 [&](double y, double x) { return x >= left && x < right && y >= top && y < bottom; });
  }

  const double vanish_x = W * rng.uniform(0.35, 0.65);
  const double bottom_x = W * rng.uniform(0.4, 0.6);
  const double top_half = 0.5 * W * rng.uniform(config.road_top_min, config.road_top_max);
  const double bottom_half = 0.5 * W * rng.uniform(config.road_bottom_min, config.road_bottom_max);
  const double walk = W * rng.uniform(config.sidewalk_min, config.sidewalk_max);
  // Road centre and half-width at row y, interpolated from horizon to bottom.
  auto road_at = [&](double y) {
    const double t = std::clamp((y - horizon) / (H - horizon), 0.0, 1.0);
    return std::array<double, 3>{vanish_x + t * (bottom_x - vanish_x), top_half + t * (bottom_half - top_half), t};
  };
  canvas.paint(label::sidewalk, color_of(label::sidewalk), [&](double y, double x) {
    if (y < horizon) return false;
    const auto [cx, half, t] = road_at(y);
    return std::abs(x - cx) < half + walk * (0.25 + 0.75 * t);
  });
  canvas.paint(label::road, color_of(label::road), [&](double y, double x) {
    if (y < horizon) return false;
    const auto [cx, half, t] = road_at(y);
    return std::abs(x - cx) < half;
  });

  const int trees = rng.integer(config.trees_min, config.trees_max);
  for (int i = 0; i < trees; ++i) {
    const bool left_side = rng.uniform() < 0.5;
    const auto mid = road_at(horizon + 0.5 * (H - horizon));
    const double cx0 = mid[0], margin = mid[1] + walk;
    const double cx = left_side ? rng.uniform(0.0, std::max(1.0, cx0 - margin)) : rng.uniform(std::min(W - 1.0, cx0 + margin), W);
    const double cy = horizon + H * rng.uniform(-0.08, 0.12);
    const double rx = W * rng.uniform(0.04, 0.10), ry = H * rng.uniform(0.05, 0.12);
    canvas.paint(label::vegetation, color_of(label::vegetation), [&](double y, double x) {
      const double dy = (y - cy) / ry, dx = (x - cx) / rx;
      return dx * dx + dy * dy < 1.0;
    });
  }

  const int vehicles = rng.integer(config.vehicles_min, config.vehicles_max);
  for (int i = 0; i < vehicles; ++i) {
    const double base = horizon + (H - horizon) * rng.uniform(0.2, 0.95);
    const auto [cx, half, t] = road_at(base);
    const double width = W * rng.uniform(0.08, 0.16) * (0.3 + t);
    const double height = width * rng.uniform(0.5, 0.8);
    const double centre = cx + rng.uniform(-0.6, 0.6) * std::max(0.0, half - 0.5 * width);
    canvas.paint(label::vehicle, color_of(label::vehicle), [&](double y, double x) {
      return y < base && y >= base - height && std::abs(x - centre) < 0.5 * width;
    });
  }

  if (config.num_classes > 6) {
    const int extras = rng.integer(0, config.extra_objects_max);
    for (int i = 0; i < extras; ++i) {
      const auto cls = static_cast<std::uint8_t>(rng.integer(6, static_cast<int>(config.num_classes) - 1));
      const double x0 = W * rng.uniform(0.0, 0.95), y0 = horizon + (H - horizon) * rng.uniform(-0.3, 0.8);
      const double bw = W * rng.uniform(0.02, 0.08), bh = H * rng.uniform(0.05, 0.2);
      canvas.paint(cls, color_of(cls),
                   [&](double y, double x) { return x >= x0 && x < x0 + bw && y >= y0 - bh && y < y0; });
    }
  }

  SceneSample sample{sample_id(index), h, w, std::vector<float>(h * w * 3), std::move(canvas.labels)};
  for (std::size_t i = 0; i < h * w; ++i)
    for (std::size_t k = 0; k < 3; ++k) {
      const double v = std::clamp(canvas.colors[i][k] + rng.normal() * config.noise, 0.0, 1.0);
      // Quantized to 8 bits so PNG storage is lossless.
      sample.image[i * 3 + k] = static_cast<float>(std::round(v * 255.0) / 255.0);
    }
  return sample;
}

// Channel-first ImageNet normalization of an H x W x 3 image in [0, 1].
template <typename T>
std::vector<T> normalize(std::span<const float> image, std::size_t h, std::size_t w) {
  detail::require(image.size() == h * w * 3, "normalize: expected H x W x 3 values");
  std::vector<T> out(3 * h * w);
  for (std::size_t i = 0; i < h * w; ++i)
    for (std::size_t k = 0; k < 3; ++k) {
      const double v = image[i * 3 + k];
#ifndef NDEBUG
      detail::require(v >= 0.0 && v <= 1.0, "normalize: pixel value outside [0, 1]");
#endif
      out[k * h * w + i] = static_cast<T>((v - kImageNetMean[k]) / kImageNetStd[k]);
    }
  return out;
}

struct Splits {
  std::vector<std::uint64_t> train, val;
};

inline constexpr std::uint64_t kValOffset = 1'000'000;

// Train indices [0, n_train), validation [10^6, 10^6 + n_val). Smaller
// training budgets are prefixes of larger ones.
inline Splits make_splits(std::size_t n_train, std::size_t n_val) {
  Splits s;
  for (std::size_t i = 0; i < n_train; ++i) s.train.push_back(i);
  for (std::size_t i = 0; i < n_val; ++i) s.val.push_back(kValOffset + i);
  return s;
}

struct Dataset {
  std::vector<SceneSample> train, val;
};

inline Dataset generate_dataset(const SceneConfig& config, std::size_t n_train, std::size_t n_val) {
  const auto splits = make_splits(n_train, n_val);
  Dataset d;
  for (auto i : splits.train) d.train.push_back(generate_scene(config, i));
  for (auto i : splits.val) d.val.push_back(generate_scene(config, i));
  return d;
}

// 64-bit FNV-1a over ids, labels and pixels; identifies a sample set in logs.
inline std::uint64_t content_hash(const std::vector<SceneSample>& samples) {
  std::uint64_t hash = 0xcbf29ce484222325ULL;
  auto feed = [&hash](const void* data, std::size_t n) {
    const auto* bytes = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) hash = (hash ^ bytes[i]) * 0x100000001b3ULL;
  };
  for (const auto& s : samples) {
    feed(s.id.data(), s.id.size());
    feed(s.labels.data(), s.labels.size());
    feed(s.image.data(), s.image.size() * sizeof(float));
  }
  return hash;
}

inline void save_sample(const std::filesystem::path& dir, const SceneSample& s) {
  Raster rgb{s.width, s.height, 3, std::vector<std::uint8_t>(s.image.size())};
  for (std::size_t i = 0; i < s.image.size(); ++i)
    rgb.pixels[i] = static_cast<std::uint8_t>(std::lround(std::clamp(s.image[i], 0.0f, 1.0f) * 255.0f));
  save_rgb_png((dir / "images" / (s.id + ".png")).string(), rgb);
  save_label_png((dir / "labels" / (s.id + ".png")).string(), Raster{s.width, s.height, 1, s.labels});
}

inline SceneSample load_sample(const std::filesystem::path& dir, const std::string& id) {
  const auto rgb = load_rgb_png((dir / "images" / (id + ".png")).string());
  const auto labels = load_label_png((dir / "labels" / (id + ".png")).string());
  if (rgb.width != labels.width || rgb.height != labels.height)
    throw DataError("sample " + id + ": image and label extents differ");
  SceneSample s{id, rgb.height, rgb.width, std::vector<float>(rgb.pixels.size()), labels.pixels};
  for (std::size_t i = 0; i < rgb.pixels.size(); ++i) s.image[i] = static_cast<float>(rgb.pixels[i] / 255.0);
  return s;
}

// images/<id>.png, labels/<id>.png and manifest.csv (id,split).
inline void write_dataset(const std::filesystem::path& dir, const Dataset& data) {
  std::filesystem::create_directories(dir / "images");
  std::filesystem::create_directories(dir / "labels");
  std::ofstream manifest(dir / "manifest.csv");
  if (!manifest) throw DataError("cannot write " + (dir / "manifest.csv").string());
  manifest << "id,split\n";
  for (const auto& s : data.train) {
    save_sample(dir, s);
    manifest << s.id << ",train\n";
  }
  for (const auto& s : data.val) {
    save_sample(dir, s);
    manifest << s.id << ",val\n";
  }
}

inline Dataset read_dataset(const std::filesystem::path& dir) {
  std::ifstream manifest(dir / "manifest.csv");
  if (!manifest) throw DataError("dataset " + dir.string() + " has no manifest.csv");
  std::string line;
  if (!std::getline(manifest, line) || line != "id,split")
    throw DataError("manifest.csv: expected header 'id,split'");
  Dataset d;
  while (std::getline(manifest, line)) {
    if (line.empty()) continue;
    const auto comma = line.find(',');
    if (comma == std::string::npos) throw DataError("manifest.csv: malformed row '" + line + "'");
    const std::string id = line.substr(0, comma), split = line.substr(comma + 1);
    if (split == "train")
      d.train.push_back(load_sample(dir, id));
    else if (split == "val")
      d.val.push_back(load_sample(dir, id));
    else
      throw DataError("manifest.csv: unknown split '" + split + "'");
  }
  return d;
}

template <typename T>
struct Batch {
  Tensor<T> images;  // B x 3 x H x W, normalized
  LabelBatch labels;
  std::vector<std::string> ids;
};

template <typename T>
Batch<T> make_batch(const std::vector<SceneSample>& samples, std::span<const std::size_t> indices) {
  detail::require(!indices.empty(), "make_batch: empty batch");
  const auto& first = samples.at(indices[0]);
  const std::size_t h = first.height, w = first.width;
  Batch<T> batch;
  batch.labels = LabelBatch{indices.size(), h, w, {}};
  std::vector<T> pixels;
  pixels.reserve(indices.size() * 3 * h * w);
  for (auto i : indices) {
    const auto& s = samples.at(i);
    if (s.height != h || s.width != w) throw DataError("make_batch: samples have different extents");
    const auto norm = normalize<T>(s.image, h, w);
    pixels.insert(pixels.end(), norm.begin(), norm.end());
    batch.labels.values.insert(batch.labels.values.end(), s.labels.begin(), s.labels.end());
    batch.ids.push_back(s.id);
  }
  batch.images = Tensor<T>::from_data({indices.size(), 3, h, w}, std::move(pixels));
  return batch;
}

}  // namespace adsam
