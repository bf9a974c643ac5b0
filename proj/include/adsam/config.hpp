#pragma once

#include <algorithm>
#include <array>
#include <charconv>
#include <cstdint>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <string_view>
#include <tuple>
#include <type_traits>
#include <vector>

#include "adsam/errors.hpp"
#include "adsam/random.hpp"

namespace adsam {

struct ModelConfig {
  std::size_t num_classes = 19;
  std::size_t embed_dim = 256;
  std::size_t global_stride = 16;
  // Multiplies the 256/512/1024/2048 backbone channel counts.
  double backbone_width = 1.0;
  std::size_t backbone_groups = 32;
  std::array<std::size_t, 3> decoder_groups{32, 16, 8};
  std::size_t attention_reduction = 16;
  double dropout = 0.1;
  std::size_t image_height = 1024;
  std::size_t image_width = 1024;
  std::string provider = "random";
  std::uint64_t provider_seed = 2023;
  std::string feature_dir;
  std::uint64_t init_seed = 7;

  std::array<std::size_t, 4> backbone_channels() const {
    std::array<std::size_t, 4> out{};
    const std::array<double, 4> base{256, 512, 1024, 2048};
    for (std::size_t i = 0; i < 4; ++i) out[i] = static_cast<std::size_t>(base[i] * backbone_width + 0.5);
    return out;
  }

  // Concat width followed by the three decoder stage outputs: 4E, E, E/2, E/4.
  std::array<std::size_t, 4> decoder_widths() const {
    return {4 * embed_dim, embed_dim, embed_dim / 2, embed_dim / 4};
  }

  std::size_t grid_height() const { return image_height / global_stride; }
  std::size_t grid_width() const { return image_width / global_stride; }

  void validate() const {
    auto fail = [](const std::string& m) { throw ConfigError(m); };
    if (num_classes < 2 || num_classes > 254) fail("num_classes must lie in [2, 254]");
    if (embed_dim < 4 || embed_dim % 4 != 0) fail("embed_dim must be a positive multiple of 4");
    if (global_stride == 0) fail("global_stride must be positive");
    if (image_height % 32 != 0 || image_width % 32 != 0 || image_height == 0 || image_width == 0)
      fail("image extents must be positive multiples of 32");
    if (image_height % global_stride != 0 || image_width % global_stride != 0)
      fail("global_stride must divide the image extents");
    if (attention_reduction == 0 || embed_dim % attention_reduction != 0)
      fail("attention_reduction must divide embed_dim");
    if (dropout < 0.0 || dropout >= 1.0) fail("dropout must lie in [0, 1)");
    if (backbone_width <= 0.0) fail("backbone_width must be positive");
    for (auto c : backbone_channels()) {
      if (c == 0 || backbone_groups == 0 || c % backbone_groups != 0)
        fail("backbone_groups must divide every backbone channel count");
    }
    const auto widths = decoder_widths();
    for (std::size_t i = 0; i < 3; ++i) {
      if (decoder_groups[i] == 0 || widths[i + 1] % decoder_groups[i] != 0)
        fail("decoder group count " + std::to_string(decoder_groups[i]) + " does not divide stage width " +
             std::to_string(widths[i + 1]));
    }
    if (provider != "random" && provider != "file") fail("provider must be 'random' or 'file'");
    if (provider == "file" && feature_dir.empty()) fail("provider 'file' needs feature_dir");
  }

  // 1024 x 1024 input, E = 256, 19 classes, full ResNet-50 channel layout.
  static ModelConfig paper() { return ModelConfig{}; }

  // 128 x 128 input, E = 32, 6 classes, 32 x 32 global grid (S = 4); backbone
  // widths scaled by 1/16 and decoder groups chosen so each decoder
  // normalization group keeps 8 channels as in the full model.
  static ModelConfig desk() {
    ModelConfig c;
    c.num_classes = 6;
    c.embed_dim = 32;
    c.global_stride = 4;
    c.backbone_width = 1.0 / 16.0;
    c.backbone_groups = 8;
    c.decoder_groups = {4, 2, 1};
    c.attention_reduction = 16;
    c.image_height = 128;
    c.image_width = 128;
    return c;
  }
};

struct TrainConfig {
  std::size_t epochs = 100;
  std::size_t batch_size = 2;
  double base_lr = 2e-4;
  double weight_decay = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double backbone_lr_mult = 0.1;
  double head_lr_mult = 1.0;
  std::uint64_t seed = 0;
  std::size_t eval_batch_size = 4;
  // 32 for training; 64 selects double precision end to end.
  int precision = 32;

  void validate() const {
    auto fail = [](const std::string& m) { throw ConfigError(m); };
    if (epochs == 0) fail("epochs must be positive");
    if (batch_size == 0 || eval_batch_size == 0) fail("batch sizes must be positive");
    if (base_lr < 0.0 || weight_decay < 0.0) fail("learning rate and weight decay must be non-negative");
    if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0) fail("AdamW betas must lie in [0, 1)");
    if (adam_eps <= 0.0) fail("adam_eps must be positive");
    if (precision != 32 && precision != 64) fail("precision must be 32 or 64");
  }
};

struct SceneConfig {
  std::size_t num_classes = 6;
  std::size_t image_height = 128;
  std::size_t image_width = 128;
  std::uint64_t seed = 11;
  double sky_min = 0.22;
  double sky_max = 0.40;
  double road_top_min = 0.04;
  double road_top_max = 0.16;
  double road_bottom_min = 0.55;
  double road_bottom_max = 0.95;
  double sidewalk_min = 0.06;
  double sidewalk_max = 0.14;
  int buildings_min = 1;
  int buildings_max = 4;
  int trees_min = 0;
  int trees_max = 3;
  int vehicles_min = 0;
  int vehicles_max = 3;
  int extra_objects_max = 2;
  double noise = 0.04;
  double color_jitter = 0.05;
  std::array<double, 3> palette_shift{0.0, 0.0, 0.0};
  std::size_t val_count = 50;

  void validate() const {
    auto fail = [](const std::string& m) { throw ConfigError(m); };
    if (num_classes < 6 || num_classes > 19) fail("scene generator supports 6 to 19 classes");
    if (image_height < 32 || image_width < 32) fail("scene extents must be at least 32");
    if (!(0.0 < sky_min && sky_min <= sky_max && sky_max < 0.8)) fail("sky band range invalid");
    if (!(0.0 < road_top_min && road_top_min <= road_top_max && road_top_max <= 1.0)) fail("road top range invalid");
    if (!(0.0 < road_bottom_min && road_bottom_min <= road_bottom_max && road_bottom_max <= 1.5))
      fail("road bottom range invalid");
    if (!(0.0 <= sidewalk_min && sidewalk_min <= sidewalk_max)) fail("sidewalk range invalid");
    if (buildings_min < 0 || buildings_min > buildings_max || trees_min < 0 || trees_min > trees_max ||
        vehicles_min < 0 || vehicles_min > vehicles_max || extra_objects_max < 0)
      fail("object count ranges invalid");
    if (noise < 0.0 || color_jitter < 0.0) fail("noise amplitudes must be non-negative");
  }
};

// Everything a run needs, round-trippable through the flat key-value format.
struct RunConfig {
  ModelConfig model = ModelConfig::desk();
  TrainConfig train;
  SceneConfig scene;

  void validate() const {
    model.validate();
    train.validate();
    scene.validate();
  }
};

namespace detail {

inline std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

template <typename V>
V parse_number(std::string_view key, std::string_view text) {
  V value{};
  if constexpr (std::is_floating_point_v<V>) {
    // from_chars for floating point is incomplete in some standard libraries.
    std::string owned(text);
    std::size_t used = 0;
    try {
      value = static_cast<V>(std::stod(owned, &used));
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != owned.size() || owned.empty())
      throw ConfigError("config key '" + std::string(key) + "': not a number: '" + owned + "'");
  } else {
    const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
    if (ec != std::errc() || ptr != text.data() + text.size())
      throw ConfigError("config key '" + std::string(key) + "': not an integer: '" + std::string(text) + "'");
  }
  return value;
}

template <typename V>
std::string format_value(const V& v) {
  if constexpr (std::is_arithmetic_v<V>) {
    // Shortest text that parses back to the same value.
    char buf[64];
    const auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, end);
  } else {
    std::ostringstream out;
    out << v;
    return out.str();
  }
}

template <typename V, std::size_t N>
std::array<V, N> parse_list(std::string_view key, std::string_view text) {
  std::array<V, N> out{};
  std::size_t i = 0;
  while (true) {
    const auto comma = text.find(',');
    const auto item = trim(text.substr(0, comma));
    if (i >= N) throw ConfigError("config key '" + std::string(key) + "': expected " + std::to_string(N) + " values");
    out[i++] = parse_number<V>(key, item);
    if (comma == std::string_view::npos) break;
    text.remove_prefix(comma + 1);
  }
  if (i != N) throw ConfigError("config key '" + std::string(key) + "': expected " + std::to_string(N) + " values");
  return out;
}

template <typename V, std::size_t N>
std::string format_list(const std::array<V, N>& values) {
  std::string out;
  for (std::size_t i = 0; i < N; ++i) out += (i ? "," : "") + format_value(values[i]);
  return out;
}

struct ConfigField {
  std::string key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, std::string_view)> set;
};

inline const std::vector<ConfigField>& config_fields() {
  static const std::vector<ConfigField> fields = [] {
    std::vector<ConfigField> f;
    auto number = [&f](std::string key, auto accessor) {
      using V = std::remove_reference_t<decltype(accessor(std::declval<RunConfig&>()))>;
      f.push_back({key, [accessor](const RunConfig& c) { return format_value(accessor(const_cast<RunConfig&>(c))); },
                   [accessor, key](RunConfig& c, std::string_view v) { accessor(c) = parse_number<V>(key, v); }});
    };
    auto text = [&f](std::string key, auto accessor) {
      f.push_back({key, [accessor](const RunConfig& c) { return accessor(const_cast<RunConfig&>(c)); },
                   [accessor](RunConfig& c, std::string_view v) { accessor(c) = std::string(v); }});
    };
    auto list = [&f](std::string key, auto accessor) {
      using A = std::remove_reference_t<decltype(accessor(std::declval<RunConfig&>()))>;
      using V = typename A::value_type;
      constexpr std::size_t n = std::tuple_size_v<A>;
      f.push_back({key, [accessor](const RunConfig& c) { return format_list(accessor(const_cast<RunConfig&>(c))); },
                   [accessor, key](RunConfig& c, std::string_view v) { accessor(c) = parse_list<V, n>(key, v); }});
    };

    // Shared by model and scene generator.
    f.push_back({"num_classes", [](const RunConfig& c) { return format_value(c.model.num_classes); },
                 [](RunConfig& c, std::string_view v) {
                   c.model.num_classes = c.scene.num_classes = parse_number<std::size_t>("num_classes", v);
                 }});
    f.push_back({"image_height", [](const RunConfig& c) { return format_value(c.model.image_height); },
                 [](RunConfig& c, std::string_view v) {
                   c.model.image_height = c.scene.image_height = parse_number<std::size_t>("image_height", v);
                 }});
    f.push_back({"image_width", [](const RunConfig& c) { return format_value(c.model.image_width); },
                 [](RunConfig& c, std::string_view v) {
                   c.model.image_width = c.scene.image_width = parse_number<std::size_t>("image_width", v);
                 }});

    number("embed_dim", [](RunConfig& c) -> auto& { return c.model.embed_dim; });
    number("global_stride", [](RunConfig& c) -> auto& { return c.model.global_stride; });
    number("backbone_width", [](RunConfig& c) -> auto& { return c.model.backbone_width; });
    number("backbone_groups", [](RunConfig& c) -> auto& { return c.model.backbone_groups; });
    list("decoder_groups", [](RunConfig& c) -> auto& { return c.model.decoder_groups; });
    number("attention_reduction", [](RunConfig& c) -> auto& { return c.model.attention_reduction; });
    number("dropout", [](RunConfig& c) -> auto& { return c.model.dropout; });
    text("provider", [](RunConfig& c) -> auto& { return c.model.provider; });
    number("provider_seed", [](RunConfig& c) -> auto& { return c.model.provider_seed; });
    text("feature_dir", [](RunConfig& c) -> auto& { return c.model.feature_dir; });
    number("init_seed", [](RunConfig& c) -> auto& { return c.model.init_seed; });

    number("epochs", [](RunConfig& c) -> auto& { return c.train.epochs; });
    number("batch_size", [](RunConfig& c) -> auto& { return c.train.batch_size; });
    number("base_lr", [](RunConfig& c) -> auto& { return c.train.base_lr; });
    number("weight_decay", [](RunConfig& c) -> auto& { return c.train.weight_decay; });
    number("beta1", [](RunConfig& c) -> auto& { return c.train.beta1; });
    number("beta2", [](RunConfig& c) -> auto& { return c.train.beta2; });
    number("adam_eps", [](RunConfig& c) -> auto& { return c.train.adam_eps; });
    number("backbone_lr_mult", [](RunConfig& c) -> auto& { return c.train.backbone_lr_mult; });
    number("head_lr_mult", [](RunConfig& c) -> auto& { return c.train.head_lr_mult; });
    number("seed", [](RunConfig& c) -> auto& { return c.train.seed; });
    number("eval_batch_size", [](RunConfig& c) -> auto& { return c.train.eval_batch_size; });
    number("precision", [](RunConfig& c) -> auto& { return c.train.precision; });

    number("scene_seed", [](RunConfig& c) -> auto& { return c.scene.seed; });
    number("sky_min", [](RunConfig& c) -> auto& { return c.scene.sky_min; });
    number("sky_max", [](RunConfig& c) -> auto& { return c.scene.sky_max; });
    number("road_top_min", [](RunConfig& c) -> auto& { return c.scene.road_top_min; });
    number("road_top_max", [](RunConfig& c) -> auto& { return c.scene.road_top_max; });
    number("road_bottom_min", [](RunConfig& c) -> auto& { return c.scene.road_bottom_min; });
    number("road_bottom_max", [](RunConfig& c) -> auto& { return c.scene.road_bottom_max; });
    number("sidewalk_min", [](RunConfig& c) -> auto& { return c.scene.sidewalk_min; });
    number("sidewalk_max", [](RunConfig& c) -> auto& { return c.scene.sidewalk_max; });
    number("buildings_min", [](RunConfig& c) -> auto& { return c.scene.buildings_min; });
    number("buildings_max", [](RunConfig& c) -> auto& { return c.scene.buildings_max; });
    number("trees_min", [](RunConfig& c) -> auto& { return c.scene.trees_min; });
    number("trees_max", [](RunConfig& c) -> auto& { return c.scene.trees_max; });
    number("vehicles_min", [](RunConfig& c) -> auto& { return c.scene.vehicles_min; });
    number("vehicles_max", [](RunConfig& c) -> auto& { return c.scene.vehicles_max; });
    number("extra_objects_max", [](RunConfig& c) -> auto& { return c.scene.extra_objects_max; });
    number("noise", [](RunConfig& c) -> auto& { return c.scene.noise; });
    number("color_jitter", [](RunConfig& c) -> auto& { return c.scene.color_jitter; });
    list("palette_shift", [](RunConfig& c) -> auto& { return c.scene.palette_shift; });
    number("val_count", [](RunConfig& c) -> auto& { return c.scene.val_count; });
    return f;
  }();
  return fields;
}

}  // namespace detail

// Parses "key = value" lines; '#' starts a comment. Keys not listed in the
// config schema are rejected. Missing keys keep their defaults.
inline RunConfig parse_config(std::string_view text, RunConfig base = RunConfig{}) {
  const auto& fields = detail::config_fields();
  std::size_t line_no = 0;
  while (!text.empty()) {
    const auto eol = text.find('\n');
    std::string_view line = text.substr(0, eol);
    text = eol == std::string_view::npos ? std::string_view{} : text.substr(eol + 1);
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos)
      throw ConfigError("config line " + std::to_string(line_no) + ": expected 'key = value'");
    const auto key = detail::trim(line.substr(0, eq));
    const auto value = detail::trim(line.substr(eq + 1));
    const auto it = std::find_if(fields.begin(), fields.end(), [&](const auto& f) { return f.key == key; });
    if (it == fields.end()) throw ConfigError("config line " + std::to_string(line_no) + ": unknown key '" +
                                              std::string(key) + "'");
    it->set(base, value);
  }
  base.validate();
  return base;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path);
  std::stringstream buffer;
  buffer << in.rdbuf();
  return parse_config(buffer.str());
}

// Every key with its current value; parse_config(to_text(c)) == c.
inline std::string to_text(const RunConfig& config) {
  std::string out = std::string("# rng = ") + kRngName + "\n";
  for (const auto& field : detail::config_fields()) out += field.key + " = " + field.get(config) + "\n";
  return out;
}

}  // namespace adsam
