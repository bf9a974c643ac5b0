#pragma once

#include <array>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "adsam/checkpoint.hpp"
#include "adsam/config.hpp"
#include "adsam/deform.hpp"
#include "adsam/fusion.hpp"
#include "adsam/module.hpp"
#include "adsam/nn_ops.hpp"

namespace adsam {

// Source of the frozen global-context features (B x E x H/S x W/S). Providers
// never receive gradients: their outputs are constants of the graph.
template <typename T>
class GlobalFeatureProvider {
 public:
  virtual ~GlobalFeatureProvider() = default;
  virtual Tensor<T> features(const Tensor<T>& image, std::span<const std::string> ids) const = 0;
  virtual bool frozen() const { return true; }
  virtual void collect(ParamList<T>& /*params*/) const {}
};

// Fixed-seed patchify-and-project map: each S x S x 3 patch is projected to
// E channels by weights drawn once from the seed and never updated.
template <typename T>
class RandomPatchEmbedder final : public GlobalFeatureProvider<T> {
 public:
  RandomPatchEmbedder(std::size_t embed, std::size_t stride, std::uint64_t seed) : stride_(stride) {
    Rng rng(seed, 0x9a7c);
    const std::size_t fan_in = 3 * stride * stride;
    const double bound = std::sqrt(3.0 / static_cast<double>(fan_in));
    weight_ = init::uniform<T>({embed, 3, stride, stride}, bound, rng, false);
    bias_ = init::uniform<T>({embed}, 0.1, rng, false);
  }

  Tensor<T> features(const Tensor<T>& image, std::span<const std::string>) const override {
    detail::require(image.rank() == 4 && image.dim(1) == 3, "patch embedder: expected B x 3 x H x W image");
    detail::require(image.dim(2) % stride_ == 0 && image.dim(3) % stride_ == 0,
                    "patch embedder: stride " + std::to_string(stride_) + " does not divide " +
                        shape_str(image.shape()));
    const std::size_t batch = image.dim(0), h = image.dim(2), w = image.dim(3), s = stride_;
    const std::size_t gh = h / s, gw = w / s, embed = weight_.dim(0);
    std::vector<T> out(batch * embed * gh * gw);
    const auto img = image.data();
    const auto wv = weight_.data();
    std::vector<T> patch(3 * s * s);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t gy = 0; gy < gh; ++gy)
        for (std::size_t gx = 0; gx < gw; ++gx) {
          for (std::size_t c = 0; c < 3; ++c)
            for (std::size_t dy = 0; dy < s; ++dy)
              for (std::size_t dx = 0; dx < s; ++dx)
                patch[(c * s + dy) * s + dx] = img[((b * 3 + c) * h + gy * s + dy) * w + gx * s + dx];
          for (std::size_t e = 0; e < embed; ++e) {
            T acc = bias_.data()[e];
            const T* row = wv.data() + e * patch.size();
            for (std::size_t i = 0; i < patch.size(); ++i) acc += row[i] * patch[i];
            out[((b * embed + e) * gh + gy) * gw + gx] = acc;
          }
        }
    return Tensor<T>::from_data({batch, embed, gh, gw}, std::move(out));
  }

  void collect(ParamList<T>& params) const override {
    params.push_back({"provider.weight", weight_, ParamGroup::frozen});
    params.push_back({"provider.bias", bias_, ParamGroup::frozen});
  }

 private:
  std::size_t stride_;
  Tensor<T> weight_;
  Tensor<T> bias_;
};

// Loads precomputed E x Hg x Wg features from `<dir>/<id>.adsm`, an archive
// holding one tensor named "features".
template <typename T>
class FileFeatureProvider final : public GlobalFeatureProvider<T> {
 public:
  FileFeatureProvider(std::filesystem::path dir, std::size_t embed, std::size_t stride)
      : dir_(std::move(dir)), embed_(embed), stride_(stride) {}

  Tensor<T> features(const Tensor<T>& image, std::span<const std::string> ids) const override {
    const std::size_t batch = image.dim(0);
    if (ids.size() != batch) throw DataError("file feature provider needs one sample id per image");
    const Shape expected{embed_, image.dim(2) / stride_, image.dim(3) / stride_};
    std::vector<T> out;
    out.reserve(batch * shape_numel(expected));
    for (const auto& id : ids) {
      const auto path = dir_ / (id + ".adsm");
      if (!std::filesystem::exists(path)) throw DataError("missing feature file " + path.string());
      const auto archive = load_checkpoint(path.string());
      const auto* t = archive.find("features");
      if (!t) throw DataError("feature file " + path.string() + " has no 'features' tensor");
      if (t->shape != expected)
        throw DataError("feature file " + path.string() + " has shape " + shape_str(t->shape) + ", expected " +
                        shape_str(expected));
      for (float v : t->values) out.push_back(static_cast<T>(v));
    }
    return Tensor<T>::from_data({batch, expected[0], expected[1], expected[2]}, std::move(out));
  }

 private:
  std::filesystem::path dir_;
  std::size_t embed_;
  std::size_t stride_;
};

// Convolution (no bias) followed by group normalization.
template <typename T>
struct ConvNorm {
  Tensor<T> weight, gamma, beta;
  std::size_t groups = 1;

  ConvNorm() = default;
  ConvNorm(std::size_t in, std::size_t out, std::size_t kernel, std::size_t groups_, Rng& rng)
      : weight(init::he_normal<T>({out, in, kernel, kernel}, in * kernel * kernel, rng)),
        gamma(init::ones<T>({out})),
        beta(init::zeros<T>({out})),
        groups(groups_) {}

  Tensor<T> operator()(const Tensor<T>& x) const {
    return group_norm(conv2d(x, weight, Tensor<T>{}, 1, weight.dim(2) / 2), groups, gamma, beta);
  }

  void collect(ParamList<T>& params, const std::string& prefix, ParamGroup group) const {
    params.push_back({prefix + ".weight", weight, group});
    params.push_back({prefix + ".gn.gamma", gamma, group});
    params.push_back({prefix + ".gn.beta", beta, group});
  }
};

template <typename T>
struct ResidualBlock {
  ConvNorm<T> first, second;

  ResidualBlock() = default;
  ResidualBlock(std::size_t channels, std::size_t groups, Rng& rng)
      : first(channels, channels, 3, groups, rng), second(channels, channels, 3, groups, rng) {}

  Tensor<T> operator()(const Tensor<T>& x) const { return relu(add(x, second(relu(first(x))))); }

  void collect(ParamList<T>& params, const std::string& prefix, ParamGroup group) const {
    first.collect(params, prefix + ".conv1", group);
    second.collect(params, prefix + ".conv2", group);
  }
};

// Four-stage residual network with outputs at strides 4, 8, 16, 32.
// Downsampling is 2 x 2 average pooling; channel changes use 1 x 1 convs.
template <typename T>
struct LocalBackbone {
  ConvNorm<T> stem1, stem2;
  std::array<ConvNorm<T>, 3> transitions;
  std::array<ResidualBlock<T>, 4> blocks;

  LocalBackbone() = default;
  LocalBackbone(const std::array<std::size_t, 4>& channels, std::size_t groups, Rng& rng)
      : stem1(3, channels[0], 3, groups, rng), stem2(channels[0], channels[0], 3, groups, rng) {
    for (std::size_t i = 0; i < 3; ++i) transitions[i] = ConvNorm<T>(channels[i], channels[i + 1], 1, groups, rng);
    for (std::size_t i = 0; i < 4; ++i) blocks[i] = ResidualBlock<T>(channels[i], groups, rng);
  }

  std::vector<Tensor<T>> operator()(const Tensor<T>& image) const {
    detail::require(image.rank() == 4 && image.dim(2) % 32 == 0 && image.dim(3) % 32 == 0,
                    "local backbone: image extents must be divisible by 32, got " + shape_str(image.shape()));
    auto x = avg_pool2d(relu(stem1(image)), 2);
    x = avg_pool2d(relu(stem2(x)), 2);
    std::vector<Tensor<T>> scales;
    scales.push_back(blocks[0](x));
    for (std::size_t i = 0; i < 3; ++i) {
      x = relu(transitions[i](avg_pool2d(scales.back(), 2)));
      scales.push_back(blocks[i + 1](x));
    }
    return scales;
  }

  void collect(ParamList<T>& params, const std::string& prefix, ParamGroup group) const {
    stem1.collect(params, prefix + ".stem1", group);
    stem2.collect(params, prefix + ".stem2", group);
    for (std::size_t i = 0; i < 3; ++i) transitions[i].collect(params, prefix + ".transition" + std::to_string(i + 2), group);
    for (std::size_t i = 0; i < 4; ++i) blocks[i].collect(params, prefix + ".stage" + std::to_string(i + 1), group);
  }
};

// Deformable conv -> group norm -> GELU -> dropout; offsets come from the
// stage's own input.
template <typename T>
struct DecoderStage {
  DeformConvLayer<T> conv;
  Tensor<T> gamma, beta;
  std::size_t groups = 1;

  DecoderStage() = default;
  DecoderStage(std::size_t in, std::size_t out, std::size_t groups_, Rng& rng)
      : conv(in, out, rng), gamma(init::ones<T>({out})), beta(init::zeros<T>({out})), groups(groups_) {
    detail::require(out % groups_ == 0, "decoder stage: " + std::to_string(groups_) + " groups do not divide " +
                                            std::to_string(out) + " channels");
  }

  Tensor<T> operator()(const Tensor<T>& x, double dropout_rate, bool training, Rng& rng) const {
    return dropout(gelu(group_norm(conv(x), groups, gamma, beta)), dropout_rate, training, rng);
  }

  void collect(ParamList<T>& params, const std::string& prefix, ParamGroup group) const {
    conv.collect(params, prefix + ".conv", group);
    params.push_back({prefix + ".gn.gamma", gamma, group});
    params.push_back({prefix + ".gn.beta", beta, group});
  }
};

// Named tensor shapes of one forward pass, in execution order.
struct ShapeTrace {
  std::vector<std::pair<std::string, Shape>> entries;

  void record(std::string name, Shape shape) { entries.emplace_back(std::move(name), std::move(shape)); }

  const Shape* find(const std::string& name) const {
    for (const auto& [n, s] : entries)
      if (n == name) return &s;
    return nullptr;
  }
};

// Shape arithmetic of the full network without evaluating it; uses the same
// shape rules as the kernels.
inline ShapeTrace trace_shapes(const ModelConfig& config, std::size_t batch = 1) {
  config.validate();
  ShapeTrace trace;
  const std::size_t h = config.image_height, w = config.image_width, e = config.embed_dim;
  const Shape image{batch, 3, h, w};
  trace.record("image", image);
  const Shape global{batch, e, h / config.global_stride, w / config.global_stride};
  trace.record("global_features", global);
  const auto channels = config.backbone_channels();
  for (std::size_t i = 0; i < 4; ++i) {
    const std::size_t stride = std::size_t{4} << i;
    trace.record("local_" + std::to_string(i + 1), {batch, channels[i], h / stride, w / stride});
  }
  for (std::size_t i = 0; i < 4; ++i) {
    const Shape local{batch, channels[i], h >> (i + 2), w >> (i + 2)};
    const Shape projected = conv2d_output_shape(local, {e, channels[i], 1, 1}, 1, 0);
    trace.record("aligned_" + std::to_string(i + 1), {batch, projected[1], global[2], global[3]});
    const Shape fused = deform_conv2d_output_shape({batch, 2 * e, global[2], global[3]}, {e, 2 * e, 3, 3});
    trace.record("fused_" + std::to_string(i + 1), fused);
  }
  const auto widths = config.decoder_widths();
  Shape x{batch, widths[0], global[2], global[3]};
  trace.record("concat", x);
  for (std::size_t i = 0; i < 3; ++i) {
    x = deform_conv2d_output_shape(x, {widths[i + 1], widths[i], 3, 3});
    trace.record("decoder_" + std::to_string(i + 1), x);
  }
  x = deform_conv2d_output_shape(x, {config.num_classes, widths[3], 3, 3});
  trace.record("head", x);
  trace.record("logits", {batch, config.num_classes, h, w});
  return trace;
}

template <typename T>
std::unique_ptr<GlobalFeatureProvider<T>> make_provider(const ModelConfig& config) {
  if (config.provider == "file")
    return std::make_unique<FileFeatureProvider<T>>(config.feature_dir, config.embed_dim, config.global_stride);
  return std::make_unique<RandomPatchEmbedder<T>>(config.embed_dim, config.global_stride, config.provider_seed);
}

// Frozen global provider + trainable local backbone, four per-scale fusion
// blocks, concatenation to 4E channels in scale order (1/4, 1/8, 1/16, 1/32),
// three deformable decoder stages and a deformable class head. Logits are
// resized from the global grid to the input resolution.
template <typename T>
class AdSamModel {
 public:
  explicit AdSamModel(ModelConfig config, std::unique_ptr<GlobalFeatureProvider<T>> provider = nullptr)
      : config_(std::move(config)), dropout_rng_(config_.init_seed, 0xd80) {
    config_.validate();
    provider_ = provider ? std::move(provider) : make_provider<T>(config_);
    Rng rng(config_.init_seed);
    const auto channels = config_.backbone_channels();
    backbone_ = LocalBackbone<T>(channels, config_.backbone_groups, rng);
    for (std::size_t i = 0; i < 4; ++i)
      fusion_[i] = ScaleFusionBlock<T>(channels[i], config_.embed_dim, config_.attention_reduction, rng);
    const auto widths = config_.decoder_widths();
    for (std::size_t i = 0; i < 3; ++i)
      decoder_[i] = DecoderStage<T>(widths[i], widths[i + 1], config_.decoder_groups[i], rng);
    head_ = DeformConvLayer<T>(widths[3], config_.num_classes, rng);
  }

  const ModelConfig& config() const { return config_; }
  const GlobalFeatureProvider<T>& provider() const { return *provider_; }
  const LocalBackbone<T>& backbone() const { return backbone_; }
  const ScaleFusionBlock<T>& fusion(std::size_t scale) const { return fusion_.at(scale); }
  const DecoderStage<T>& decoder(std::size_t stage) const { return decoder_.at(stage); }
  const DeformConvLayer<T>& head() const { return head_; }

  void reseed_dropout(std::uint64_t seed) { dropout_rng_ = Rng(seed, 0xd80); }

  Tensor<T> global_features(const Tensor<T>& image, std::span<const std::string> ids = {}) const {
    detail::require(image.rank() == 4 && image.dim(2) % config_.global_stride == 0 &&
                        image.dim(3) % config_.global_stride == 0,
                    "global features: stride " + std::to_string(config_.global_stride) + " does not divide " +
                        shape_str(image.shape()));
    auto features = provider_->features(image, ids);
    detail::require(!features.requires_grad(), "global feature provider must be frozen");
    return features;
  }

  std::vector<Tensor<T>> local_features(const Tensor<T>& image) const { return backbone_(image); }

  Tensor<T> decoder_stage(const Tensor<T>& x, std::size_t stage, bool training) {
    return decoder_.at(stage)(x, config_.dropout, training, dropout_rng_);
  }

  // Raw logits B x C x H x W.
  Tensor<T> forward(const Tensor<T>& image, bool training, std::span<const std::string> ids = {},
                    ShapeTrace* trace = nullptr) {
    detail::require(image.rank() == 4 && image.dim(1) == 3, "forward: expected B x 3 x H x W image, got " +
                                                                shape_str(image.shape()));
    auto note = [trace](const std::string& name, const Tensor<T>& t) {
      if (trace) trace->record(name, t.shape());
    };
    note("image", image);
    const auto global = global_features(image, ids);
    note("global_features", global);
    const auto locals = local_features(image);
    for (std::size_t i = 0; i < 4; ++i) note("local_" + std::to_string(i + 1), locals[i]);
    std::vector<Tensor<T>> fused;
    for (std::size_t i = 0; i < 4; ++i) {
      const auto aligned = fusion_[i].project_and_align(locals[i], global.dim(2), global.dim(3));
      note("aligned_" + std::to_string(i + 1), aligned);
      fused.push_back(fusion_[i].fuse_scale(global, aligned));
      note("fused_" + std::to_string(i + 1), fused.back());
    }
    auto x = concat_channels(fused);
    note("concat", x);
    for (std::size_t i = 0; i < 3; ++i) {
      x = decoder_stage(x, i, training);
      note("decoder_" + std::to_string(i + 1), x);
    }
    x = head_(x);
    note("head", x);
    auto logits = bilinear_resize(x, image.dim(2), image.dim(3));
    note("logits", logits);
    return logits;
  }

  // All parameters, provider first (group frozen).
  ParamList<T> parameters() const {
    ParamList<T> params;
    provider_->collect(params);
    backbone_.collect(params, "backbone", ParamGroup::backbone);
    for (std::size_t i = 0; i < 4; ++i) fusion_[i].collect(params, "fusion" + std::to_string(i + 1), ParamGroup::head);
    for (std::size_t i = 0; i < 3; ++i) decoder_[i].collect(params, "decoder" + std::to_string(i + 1), ParamGroup::head);
    head_.collect(params, "head", ParamGroup::head);
    return params;
  }

  ParamList<T> trainable_parameters() const {
    ParamList<T> out;
    for (auto& p : parameters())
      if (p.group != ParamGroup::frozen) out.push_back(p);
    return out;
  }

  Checkpoint to_checkpoint(std::string config_text) const { return make_checkpoint(parameters(), std::move(config_text)); }

  void load(const Checkpoint& checkpoint) {
    auto params = parameters();
    restore_parameters(checkpoint, params);
  }

 private:
  ModelConfig config_;
  Rng dropout_rng_;
  std::unique_ptr<GlobalFeatureProvider<T>> provider_;
  LocalBackbone<T> backbone_;
  std::array<ScaleFusionBlock<T>, 4> fusion_;
  std::array<DecoderStage<T>, 3> decoder_;
  DeformConvLayer<T> head_;
};

}  // namespace adsam
