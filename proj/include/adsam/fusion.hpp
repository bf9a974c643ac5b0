#pragma once

#include <string>

#include "adsam/deform.hpp"
#include "adsam/module.hpp"
#include "adsam/nn_ops.hpp"

namespace adsam {

// Shared two-layer bottleneck applied to the average- and max-pooled channel
// descriptors; the two paths are summed before the sigmoid:
//
//   a = sigmoid(MLP(avgpool(x)) + MLP(maxpool(x))),  MLP = FC2(ReLU(FC1(.)))
//
// FC weights are stored input-major (E x E/r, E/r x E).
template <typename T>
struct ChannelAttention {
  Tensor<T> fc1_weight, fc1_bias, fc2_weight, fc2_bias;

  ChannelAttention() = default;
  ChannelAttention(std::size_t channels, std::size_t reduction, Rng& rng) {
    detail::require(reduction >= 1 && channels % reduction == 0,
                    "channel attention: reduction ratio " + std::to_string(reduction) + " does not divide " +
                        std::to_string(channels) + " channels");
    const std::size_t hidden = channels / reduction;
    fc1_weight = init::he_normal<T>({channels, hidden}, channels, rng);
    fc1_bias = init::zeros<T>({hidden});
    fc2_weight = init::uniform<T>({hidden, channels}, 1.0 / std::sqrt(static_cast<double>(hidden)), rng);
    fc2_bias = init::zeros<T>({channels});
  }

  std::size_t channels() const { return fc1_weight.dim(0); }

  Tensor<T> mlp(const Tensor<T>& v) const {
    return add_bias(matmul(relu(add_bias(matmul(v, fc1_weight), fc1_bias)), fc2_weight), fc2_bias);
  }

  // B x E attention weights in (0, 1).
  Tensor<T> weights(const Tensor<T>& x) const {
    detail::require(x.rank() == 4 && x.dim(1) == channels(),
                    "channel attention: expected " + std::to_string(channels()) + " channels, got " +
                        shape_str(x.shape()));
    const Shape pooled{x.dim(0), x.dim(1)};
    const auto avg = reshape(global_pool(x, PoolKind::average), pooled);
    const auto peak = reshape(global_pool(x, PoolKind::maximum), pooled);
    return sigmoid(add(mlp(avg), mlp(peak)));
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return channel_scale(x, weights(x)); }

  void collect(ParamList<T>& params, const std::string& prefix, ParamGroup group) const {
    params.push_back({prefix + ".fc1.weight", fc1_weight, group});
    params.push_back({prefix + ".fc1.bias", fc1_bias, group});
    params.push_back({prefix + ".fc2.weight", fc2_weight, group});
    params.push_back({prefix + ".fc2.bias", fc2_bias, group});
  }
};

template <typename T>
Tensor<T> channel_attention(const Tensor<T>& x, const ChannelAttention<T>& params) {
  return params(x);
}

// Aligns one backbone scale to the global grid and fuses it with the global
// features: 1x1 projection -> bilinear resize -> concat(global, local) ->
// deformable 3x3 conv (2E -> E) -> channel attention.
template <typename T>
struct ScaleFusionBlock {
  Tensor<T> proj_weight, proj_bias;
  DeformConvLayer<T> fuse;
  ChannelAttention<T> attention;

  ScaleFusionBlock() = default;
  ScaleFusionBlock(std::size_t local_channels, std::size_t embed, std::size_t reduction, Rng& rng)
      : proj_weight(init::he_normal<T>({embed, local_channels, 1, 1}, local_channels, rng)),
        proj_bias(init::zeros<T>({embed})),
        fuse(2 * embed, embed, rng),
        attention(embed, reduction, rng) {}

  std::size_t local_channels() const { return proj_weight.dim(1); }
  std::size_t embed() const { return proj_weight.dim(0); }

  Tensor<T> project_and_align(const Tensor<T>& local, std::size_t grid_h, std::size_t grid_w) const {
    detail::require(local.rank() == 4 && local.dim(1) == local_channels(),
                    "project_and_align: block expects " + std::to_string(local_channels()) +
                        " local channels, got " + shape_str(local.shape()));
    return bilinear_resize(conv2d(local, proj_weight, proj_bias), grid_h, grid_w);
  }

  Tensor<T> fuse_scale(const Tensor<T>& global, const Tensor<T>& aligned_local) const {
    detail::require(global.rank() == 4 && global.shape() == aligned_local.shape() && global.dim(1) == embed(),
                    "fuse_scale: global " + shape_str(global.shape()) + " and local " +
                        shape_str(aligned_local.shape()) + " must both be B x E x Hg x Wg");
    return attention(fuse(concat_channels<T>({global, aligned_local})));
  }

  Tensor<T> operator()(const Tensor<T>& global, const Tensor<T>& local) const {
    return fuse_scale(global, project_and_align(local, global.dim(2), global.dim(3)));
  }

  void collect(ParamList<T>& params, const std::string& prefix, ParamGroup group) const {
    params.push_back({prefix + ".proj.weight", proj_weight, group});
    params.push_back({prefix + ".proj.bias", proj_bias, group});
    fuse.collect(params, prefix + ".fuse", group);
    attention.collect(params, prefix + ".attention", group);
  }
};

}  // namespace adsam
