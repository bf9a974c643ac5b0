#include <filesystem>

#include "test_support.hpp"

using namespace adsam;
using namespace adsam::oracle;

namespace {

ModelConfig tiny_config() {
  ModelConfig c = ModelConfig::desk();
  c.image_height = 64;
  c.image_width = 64;
  c.embed_dim = 16;
  c.decoder_groups = {2, 2, 1};
  c.attention_reduction = 4;
  return c;
}

}  // namespace

TEST(ChannelAttention, MatchesHandComputedMlp) {
  Rng rng(1);
  ChannelAttention<double> att(4, 2, rng);
  auto x = random_tensor({1, 4, 2, 2}, rng, -1, 1, false);
  const auto a = att.weights(x);
  auto mlp = [&](const std::vector<double>& v) {
    std::vector<double> hidden(2), out(4);
    for (std::size_t j = 0; j < 2; ++j) {
      double s = att.fc1_bias.data()[j];
      for (std::size_t i = 0; i < 4; ++i) s += v[i] * att.fc1_weight.at({i, j});
      hidden[j] = std::max(0.0, s);
    }
    for (std::size_t j = 0; j < 4; ++j) {
      double s = att.fc2_bias.data()[j];
      for (std::size_t i = 0; i < 2; ++i) s += hidden[i] * att.fc2_weight.at({i, j});
      out[j] = s;
    }
    return out;
  };
  std::vector<double> avg(4), peak(4, -1e9);
  for (std::size_t c = 0; c < 4; ++c)
    for (std::size_t i = 0; i < 4; ++i) {
      avg[c] += x.data()[c * 4 + i] / 4;
      peak[c] = std::max(peak[c], x.data()[c * 4 + i]);
    }
  const auto ma = mlp(avg), mm = mlp(peak);
  for (std::size_t c = 0; c < 4; ++c) {
    const double expected = 1.0 / (1.0 + std::exp(-(ma[c] + mm[c])));
    EXPECT_NEAR(a.data()[c], expected, 1e-12);
  }
  const auto y = att(x);
  for (std::size_t c = 0; c < 4; ++c)
    for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(y.data()[c * 4 + i], x.data()[c * 4 + i] * a.data()[c], 1e-12);
}

TEST(ChannelAttention, RejectsIndivisibleReduction) {
  Rng rng(1);
  EXPECT_THROW(ChannelAttention<double>(6, 4, rng), ShapeError);
}

TEST(ChannelAttention, GradientMatchesFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(40 + seed);
    ChannelAttention<double> att(4, 2, rng);
    auto x = random_tensor({2, 4, 3, 3}, rng);
    auto fn = [&att](const std::vector<TensorD>& v) {
      ChannelAttention<double> p = att;
      p.fc1_weight = v[1];
      p.fc1_bias = v[2];
      p.fc2_weight = v[3];
      p.fc2_bias = v[4];
      return weighted_sum(channel_attention(v[0], p));
    };
    // Keep hidden pre-activations away from the ReLU kink.
    for (auto& b : att.fc1_bias.mutable_data()) b = 0.3;
    const auto r = grad_check(fn, {x, att.fc1_weight, att.fc1_bias, att.fc2_weight, att.fc2_bias});
    ASSERT_LT(r.max_rel_error, 1e-4) << r.where;
  }
}

TEST(ScaleFusionBlock, AlignsAnyScaleToTheGlobalGrid) {
  Rng rng(2);
  ScaleFusionBlock<double> block(12, 8, 4, rng);
  auto global = random_tensor({2, 8, 4, 4}, rng, -1, 1, false);
  for (std::size_t extent : {16, 8, 4, 2}) {
    auto local = random_tensor({2, 12, extent, extent}, rng, -1, 1, false);
    const auto aligned = block.project_and_align(local, 4, 4);
    EXPECT_EQ(aligned.shape(), (Shape{2, 8, 4, 4}));
    EXPECT_EQ(block(global, local).shape(), (Shape{2, 8, 4, 4}));
  }
  EXPECT_THROW(block.project_and_align(random_tensor({2, 5, 4, 4}, rng), 4, 4), ShapeError);
  EXPECT_THROW(block.fuse_scale(global, random_tensor({2, 8, 2, 2}, rng)), ShapeError);
}

TEST(ScaleFusionBlock, GradientMatchesFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    Rng rng(50 + seed);
    ScaleFusionBlock<double> block(3, 4, 2, rng);
    for (auto& b : block.attention.fc1_bias.mutable_data()) b = 0.3;
    for (auto& v : block.fuse.offset_weight.mutable_data()) v = rng.uniform(-0.1, 0.1);
    auto global = random_tensor({1, 4, 3, 3}, rng);
    auto local = random_tensor({1, 3, 6, 6}, rng);
    auto fn = [&block](const std::vector<TensorD>& v) { return weighted_sum(block(v[0], v[1])); };
    const auto r = grad_check(fn, {global, local});
    ASSERT_LT(r.max_rel_error, 1e-4) << r.where;
  }
}

TEST(Model, PaperShapeTrace) {
  const auto trace = trace_shapes(ModelConfig::paper());
  EXPECT_EQ(*trace.find("global_features"), (Shape{1, 256, 64, 64}));
  EXPECT_EQ(*trace.find("local_1"), (Shape{1, 256, 256, 256}));
  EXPECT_EQ(*trace.find("local_4"), (Shape{1, 2048, 32, 32}));
  EXPECT_EQ(*trace.find("concat"), (Shape{1, 1024, 64, 64}));
  EXPECT_EQ(*trace.find("decoder_1"), (Shape{1, 256, 64, 64}));
  EXPECT_EQ(*trace.find("decoder_2"), (Shape{1, 128, 64, 64}));
  EXPECT_EQ(*trace.find("decoder_3"), (Shape{1, 64, 64, 64}));
  EXPECT_EQ(*trace.find("head"), (Shape{1, 19, 64, 64}));
  EXPECT_EQ(*trace.find("logits"), (Shape{1, 19, 1024, 1024}));
}

TEST(Model, ForwardShapesMatchTheSymbolicTrace) {
  for (const auto& config : {tiny_config(), ModelConfig::desk()}) {
    AdSamModel<float> model(config);
    Rng rng(3);
    auto image = init::uniform<float>({2, 3, config.image_height, config.image_width}, 1.0, rng, false);
    ShapeTrace trace;
    NoGradGuard no_grad;
    model.forward(image, false, {}, &trace);
    EXPECT_EQ(trace.entries, trace_shapes(config, 2).entries);
  }
}

TEST(Model, InvalidConfigsAreRejected) {
  auto c = tiny_config();
  c.image_height = 70;
  EXPECT_THROW(AdSamModel<float>{c}, ConfigError);
  c = tiny_config();
  c.decoder_groups = {3, 2, 1};
  EXPECT_THROW(AdSamModel<float>{c}, ConfigError);
  AdSamModel<float> model(tiny_config());
  EXPECT_THROW(model.forward(Tensor<float>::zeros({1, 3, 48, 64}), false), ShapeError);
  EXPECT_THROW(model.forward(Tensor<float>::zeros({1, 1, 64, 64}), false), ShapeError);
}

TEST(Model, ParameterGroupsCoverTrainableParametersOnce) {
  AdSamModel<float> model(tiny_config());
  const auto all = model.parameters();
  EXPECT_NO_THROW(check_param_groups(all));
  std::size_t frozen = 0, backbone = 0, head = 0;
  for (const auto& p : all) {
    if (p.group == ParamGroup::frozen) {
      ++frozen;
      EXPECT_EQ(p.name.rfind("provider.", 0), 0u);
    } else if (p.group == ParamGroup::backbone) {
      ++backbone;
      EXPECT_EQ(p.name.rfind("backbone.", 0), 0u);
    } else {
      ++head;
    }
  }
  EXPECT_EQ(frozen, 2u);
  EXPECT_GT(backbone, 0u);
  EXPECT_GT(head, 0u);
  EXPECT_EQ(model.trainable_parameters().size(), backbone + head);
}

TEST(Model, ProviderReceivesNoGradient) {
  AdSamModel<double> model(tiny_config());
  Rng rng(4);
  auto image = random_tensor({1, 3, 64, 64}, rng, -1, 1, false);
  backward(mean(model.forward(image, true)));
  for (const auto& p : model.parameters()) {
    if (p.group == ParamGroup::frozen) {
      EXPECT_FALSE(p.tensor.has_grad()) << p.name;
    }
  }
  bool any = false;
  for (const auto& p : model.trainable_parameters()) any = any || p.tensor.has_grad();
  EXPECT_TRUE(any);
}

TEST(Model, EvalForwardIsDeterministic) {
  AdSamModel<float> model(tiny_config());
  Rng rng(5);
  auto image = init::uniform<float>({1, 3, 64, 64}, 1.0, rng, false);
  NoGradGuard no_grad;
  const auto a = model.forward(image, false);
  const auto b = model.forward(image, false);
  EXPECT_TRUE(std::equal(a.data().begin(), a.data().end(), b.data().begin()));
}

TEST(Model, CheckpointRoundTripRestoresOutputsExactly) {
  AdSamModel<float> model(tiny_config());
  Rng rng(6);
  for (const auto& p : model.trainable_parameters()) {
    auto t = p.tensor;
    for (auto& v : t.mutable_data()) v += static_cast<float>(rng.uniform(-0.01, 0.01));
  }
  RunConfig rc;
  rc.model = tiny_config();
  const auto bytes = encode_checkpoint(model.to_checkpoint(to_text(rc)));
  auto restored = load_model<float>(decode_checkpoint(bytes));
  auto image = init::uniform<float>({1, 3, 64, 64}, 1.0, rng, false);
  NoGradGuard no_grad;
  const auto a = model.forward(image, false);
  const auto b = restored.forward(image, false);
  ASSERT_EQ(a.numel(), b.numel());
  for (std::size_t i = 0; i < a.numel(); ++i) ASSERT_EQ(a.data()[i], b.data()[i]);
}

TEST(Checkpoint, RejectsCorruptAndMismatchedArchives) {
  EXPECT_THROW(decode_checkpoint("NOPE"), DataError);
  Checkpoint ck;
  ck.tensors.push_back({"a", {2, 2}, {1, 2, 3, 4}});
  ck.config_text = "embed_dim = 16\n";
  const auto bytes = encode_checkpoint(ck);
  EXPECT_THROW(decode_checkpoint(bytes.substr(0, 20)), DataError);
  const auto back = decode_checkpoint(bytes);
  EXPECT_EQ(back.config_text, ck.config_text);
  EXPECT_EQ(back.tensors[0].values, ck.tensors[0].values);

  ParamList<float> params{{"a", Tensor<float>::zeros({4}, true), ParamGroup::head}};
  EXPECT_THROW(restore_parameters(ck, params), DataError);
  ParamList<float> missing{{"b", Tensor<float>::zeros({2, 2}, true), ParamGroup::head}};
  EXPECT_THROW(restore_parameters(ck, missing), DataError);
}

TEST(FileFeatureProvider, LoadsArchivesAndValidatesThem) {
  const auto dir = std::filesystem::temp_directory_path() / "adsam_feature_test";
  std::filesystem::create_directories(dir);
  auto config = tiny_config();
  config.provider = "file";
  config.feature_dir = dir.string();
  const Shape grid{config.embed_dim, config.grid_height(), config.grid_width()};
  Checkpoint good;
  good.tensors.push_back({"features", grid, std::vector<float>(shape_numel(grid), 0.25f)});
  save_checkpoint((dir / "img_a.adsm").string(), good);
  Checkpoint wrong;
  wrong.tensors.push_back({"features", {config.embed_dim, 2, 2}, std::vector<float>(config.embed_dim * 4, 0.f)});
  save_checkpoint((dir / "img_b.adsm").string(), wrong);

  AdSamModel<float> model(config);
  auto image = Tensor<float>::zeros({1, 3, 64, 64});
  const std::vector<std::string> a{"img_a"}, b{"img_b"}, c{"img_missing"};
  const auto features = model.global_features(image, a);
  EXPECT_EQ(features.shape(), (Shape{1, config.embed_dim, config.grid_height(), config.grid_width()}));
  EXPECT_EQ(features.data()[0], 0.25f);
  EXPECT_THROW(model.global_features(image, b), DataError);
  EXPECT_THROW(model.global_features(image, c), DataError);
  EXPECT_THROW(model.global_features(image), DataError);
  NoGradGuard no_grad;
  EXPECT_EQ(model.forward(image, false, a).shape(), (Shape{1, config.num_classes, 64, 64}));
  std::filesystem::remove_all(dir);
}

TEST(RandomPatchEmbedder, IsFixedBySeedAndLinearInPatches) {
  RandomPatchEmbedder<double> p1(4, 2, 9), p2(4, 2, 9);
  Rng rng(8);
  auto image = random_tensor({1, 3, 4, 4}, rng, -1, 1, false);
  const auto a = p1.features(image, {});
  const auto b = p2.features(image, {});
  EXPECT_EQ(a.shape(), (Shape{1, 4, 2, 2}));
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_EQ(a.data()[i], b.data()[i]);
  EXPECT_FALSE(a.requires_grad());
}
