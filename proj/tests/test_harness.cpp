#include <filesystem>
#include <fstream>

#include "test_support.hpp"

using namespace adsam;
using namespace adsam::oracle;

namespace {

RunConfig small_run(std::size_t epochs) {
  RunConfig rc;
  rc.model.embed_dim = 16;
  rc.model.image_height = rc.scene.image_height = 64;
  rc.model.image_width = rc.scene.image_width = 64;
  rc.train.epochs = epochs;
  rc.train.seed = 5;
  return rc;
}

ParamList<double> single_param(double w, double g) {
  auto t = TensorD::from_data({1}, {w}, true);
  if (g != 0.0) backward(mul_scalar(t, g));
  return {{"w", t, ParamGroup::head}};
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST(CosineLr, ScheduleEndpoints) {
  EXPECT_DOUBLE_EQ(cosine_lr(0, 100, 2e-4), 2e-4);
  EXPECT_NEAR(cosine_lr(50, 100, 2e-4), 1e-4, 1e-18);
  EXPECT_NEAR(cosine_lr(100, 100, 2e-4), 0.0, 1e-20);
  EXPECT_GE(cosine_lr(100, 100, 2e-4), 0.0);
  EXPECT_THROW(cosine_lr(0, 0, 2e-4), std::invalid_argument);
  EXPECT_THROW(cosine_lr(101, 100, 2e-4), std::invalid_argument);
  for (std::size_t e = 1; e <= 100; ++e) EXPECT_LT(cosine_lr(e, 100, 1.0), cosine_lr(e - 1, 100, 1.0));
}

TEST(AdamW, HandEvaluatedSteps) {
  {
    auto params = single_param(1.0, 1.0);
    AdamW<double> opt(params, AdamWOptions{0.0});
    opt.step(0.1);
    EXPECT_NEAR(params[0].tensor.data()[0], 0.9, 1e-6);
  }
  {
    auto params = single_param(1.0, 1.0);
    AdamW<double> opt(params, AdamWOptions{0.5});
    opt.step(0.1);
    EXPECT_NEAR(params[0].tensor.data()[0], 0.85, 1e-6);
  }
  {
    auto params = single_param(1.0, 0.0);
    AdamW<double> opt(params, AdamWOptions{0.0});
    opt.step(0.1);
    EXPECT_EQ(params[0].tensor.data()[0], 1.0);
  }
}

TEST(AdamW, GroupMultipliersScaleTheStep) {
  auto a = TensorD::from_data({1}, {1.0}, true), b = TensorD::from_data({1}, {1.0}, true);
  backward(add(a, b));
  AdamW<double> opt({{"a", a, ParamGroup::backbone}, {"b", b, ParamGroup::head}}, AdamWOptions{0.0});
  opt.step(0.1);
  EXPECT_NEAR(a.data()[0], 0.99, 1e-6);
  EXPECT_NEAR(b.data()[0], 0.9, 1e-6);
}

TEST(AdamW, RejectsNonFiniteGradientsAndFrozenParameters) {
  // d/dw sqrt(w) is infinite at w = 0 while the loss itself stays finite.
  auto w = TensorD::from_data({1}, {0.0}, true);
  backward(pow(w, 0.5));
  ParamList<double> params{{"w", w, ParamGroup::head}};
  AdamW<double> opt(params, AdamWOptions{});
  EXPECT_THROW(opt.step(0.1), NumericalError);
  EXPECT_EQ(w.data()[0], 0.0);
  ParamList<double> frozen{{"f", TensorD::zeros({1}, false), ParamGroup::frozen}};
  EXPECT_THROW((AdamW<double>(frozen, AdamWOptions{})), std::invalid_argument);
}

TEST(Config, TextRoundTripAndErrors) {
  RunConfig rc = small_run(3);
  rc.model.decoder_groups = {2, 2, 1};
  rc.scene.palette_shift = {0.1, -0.05, 0.0};
  rc.train.base_lr = 1.25e-4;
  const auto text = to_text(rc);
  EXPECT_EQ(to_text(parse_config(text)), text);
  const auto parsed = parse_config("# comment\nepochs = 7\nbase_lr=3e-4  # trailing\nimage_height = 96\n");
  EXPECT_EQ(parsed.train.epochs, 7u);
  EXPECT_DOUBLE_EQ(parsed.train.base_lr, 3e-4);
  EXPECT_EQ(parsed.model.image_height, 96u);
  EXPECT_EQ(parsed.scene.image_height, 96u);
  EXPECT_THROW(parse_config("no_such_key = 1\n"), ConfigError);
  EXPECT_THROW(parse_config("epochs = many\n"), ConfigError);
  EXPECT_THROW(parse_config("epochs\n"), ConfigError);
  EXPECT_THROW(parse_config("decoder_groups = 1,2\n"), ConfigError);
  EXPECT_THROW(parse_config("image_height = 100\n"), ConfigError);
  EXPECT_THROW(parse_config("precision = 16\n"), ConfigError);
  EXPECT_THROW(load_config("/nonexistent/adsam.cfg"), ConfigError);
}

TEST(RunLog, CsvLayoutAndTrajectoryComparison) {
  RunLog a;
  a.records.push_back({1, 0.5, 0.1, 0.2, 0.3, 0.05, 0.6, 0.25, 1.5});
  RunLog b = a;
  b.records[0].seconds = 9.0;
  EXPECT_TRUE(a.same_trajectory(b));
  b.records[0].val_miou = 0.2500001;
  EXPECT_FALSE(a.same_trajectory(b));
  EXPECT_EQ(a.to_csv(), std::string(kRunLogHeader) + "\n1,0.5,0.1,0.2,0.3,0.05,0.6,0.25,1.500\n");
}

TEST(Training, SmokeRunWritesLogsAndRoundTripsCheckpoints) {
  const auto dir = std::filesystem::temp_directory_path() / "adsam_train_smoke";
  std::filesystem::remove_all(dir);
  const auto rc = small_run(2);
  const auto data = generate_dataset(rc.scene, 8, 4);
  std::vector<std::size_t> seen;
  TrainOptions options{dir, [&seen](const EpochRecord& r) { seen.push_back(r.epoch); }};
  const auto result = train<float>(rc, data, options);
  ASSERT_EQ(result.log.records.size(), 2u);
  EXPECT_EQ(seen, (std::vector<std::size_t>{1, 2}));
  EXPECT_EQ(read_file(dir / "runlog.csv"), result.log.to_csv());
  ASSERT_TRUE(std::filesystem::exists(dir / "best.adsm"));
  ASSERT_TRUE(std::filesystem::exists(dir / "last.adsm"));

  auto from_disk = load_model<float>(load_checkpoint((dir / "last.adsm").string()));
  const auto first = evaluate(from_disk, data.val, rc.train.eval_batch_size);
  EXPECT_EQ(first.report.miou, result.log.records.back().val_miou);
  EXPECT_EQ(first.loss, result.log.records.back().val_loss);
  const auto second = evaluate(from_disk, data.val, rc.train.eval_batch_size);
  EXPECT_EQ(to_csv(first.report), to_csv(second.report));
  EXPECT_EQ(first.confusion, second.confusion);

  auto best = load_model<float>(load_checkpoint((dir / "best.adsm").string()));
  EXPECT_EQ(evaluate(best, data.val, rc.train.eval_batch_size).report.miou, result.best_miou);
  std::filesystem::remove_all(dir);
}

TEST(Training, SeededRunsAreIdenticalAndTheProviderStaysFrozen) {
  const auto rc = small_run(2);
  const auto data = generate_dataset(rc.scene, 6, 2);
  const auto a = train<float>(rc, data);
  const auto b = train<float>(rc, data);
  EXPECT_TRUE(a.log.same_trajectory(b.log));
  EXPECT_EQ(encode_checkpoint(a.last), encode_checkpoint(b.last));

  AdSamModel<float> fresh(rc.model);
  std::size_t frozen = 0, updated = 0;
  for (const auto& p : fresh.parameters()) {
    const auto* t = a.last.find(p.name);
    ASSERT_NE(t, nullptr) << p.name;
    const bool unchanged = std::equal(t->values.begin(), t->values.end(), p.tensor.data().begin());
    if (p.group == ParamGroup::frozen) {
      EXPECT_TRUE(unchanged) << p.name;
      ++frozen;
    } else {
      updated += !unchanged;
    }
  }
  EXPECT_EQ(frozen, 2u);
  EXPECT_GT(updated, 0u);
  auto other_seed = rc;
  other_seed.train.seed = 6;
  EXPECT_FALSE(train<float>(other_seed, data).log.same_trajectory(a.log));
}

TEST(Training, SmallStepDecreasesTheBatchLoss) {
  const auto rc = small_run(1);
  const auto data = generate_dataset(rc.scene, 2, 0);
  AdSamModel<double> model(rc.model);
  AdamW<double> opt(model.trainable_parameters(), AdamWOptions{});
  const std::vector<std::size_t> idx{0, 1};
  const auto batch = make_batch<double>(data.train, idx);
  auto loss = composite_loss(model.forward(batch.images, false), batch.labels).total;
  const double before = loss.item();
  backward(loss);
  opt.step(1e-6);
  NoGradGuard no_grad;
  const double after = composite_loss(model.forward(batch.images, false), batch.labels).total.item();
  EXPECT_LT(after, before);
}

TEST(Training, RejectsEmptyOrMismatchedData) {
  const auto rc = small_run(1);
  Dataset empty;
  EXPECT_THROW(train<float>(rc, empty), DataError);
  auto data = generate_dataset(rc.scene, 2, 1);
  data.val[0].labels[0] = 9;
  AdSamModel<float> model(rc.model);
  EXPECT_THROW(evaluate(model, data.val, 1), DataError);
}

TEST(Evaluate, UntrainedModelIsFarFromPerfect) {
  const auto rc = small_run(1);
  const auto data = generate_dataset(rc.scene, 0, 6);
  AdSamModel<float> model(rc.model);
  const auto r = evaluate(model, data.val, 4);
  EXPECT_LT(r.report.miou, 0.3);
  EXPECT_EQ(r.confusion.total(), 6u * 64 * 64);
}

TEST(Evaluate, BatchSizeDoesNotChangeMetricsOrLoss) {
  const auto rc = small_run(1);
  const auto data = generate_dataset(rc.scene, 0, 5);
  AdSamModel<float> model(rc.model);
  const auto one = evaluate(model, data.val, 1);
  for (std::size_t batch : {2, 3, 5}) {
    const auto r = evaluate(model, data.val, batch);
    EXPECT_EQ(r.confusion, one.confusion) << batch;
    EXPECT_EQ(r.report.miou, one.report.miou) << batch;
    EXPECT_NEAR(r.loss, one.loss, 1e-12) << batch;
  }
}

TEST(Sweep, OneRowPerSizeWithASharedValidationSet) {
  const auto rc = small_run(1);
  const auto data = generate_dataset(rc.scene, 4, 2);
  const auto rows = sensitivity_sweep<float>(rc, data, {2, 4});
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0].size, 2u);
  EXPECT_EQ(rows[0].val_hash, rows[1].val_hash);
  EXPECT_EQ(rows[0].val_hash, content_hash(data.val));
  const auto csv = sweep_csv(rows);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 3);
  EXPECT_EQ(csv.rfind("size,miou,seconds,val_hash\n", 0), 0u);
  EXPECT_THROW(sensitivity_sweep<float>(rc, data, {4, 2}), ConfigError);
  EXPECT_THROW(sensitivity_sweep<float>(rc, data, {8}), DataError);
}

TEST(Retention, IdenticalSetsGiveOne) {
  const auto rc = small_run(1);
  const auto data = generate_dataset(rc.scene, 2, 3);
  AdSamModel<float> model(rc.model);
  const auto checkpoint = model.to_checkpoint(to_text(rc));
  const auto r = retention_run<float>(checkpoint, data.val, data.val, 2);
  EXPECT_DOUBLE_EQ(r.retention, 1.0);
  EXPECT_EQ(r.source_miou, r.target_miou);
  const auto report = retention_report(r);
  EXPECT_NE(report.find("source_miou,"), std::string::npos);
  EXPECT_NE(report.find("retention,1.0000"), std::string::npos);
  auto other = rc.scene;
  other.image_height = 96;
  const auto taller = generate_dataset(other, 0, 1);
  EXPECT_THROW(retention_run<float>(checkpoint, data.val, taller.val, 2), DataError);
}
