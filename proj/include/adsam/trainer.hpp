#pragma once

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include "adsam/checkpoint.hpp"
#include "adsam/config.hpp"
#include "adsam/data.hpp"
#include "adsam/losses.hpp"
#include "adsam/metrics.hpp"
#include "adsam/model.hpp"
#include "adsam/optim.hpp"

namespace adsam {

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0, focal = 0, dice = 0, lovasz = 0, surface = 0;
  double val_loss = 0, val_miou = 0;
  double seconds = 0;
};

inline constexpr const char* kRunLogHeader = "epoch,train_loss,focal,dice,lovasz,surface,val_loss,val_miou,seconds";

inline std::string format_record(const EpochRecord& r) {
  char buf[512];
  std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.3f", r.epoch, r.train_loss, r.focal, r.dice,
                r.lovasz, r.surface, r.val_loss, r.val_miou, r.seconds);
  return buf;
}

struct RunLog {
  std::vector<EpochRecord> records;

  std::string to_csv() const {
    std::string out = std::string(kRunLogHeader) + "\n";
    for (const auto& r : records) out += format_record(r) + "\n";
    return out;
  }

  // True when every field except wall-clock seconds matches exactly.
  bool same_trajectory(const RunLog& other) const {
    if (records.size() != other.records.size()) return false;
    for (std::size_t i = 0; i < records.size(); ++i) {
      auto a = records[i], b = other.records[i];
      a.seconds = b.seconds = 0;
      if (format_record(a) != format_record(b)) return false;
    }
    return true;
  }
};

template <typename T>
struct EvalResult {
  ConfusionMatrix confusion;
  double loss = 0;
  ClassReport report;
};

// Rebuilds the model described by the checkpoint's config echo and loads its weights.
template <typename T>
AdSamModel<T> load_model(const Checkpoint& checkpoint) {
  const RunConfig config = parse_config(checkpoint.config_text);
  AdSamModel<T> model(config.model);
  model.load(checkpoint);
  return model;
}

template <typename T>
EvalResult<T> evaluate(AdSamModel<T>& model, const std::vector<SceneSample>& samples, std::size_t batch_size,
                       UndefinedPolicy policy = UndefinedPolicy::count_as_zero) {
  if (samples.empty()) throw DataError("evaluate: no samples");
  const std::size_t classes = model.config().num_classes;
  for (const auto& s : samples)
    for (auto v : s.labels)
      if (v != kIgnoreLabel && v >= classes)
        throw DataError("evaluate: sample " + s.id + " has label " + std::to_string(v) + " but the model has " +
                        std::to_string(classes) + " classes");
  NoGradGuard no_grad;
  EvalResult<T> result{ConfusionMatrix(classes), 0.0, {}};
  double loss_weight = 0;
  for (std::size_t start = 0; start < samples.size(); start += batch_size) {
    std::vector<std::size_t> idx(std::min(batch_size, samples.size() - start));
    std::iota(idx.begin(), idx.end(), start);
    const auto batch = make_batch<T>(samples, idx);
    const auto logits = model.forward(batch.images, false, batch.ids);
    const auto predictions = argmax_channels(logits);
    result.confusion.accumulate(predictions, batch.labels.values);
    // Per-image losses, so the reported value does not depend on batch_size.
    const std::size_t image_numel = logits.numel() / idx.size(), area = batch.labels.pixels_per_image();
    for (std::size_t b = 0; b < idx.size(); ++b) {
      const auto first = batch.labels.values.begin() + static_cast<std::ptrdiff_t>(b * area);
      const LabelBatch labels{1, batch.labels.height, batch.labels.width, {first, first + static_cast<std::ptrdiff_t>(area)}};
      if (std::all_of(labels.values.begin(), labels.values.end(), [](auto v) { return v == kIgnoreLabel; })) continue;
      const auto from = logits.data().begin() + static_cast<std::ptrdiff_t>(b * image_numel);
      const auto image_logits = Tensor<T>::from_data({1, classes, logits.dim(2), logits.dim(3)},
                                                     std::vector<T>(from, from + static_cast<std::ptrdiff_t>(image_numel)));
      result.loss += static_cast<double>(composite_loss(image_logits, labels).total.item());
      loss_weight += 1.0;
    }
  }
  if (loss_weight > 0) result.loss /= loss_weight;
  result.report = class_report(result.confusion, class_names(classes), policy);
  return result;
}

struct TrainOptions {
  // When set, runlog.csv, best.adsm and last.adsm are written here.
  std::filesystem::path out_dir;
  // Called after every epoch.
  std::function<void(const EpochRecord&)> on_epoch;
};

template <typename T>
struct TrainResult {
  RunLog log;
  Checkpoint best;
  Checkpoint last;
  double best_miou = -1;
  std::size_t best_epoch = 0;
};

// Every trainable parameter has a unique name and exactly one LR group.
template <typename T>
void check_param_groups(const ParamList<T>& all) {
  std::set<std::string> names;
  for (const auto& p : all) {
    if (!names.insert(p.name).second) throw std::logic_error("duplicate parameter name " + p.name);
    const bool frozen = p.group == ParamGroup::frozen;
    if (frozen == p.tensor.requires_grad())
      throw std::logic_error("parameter " + p.name + " is in group " + to_string(p.group) +
                             (frozen ? " but requires grad" : " but does not require grad"));
  }
}

template <typename T>
TrainResult<T> train(const RunConfig& config, const Dataset& data, const TrainOptions& options = {}) {
  config.validate();
  if (data.train.empty()) throw DataError("train: empty training set");
  if (data.val.empty()) throw DataError("train: empty validation set");
  const auto& tc = config.train;
  AdSamModel<T> model(config.model);
  model.reseed_dropout(tc.seed);
  check_param_groups(model.parameters());
  AdamW<T> optimizer(model.trainable_parameters(),
                     AdamWOptions{tc.weight_decay, tc.beta1, tc.beta2, tc.adam_eps, tc.backbone_lr_mult,
                                  tc.head_lr_mult});
  const std::string config_text = to_text(config);

  std::ofstream runlog;
  if (!options.out_dir.empty()) {
    std::filesystem::create_directories(options.out_dir);
    runlog.open(options.out_dir / "runlog.csv", std::ios::trunc);
    if (!runlog) throw DataError("cannot write " + (options.out_dir / "runlog.csv").string());
    runlog << kRunLogHeader << "\n" << std::flush;
  }

  TrainResult<T> result;
  Rng shuffle_rng(tc.seed, 0x5f1e);
  std::vector<std::size_t> order(data.train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t epoch = 0; epoch < tc.epochs; ++epoch) {
    const auto started = std::chrono::steady_clock::now();
    shuffle_rng.shuffle(std::span<std::size_t>(order));
    const double lr = cosine_lr(epoch, tc.epochs, tc.base_lr);
    EpochRecord record;
    record.epoch = epoch + 1;
    for (std::size_t start = 0; start < order.size(); start += tc.batch_size) {
      const std::span<const std::size_t> idx(order.data() + start, std::min(tc.batch_size, order.size() - start));
      const auto batch = make_batch<T>(data.train, idx);
      const auto logits = model.forward(batch.images, true, batch.ids);
      const auto losses = composite_loss(logits, batch.labels);
      const double total = static_cast<double>(losses.total.item());
      if (!std::isfinite(total)) {
        std::string ids;
        for (const auto& id : batch.ids) ids += (ids.empty() ? "" : " ") + id;
        throw NumericalError("non-finite training loss in epoch " + std::to_string(epoch + 1) + ", batch [" + ids +
                             "]");
      }
      optimizer.zero_grad();
      backward(losses.total);
      optimizer.step(lr);
      const double n = static_cast<double>(idx.size());
      record.train_loss += total * n;
      record.focal += static_cast<double>(losses.focal.item()) * n;
      record.dice += static_cast<double>(losses.dice.item()) * n;
      record.lovasz += static_cast<double>(losses.lovasz.item()) * n;
      record.surface += static_cast<double>(losses.surface.item()) * n;
    }
    const double count = static_cast<double>(order.size());
    record.train_loss /= count;
    record.focal /= count;
    record.dice /= count;
    record.lovasz /= count;
    record.surface /= count;

    const auto eval = evaluate(model, data.val, tc.eval_batch_size);
    record.val_loss = eval.loss;
    record.val_miou = eval.report.miou;
    record.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    result.log.records.push_back(record);

    result.last = model.to_checkpoint(config_text);
    if (record.val_miou > result.best_miou) {
      result.best_miou = record.val_miou;
      result.best_epoch = record.epoch;
      result.best = result.last;
    }
    if (runlog.is_open()) {
      runlog << format_record(record) << "\n" << std::flush;
      save_checkpoint((options.out_dir / "last.adsm").string(), result.last);
      if (result.best_epoch == record.epoch) save_checkpoint((options.out_dir / "best.adsm").string(), result.best);
    }
    if (options.on_epoch) options.on_epoch(record);
  }
  return result;
}

struct SweepRow {
  std::size_t size = 0;
  double miou = 0;
  double seconds = 0;
  std::uint64_t val_hash = 0;
  RunLog log;
};

inline std::string sweep_csv(const std::vector<SweepRow>& rows) {
  std::string out = "size,miou,seconds,val_hash\n";
  char buf[128];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%zu,%.6f,%.3f,%016llx\n", r.size, r.miou, r.seconds,
                  static_cast<unsigned long long>(r.val_hash));
    out += buf;
  }
  return out;
}

template <typename T>
using SweepCallback = std::function<void(const SweepRow&, const TrainResult<T>&)>;

// One fresh model per training-set size, trained on the prefix of that size
// and validated on the same validation set. Records the final-epoch val mIoU.
template <typename T>
std::vector<SweepRow> sensitivity_sweep(const RunConfig& config, const Dataset& data,
                                        const std::vector<std::size_t>& sizes, const SweepCallback<T>& on_row = {}) {
  for (std::size_t i = 0; i < sizes.size(); ++i) {
    if (sizes[i] == 0 || sizes[i] > data.train.size())
      throw DataError("sweep: size " + std::to_string(sizes[i]) + " outside [1, " + std::to_string(data.train.size()) +
                      "]");
    if (i > 0 && sizes[i] <= sizes[i - 1]) throw ConfigError("sweep: sizes must be strictly ascending");
  }
  std::vector<SweepRow> rows;
  const auto val_hash = content_hash(data.val);
  for (auto size : sizes) {
    Dataset subset{std::vector<SceneSample>(data.train.begin(), data.train.begin() + static_cast<std::ptrdiff_t>(size)),
                   data.val};
    const auto started = std::chrono::steady_clock::now();
    const auto run = train<T>(config, subset);
    SweepRow row{size, run.log.records.back().val_miou,
                 std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count(),
                 content_hash(subset.val), run.log};
    if (row.val_hash != val_hash) throw std::logic_error("sweep: validation set changed between sizes");
    rows.push_back(row);
    if (on_row) on_row(row, run);
  }
  return rows;
}

struct RetentionResult {
  double source_miou = 0, target_miou = 0, retention = 0;
  ClassReport source_report, target_report;
};

inline std::string retention_report(const RetentionResult& r) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "source_miou,%.4f\ntarget_miou,%.4f\nretention,%.4f\n", r.source_miou, r.target_miou,
                r.retention);
  return buf;
}

// Evaluates one checkpoint on a source and a target sample set and reports
// target/source mIoU.
template <typename T>
RetentionResult retention_run(const Checkpoint& checkpoint, const std::vector<SceneSample>& source,
                              const std::vector<SceneSample>& target, std::size_t batch_size) {
  auto model = load_model<T>(checkpoint);
  if (!source.empty() && !target.empty() &&
      (source.front().height != target.front().height || source.front().width != target.front().width))
    throw DataError("retention: source and target image extents differ");
  const auto src = evaluate(model, source, batch_size);
  const auto tgt = evaluate(model, target, batch_size);
  return {src.report.miou, tgt.report.miou, retention(tgt.report.miou, src.report.miou), src.report, tgt.report};
}

}  // namespace adsam
