#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "adsam/adsam.hpp"

namespace fs = std::filesystem;
using namespace adsam;

namespace {

enum ExitCode { kOk = 0, kFailure = 1, kConfig = 2, kData = 3, kNumerical = 4 };

RunConfig config_or_default(const std::string& path) { return path.empty() ? RunConfig{} : load_config(path); }

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
  if (!out) throw DataError("failed writing " + path.string());
}

Dataset read_dataset_checked(const fs::path& dir, std::size_t classes) {
  auto data = read_dataset(dir);
  for (const auto* split : {&data.train, &data.val})
    for (const auto& s : *split)
      for (auto v : s.labels)
        if (v != kIgnoreLabel && v >= classes)
          throw DataError("dataset " + dir.string() + ": sample " + s.id + " has label " + std::to_string(v) +
                          " but the model has " + std::to_string(classes) + " classes");
  return data;
}

template <typename T>
int run_train(const RunConfig& config, const fs::path& data_dir, const fs::path& out_dir) {
  const auto data = read_dataset_checked(data_dir, config.model.num_classes);
  write_text(out_dir / "config.txt", to_text(config));
  TrainOptions options{out_dir, [](const EpochRecord& r) { std::cout << format_record(r) << std::endl; }};
  std::cout << kRunLogHeader << "\n";
  const auto result = train<T>(config, data, options);
  std::cout << "best epoch " << result.best_epoch << " val_miou " << format_fixed4(result.best_miou) << "\n";
  return kOk;
}

template <typename T>
int run_eval(const Checkpoint& checkpoint, const fs::path& data_dir, const std::string& split,
             const std::string& report_path, bool exclude_undefined) {
  auto model = load_model<T>(checkpoint);
  const auto data = read_dataset_checked(data_dir, model.config().num_classes);
  const auto& samples = split == "train" ? data.train : data.val;
  const auto config = parse_config(checkpoint.config_text);
  const auto policy = exclude_undefined ? UndefinedPolicy::exclude : UndefinedPolicy::count_as_zero;
  const auto result = evaluate(model, samples, config.train.eval_batch_size, policy);
  const auto csv = to_csv(result.report);
  if (report_path.empty())
    std::cout << csv;
  else
    write_text(report_path, csv);
  std::cout << "miou " << format_fixed4(result.report.miou) << " loss " << result.loss << "\n";
  return kOk;
}

template <typename T>
int run_sweep(const RunConfig& config, const fs::path& data_dir, const std::vector<std::size_t>& sizes,
              const std::string& out_path) {
  const auto data = read_dataset_checked(data_dir, config.model.num_classes);
  const auto rows = sensitivity_sweep<T>(config, data, sizes, [](const SweepRow& r, const TrainResult<T>&) {
    std::cout << "size " << r.size << " miou " << format_fixed4(r.miou) << " seconds " << r.seconds << std::endl;
  });
  const auto csv = sweep_csv(rows);
  if (out_path.empty())
    std::cout << csv;
  else
    write_text(out_path, csv);
  return kOk;
}

template <typename T>
int run_retention(const Checkpoint& checkpoint, const fs::path& source, const fs::path& target,
                  const std::string& report_path) {
  const auto config = parse_config(checkpoint.config_text);
  const auto src = read_dataset_checked(source, config.model.num_classes);
  const auto tgt = read_dataset_checked(target, config.model.num_classes);
  const auto result = retention_run<T>(checkpoint, src.val, tgt.val, config.train.eval_batch_size);
  const auto text = retention_report(result);
  if (!report_path.empty()) write_text(report_path, text);
  std::cout << text;
  return kOk;
}

int precision_of(const Checkpoint& checkpoint) { return parse_config(checkpoint.config_text).train.precision; }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dual-encoder deformable segmentation: data generation, training and evaluation"};
  app.require_subcommand(1);

  std::string config_path, out_dir, data_dir, checkpoint_path, report_path, split = "val", source, target;
  std::string preset = "paper";
  std::size_t count = 200;
  std::vector<std::size_t> sizes;
  bool exclude_undefined = false;

  auto* gen = app.add_subcommand("gen-data", "Write a synthetic scene dataset (PNG images, labels, manifest)");
  gen->add_option("--config", config_path, "Config file (defaults apply when omitted)");
  gen->add_option("--out", out_dir, "Output dataset directory")->required();
  gen->add_option("--count", count, "Number of training scenes")->check(CLI::PositiveNumber);

  auto* tr = app.add_subcommand("train", "Train a model; writes runlog.csv, best.adsm, last.adsm");
  tr->add_option("--config", config_path, "Config file");
  tr->add_option("--data", data_dir, "Dataset directory")->required();
  tr->add_option("--out", out_dir, "Run output directory")->required();

  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint and write the per-class report");
  ev->add_option("--checkpoint", checkpoint_path, "Checkpoint (.adsm)")->required();
  ev->add_option("--data", data_dir, "Dataset directory")->required();
  ev->add_option("--report", report_path, "CSV report path (stdout when omitted)");
  ev->add_option("--split", split, "Split to evaluate")->check(CLI::IsMember({"train", "val"}));
  ev->add_flag("--exclude-undefined", exclude_undefined, "Average only classes with defined IoU");

  auto* sw = app.add_subcommand("sweep", "Train one model per training-set size");
  sw->add_option("--config", config_path, "Config file");
  sw->add_option("--data", data_dir, "Dataset directory")->required();
  sw->add_option("--sizes", sizes, "Ascending training-set sizes, e.g. 16,64,200")->required()->delimiter(',');
  sw->add_option("--out", report_path, "CSV output path (stdout when omitted)");

  auto* rt = app.add_subcommand("retention", "Evaluate one checkpoint on a source and a target dataset");
  rt->add_option("--checkpoint", checkpoint_path, "Checkpoint (.adsm)")->required();
  rt->add_option("--source", source, "Source dataset directory")->required();
  rt->add_option("--target", target, "Target dataset directory")->required();
  rt->add_option("--report", report_path, "Report path");

  auto* sh = app.add_subcommand("shapes", "Print the forward-pass shape trace of a preset or config");
  sh->add_option("--preset", preset, "paper or desk")->check(CLI::IsMember({"paper", "desk"}));
  sh->add_option("--config", config_path, "Config file (overrides the preset)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kConfig;
  }

  try {
    if (gen->parsed()) {
      const auto config = config_or_default(config_path);
      const auto data = generate_dataset(config.scene, count, config.scene.val_count);
      write_dataset(out_dir, data);
      write_text(fs::path(out_dir) / "config.txt", to_text(config));
      std::printf("wrote %zu train + %zu val scenes to %s (val hash %016llx)\n", data.train.size(), data.val.size(),
                  out_dir.c_str(), static_cast<unsigned long long>(content_hash(data.val)));
      return kOk;
    }
    if (tr->parsed()) {
      const auto config = config_or_default(config_path);
      return config.train.precision == 64 ? run_train<double>(config, data_dir, out_dir)
                                          : run_train<float>(config, data_dir, out_dir);
    }
    if (ev->parsed()) {
      const auto checkpoint = load_checkpoint(checkpoint_path);
      return precision_of(checkpoint) == 64
                 ? run_eval<double>(checkpoint, data_dir, split, report_path, exclude_undefined)
                 : run_eval<float>(checkpoint, data_dir, split, report_path, exclude_undefined);
    }
    if (sw->parsed()) {
      const auto config = config_or_default(config_path);
      return config.train.precision == 64 ? run_sweep<double>(config, data_dir, sizes, report_path)
                                          : run_sweep<float>(config, data_dir, sizes, report_path);
    }
    if (rt->parsed()) {
      const auto checkpoint = load_checkpoint(checkpoint_path);
      return precision_of(checkpoint) == 64 ? run_retention<double>(checkpoint, source, target, report_path)
                                            : run_retention<float>(checkpoint, source, target, report_path);
    }
    if (sh->parsed()) {
      const auto model = config_path.empty()
                             ? (preset == "desk" ? ModelConfig::desk() : ModelConfig::paper())
                             : load_config(config_path).model;
      model.validate();
      for (const auto& [name, shape] : trace_shapes(model).entries) std::cout << name << " " << shape_str(shape) << "\n";
      return kOk;
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return kNumerical;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFailure;
  }
  return kFailure;
}
