#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "adsam/errors.hpp"
#include "adsam/ops.hpp"

namespace adsam {

class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t classes = 0) : classes_(classes), counts_(classes * classes, 0) {}

  std::size_t classes() const { return classes_; }
  std::uint64_t at(std::size_t truth, std::size_t predicted) const { return counts_.at(truth * classes_ + predicted); }
  std::uint64_t total() const {
    std::uint64_t sum = 0;
    for (auto c : counts_) sum += c;
    return sum;
  }

  // Adds one pixel pair per non-ignored label.
  void accumulate(std::span<const std::uint8_t> predictions, std::span<const std::uint8_t> labels,
                  int ignore_value = kIgnoreLabel) {
    detail::require(predictions.size() == labels.size(), "confusion matrix: prediction and label sizes differ");
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] == ignore_value) continue;
      if (labels[i] >= classes_ || predictions[i] >= classes_)
        throw DataError("confusion matrix: class id " + std::to_string(std::max(labels[i], predictions[i])) +
                        " out of range for " + std::to_string(classes_) + " classes");
      ++counts_[labels[i] * classes_ + predictions[i]];
    }
  }

  void merge(const ConfusionMatrix& other) {
    detail::require(other.classes_ == classes_, "confusion matrix: class count mismatch in merge");
    for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
  }

  bool operator==(const ConfusionMatrix&) const = default;

 private:
  std::size_t classes_;
  std::vector<std::uint64_t> counts_;
};

// Per-pixel argmax over channels of a B x C x H x W tensor; ties go to the
// lowest class index. Output is B x H x W.
template <typename T>
std::vector<std::uint8_t> argmax_channels(const Tensor<T>& scores) {
  detail::require(scores.rank() == 4, "argmax: expected B x C x H x W");
  const std::size_t batch = scores.dim(0), classes = scores.dim(1), area = scores.dim(2) * scores.dim(3);
  detail::require(classes <= 255, "argmax: too many classes for 8-bit labels");
  const auto v = scores.data();
  std::vector<std::uint8_t> out(batch * area);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t i = 0; i < area; ++i) {
      std::size_t best = 0;
      T best_value = v[b * classes * area + i];
      for (std::size_t c = 1; c < classes; ++c) {
        const T value = v[(b * classes + c) * area + i];
        if (value > best_value) {
          best_value = value;
          best = c;
        }
      }
      out[b * area + i] = static_cast<std::uint8_t>(best);
    }
  return out;
}

// IoU per class; nullopt where TP + FP + FN == 0.
inline std::vector<std::optional<double>> iou_per_class(const ConfusionMatrix& cm) {
  const std::size_t n = cm.classes();
  std::vector<std::optional<double>> out(n);
  for (std::size_t c = 0; c < n; ++c) {
    std::uint64_t row = 0, col = 0;
    for (std::size_t k = 0; k < n; ++k) {
      row += cm.at(c, k);
      col += cm.at(k, c);
    }
    const std::uint64_t tp = cm.at(c, c);
    const std::uint64_t denom = row + col - tp;
    if (denom > 0) out[c] = static_cast<double>(tp) / static_cast<double>(denom);
  }
  return out;
}

enum class UndefinedPolicy { count_as_zero, exclude };

inline double miou(const std::vector<std::optional<double>>& iou,
                   UndefinedPolicy policy = UndefinedPolicy::count_as_zero) {
  double sum = 0.0;
  std::size_t defined = 0;
  for (const auto& v : iou) {
    if (!v) continue;
    sum += *v;
    ++defined;
  }
  if (defined == 0) throw std::invalid_argument("miou: no defined classes");
  const std::size_t count = policy == UndefinedPolicy::count_as_zero ? iou.size() : defined;
  return sum / static_cast<double>(count);
}

inline double miou(const std::vector<double>& iou) {
  std::vector<std::optional<double>> wrapped(iou.begin(), iou.end());
  return miou(wrapped);
}

inline double retention(double miou_target, double miou_source) {
  if (!(miou_source > 0.0)) throw std::invalid_argument("retention: source mIoU must be positive");
  return miou_target / miou_source;
}

struct ClassReport {
  std::vector<std::string> names;
  std::vector<std::optional<double>> iou;
  double miou = 0.0;
};

inline ClassReport class_report(const ConfusionMatrix& cm, const std::vector<std::string>& names,
                                UndefinedPolicy policy = UndefinedPolicy::count_as_zero) {
  detail::require(names.size() == cm.classes(), "class_report: expected " + std::to_string(cm.classes()) +
                                                    " class names, got " + std::to_string(names.size()));
  ClassReport report{names, iou_per_class(cm), 0.0};
  report.miou = miou(report.iou, policy);
  return report;
}

inline std::string format_fixed4(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

// CSV: `class,iou` header, one row per class (undefined as "nan"), then `miou,<value>`.
inline std::string to_csv(const ClassReport& report) {
  std::string out = "class,iou\n";
  for (std::size_t c = 0; c < report.names.size(); ++c)
    out += report.names[c] + "," + (report.iou[c] ? format_fixed4(*report.iou[c]) : std::string("nan")) + "\n";
  out += "miou," + format_fixed4(report.miou) + "\n";
  return out;
}

inline ClassReport parse_class_report(const std::string& csv) {
  std::istringstream in(csv);
  std::string line;
  if (!std::getline(in, line) || line != "class,iou") throw DataError("class report: missing 'class,iou' header");
  ClassReport report;
  bool footer = false;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (footer) throw DataError("class report: rows after the miou footer");
    const auto comma = line.rfind(',');
    if (comma == std::string::npos) throw DataError("class report: malformed row '" + line + "'");
    const std::string name = line.substr(0, comma), value = line.substr(comma + 1);
    try {
      if (name == "miou") {
        report.miou = std::stod(value);
        footer = true;
      } else {
        report.names.push_back(name);
        report.iou.push_back(value == "nan" ? std::nullopt : std::optional<double>(std::stod(value)));
      }
    } catch (const std::logic_error&) {
      throw DataError("class report: bad number in row '" + line + "'");
    }
  }
  if (!footer) throw DataError("class report: missing miou footer");
  return report;
}

}  // namespace adsam
