#pragma once

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include "adsam/errors.hpp"
#include "adsam/module.hpp"

namespace adsam {

// 0.5 * base * (1 + cos(pi * epoch / total)), stepped once per epoch.
inline double cosine_lr(std::size_t epoch, std::size_t total_epochs, double base_lr) {
  if (total_epochs == 0) throw std::invalid_argument("cosine_lr: total_epochs must be positive");
  if (epoch > total_epochs) throw std::invalid_argument("cosine_lr: epoch exceeds total_epochs");
  const double lr = 0.5 * base_lr *
                    (1.0 + std::cos(std::numbers::pi * static_cast<double>(epoch) / static_cast<double>(total_epochs)));
  return std::max(lr, 0.0);
}

struct AdamWOptions {
  double weight_decay = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double backbone_mult = 0.1;
  double head_mult = 1.0;
};

// AdamW over named parameters. Frozen parameters are rejected at
// construction; each remaining parameter belongs to exactly one group.
template <typename T>
class AdamW {
 public:
  AdamW(ParamList<T> params, AdamWOptions options) : params_(std::move(params)), options_(options) {
    for (const auto& p : params_) {
      if (p.group == ParamGroup::frozen) throw std::invalid_argument("AdamW: frozen parameter " + p.name + " passed");
      if (!p.tensor.requires_grad()) throw std::invalid_argument("AdamW: parameter " + p.name + " does not require grad");
      m_.emplace_back(p.tensor.numel(), 0.0);
      v_.emplace_back(p.tensor.numel(), 0.0);
    }
  }

  const ParamList<T>& params() const { return params_; }
  std::size_t steps() const { return step_; }

  double group_multiplier(ParamGroup group) const {
    return group == ParamGroup::backbone ? options_.backbone_mult : options_.head_mult;
  }

  void zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
  }

  // Decoupled decay (p -= lr * wd * p) followed by the bias-corrected Adam
  // update. Parameters without a gradient are treated as having a zero one.
  void step(double lr) {
    for (const auto& p : params_) {
      if (!p.tensor.has_grad()) continue;
      for (auto g : p.tensor.grad())
        if (!std::isfinite(static_cast<double>(g)))
          throw NumericalError("AdamW: non-finite gradient in parameter " + p.name);
    }
    ++step_;
    const double b1 = options_.beta1, b2 = options_.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(step_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(step_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i];
      const double group_lr = lr * group_multiplier(p.group);
      auto data = p.tensor.mutable_data();
      const bool has_grad = p.tensor.has_grad();
      const auto grad = has_grad ? p.tensor.grad() : std::span<const T>{};
      auto& m = m_[i];
      auto& v = v_[i];
      for (std::size_t k = 0; k < data.size(); ++k) {
        const double g = has_grad ? static_cast<double>(grad[k]) : 0.0;
        double w = static_cast<double>(data[k]);
        w -= group_lr * options_.weight_decay * w;
        m[k] = b1 * m[k] + (1.0 - b1) * g;
        v[k] = b2 * v[k] + (1.0 - b2) * g * g;
        w -= group_lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + options_.eps);
        data[k] = static_cast<T>(w);
      }
    }
  }

 private:
  ParamList<T> params_;
  AdamWOptions options_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t step_ = 0;
};

}  // namespace adsam
