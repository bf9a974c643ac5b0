#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "adsam/random.hpp"
#include "adsam/tensor.hpp"

namespace adsam {

// Learning-rate group a parameter belongs to. Frozen parameters never reach
// the optimizer.
enum class ParamGroup { backbone, head, frozen };

inline const char* to_string(ParamGroup group) {
  switch (group) {
    case ParamGroup::backbone: return "backbone";
    case ParamGroup::head: return "head";
    case ParamGroup::frozen: return "frozen";
  }
  return "?";
}

template <typename T>
struct NamedParam {
  std::string name;
  Tensor<T> tensor;
  ParamGroup group;
};

template <typename T>
using ParamList = std::vector<NamedParam<T>>;

namespace init {

// He-normal for layers followed by a rectifier-like activation.
template <typename T>
Tensor<T> he_normal(Shape shape, std::size_t fan_in, Rng& rng, bool requires_grad = true) {
  const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
  std::vector<T> values(shape_numel(shape));
  for (auto& v : values) v = static_cast<T>(rng.normal() * stddev);
  return Tensor<T>::from_data(std::move(shape), std::move(values), requires_grad);
}

template <typename T>
Tensor<T> uniform(Shape shape, double bound, Rng& rng, bool requires_grad = true) {
  std::vector<T> values(shape_numel(shape));
  for (auto& v : values) v = static_cast<T>(rng.uniform(-bound, bound));
  return Tensor<T>::from_data(std::move(shape), std::move(values), requires_grad);
}

template <typename T>
Tensor<T> zeros(Shape shape, bool requires_grad = true) {
  return Tensor<T>::zeros(std::move(shape), requires_grad);
}

template <typename T>
Tensor<T> ones(Shape shape, bool requires_grad = true) {
  return Tensor<T>::full(std::move(shape), T(1), requires_grad);
}

}  // namespace init
}  // namespace adsam
