#pragma once

#include <cmath>
#include <filesystem>
#include <string>

#include "panet/random.hpp"
#include "panet/tensor.hpp"

namespace panet::test {

template <typename T = double>
Tensor<T> randn(Shape shape, Rng& rng, double stddev = 1.0, bool requires_grad = false) {
  std::vector<T> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<T>(stddev * standard_normal(rng));
  return Tensor<T>(std::move(shape), std::move(v), requires_grad);
}

template <typename T>
Tensor<T> from_values(Shape shape, std::vector<T> values, bool requires_grad = false) {
  return Tensor<T>(std::move(shape), std::move(values), requires_grad);
}

template <typename T>
void fill_normal(Tensor<T>& t, Rng& rng, double stddev, double mean = 0.0) {
  for (auto& v : t.mutable_data()) v = static_cast<T>(mean + stddev * standard_normal(rng));
}

template <typename T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    worst = std::max(worst, std::abs(static_cast<double>(a.data()[i]) - static_cast<double>(b.data()[i])));
  }
  return worst;
}

template <typename T>
bool bit_equal(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) return false;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    if (a.data()[i] != b.data()[i]) return false;
  }
  return true;
}

/// Owned copy of the values; safe to iterate when `t` is a temporary.
template <typename T>
std::vector<T> values(const Tensor<T>& t) {
  return {t.data().begin(), t.data().end()};
}

/// Fresh directory under the test's working directory.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::current_path() / ("scratch_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace panet::test
