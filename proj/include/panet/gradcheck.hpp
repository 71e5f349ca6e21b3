#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "panet/tensor.hpp"

namespace panet {

struct NamedTensor64 {
  std::string name;
  Tensor<double> tensor;
};

struct GradcheckEntry {
  std::string name;
  std::size_t checked = 0;
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  bool non_finite = false;
};

struct GradcheckReport {
  std::vector<GradcheckEntry> entries;

  double max_rel_error() const;
  /// False when any entry exceeded `tolerance` or was flagged non-finite.
  bool passed(double tolerance) const;
};

struct GradcheckOptions {
  double eps = 1e-5;
  /// 0 checks every scalar. Otherwise at most this many evenly spaced
  /// coordinates per tensor (first and last always included).
  std::size_t max_entries_per_param = 0;
  /// When set, central differences use this extended-precision evaluation of
  /// the same function (reading the same parameter tensors) instead of `f`.
  /// Deep compositions lose more than eps * |gradient| to rounding in double.
  std::function<long double()> reference;
};

/// |a - n| / max(|a|, |n|, 1e-8)
double relative_error(double analytic, double numeric);

/// Compares backward() of `f` against central differences on every listed
/// leaf. `f` must read the parameters through the same tensors so that
/// perturbing their values in place changes its result.
GradcheckReport gradcheck(const std::function<Tensor<double>()>& f,
                          std::span<NamedTensor64> params, const GradcheckOptions& options = {});

}  // namespace panet
