#include "panet/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace panet {

namespace {

std::vector<std::size_t> pick_indices(std::size_t n, std::size_t limit) {
  std::vector<std::size_t> idx;
  if (limit == 0 || limit >= n) {
    idx.resize(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    return idx;
  }
  if (limit == 1) return {0};
  for (std::size_t k = 0; k < limit; ++k) idx.push_back(k * (n - 1) / (limit - 1));
  idx.erase(std::unique(idx.begin(), idx.end()), idx.end());
  return idx;
}

}  // namespace

double GradcheckReport::max_rel_error() const {
  double worst = 0.0;
  for (const auto& e : entries) {
    if (e.non_finite) return std::numeric_limits<double>::infinity();
    worst = std::max(worst, e.max_rel_error);
  }
  return worst;
}

bool GradcheckReport::passed(double tolerance) const {
  return std::all_of(entries.begin(), entries.end(), [&](const GradcheckEntry& e) {
    return !e.non_finite && e.max_rel_error < tolerance;
  });
}

double relative_error(double analytic, double numeric) {
  double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
  return std::abs(analytic - numeric) / denom;
}

GradcheckReport gradcheck(const std::function<Tensor<double>()>& f, std::span<NamedTensor64> params,
                          const GradcheckOptions& options) {
  const std::function<long double()> eval =
      options.reference ? options.reference : std::function<long double()>([&] { return f().item(); });
  auto loss = f();
  auto grads = backward(loss);

  GradcheckReport report;
  NoGradGuard no_grad;
  for (auto& p : params) {
    GradcheckEntry entry;
    entry.name = p.name;
    auto analytic = grads.of(p.tensor);
    auto values = p.tensor.mutable_data();
    for (auto i : pick_indices(values.size(), options.max_entries_per_param)) {
      const double original = values[i];
      values[i] = original + options.eps;
      const long double plus = eval();
      values[i] = original - options.eps;
      const long double minus = eval();
      values[i] = original;
      ++entry.checked;

      const double a = analytic.data()[i];
      const auto n = static_cast<double>((plus - minus) / (2.0L * options.eps));
      if (!std::isfinite(plus) || !std::isfinite(minus) || !std::isfinite(a)) {
        entry.non_finite = true;
        entry.worst_index = i;
        entry.analytic = a;
        entry.numeric = n;
        continue;
      }
      const double err = relative_error(a, n);
      if (!entry.non_finite && (err > entry.max_rel_error || entry.checked == 1)) {
        entry.max_rel_error = err;
        entry.worst_index = i;
        entry.analytic = a;
        entry.numeric = n;
      }
    }
    report.entries.push_back(std::move(entry));
  }
  return report;
}

}  // namespace panet
