#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "medmix/error.hpp"

namespace medmix {

/// Relative error with an absolute floor so that two near-zero gradients
/// compare as equal instead of amplifying roundoff.
inline double relative_error(double analytic, double numeric, double floor = 1e-6) {
  const double scale = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / scale;
}

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;  // flat index over all coordinate blocks
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t coordinates = 0;
};

/// Central-difference check in 64-bit. Each `coords[i]` is perturbed in
/// place (and restored); `analytic[i]` holds the matching gradient block.
/// `loss` must re-evaluate the full objective from the current coordinates.
inline GradCheckResult grad_check(const std::function<double()>& loss,
                                  const std::vector<std::span<double>>& coords,
                                  const std::vector<std::span<const double>>& analytic,
                                  double step = 1e-5, double floor = 1e-6) {
  if (coords.size() != analytic.size()) throw Error("grad_check: block count mismatch");
  GradCheckResult res;
  std::size_t flat = 0;
  for (std::size_t b = 0; b < coords.size(); ++b) {
    if (coords[b].size() != analytic[b].size()) throw Error("grad_check: block size mismatch");
    for (std::size_t i = 0; i < coords[b].size(); ++i, ++flat) {
      double& x = coords[b][i];
      const double saved = x;
      x = saved + step;
      const double up = loss();
      x = saved - step;
      const double down = loss();
      x = saved;
      if (!std::isfinite(up) || !std::isfinite(down))
        throw NumericError("grad_check: non-finite loss");
      const double numeric = (up - down) / (2.0 * step);
      const double err = relative_error(analytic[b][i], numeric, floor);
      if (res.coordinates == 0 || err > res.max_rel_error) {
        res.max_rel_error = err;
        res.worst_index = flat;
        res.worst_analytic = analytic[b][i];
        res.worst_numeric = numeric;
      }
      ++res.coordinates;
    }
  }
  return res;
}

/// Scalar convenience overload: checks f'(x) against `derivative`.
inline GradCheckResult grad_check_scalar(const std::function<double(double)>& f, double x,
                                         double derivative, double step = 1e-5) {
  double point = x;
  const double d = derivative;
  return grad_check([&] { return f(point); }, {std::span<double>(&point, 1)},
                    {std::span<const double>(&d, 1)}, step);
}

}  // namespace medmix
