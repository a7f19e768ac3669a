#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <vector>

#include "pal/error.hpp"
#include "pal/matrix.hpp"

namespace pal {

struct GradCheckReport {
  double max_rel_error = 0.0;
  // location of the worst entry, for diagnostics
  std::size_t worst_param = 0;
  std::size_t worst_entry = 0;
  double analytic_at_worst = 0.0;
  double numeric_at_worst = 0.0;
};

// Central finite differences against an analytic gradient.
// f is a scalar function of the parameter list; `analytic` holds one
// gradient matrix per parameter, shape-matched. Relative error per entry is
// |analytic - numeric| / max(1, |numeric|); the report carries the max.
inline GradCheckReport check_gradients(const std::function<double(const std::vector<Matrix>&)>& f,
                                       std::vector<Matrix> params,
                                       const std::vector<Matrix>& analytic, double step = 1e-6) {
  if (params.size() != analytic.size())
    throw PreconditionError("check_gradients: parameter/gradient count mismatch");
  GradCheckReport report;
  for (std::size_t p = 0; p < params.size(); ++p) {
    if (!params[p].same_shape(analytic[p]))
      throw ShapeError("check_gradients: gradient shape " + shape_str(analytic[p]) +
                       " does not match parameter " + shape_str(params[p]));
    for (std::size_t e = 0; e < params[p].size(); ++e) {
      const double saved = params[p].data()[e];
      params[p].data()[e] = saved + step;
      const double f_plus = f(params);
      params[p].data()[e] = saved - step;
      const double f_minus = f(params);
      params[p].data()[e] = saved;
      if (!std::isfinite(f_plus) || !std::isfinite(f_minus))
        throw NumericError("check_gradients: non-finite objective at perturbed point");
      const double numeric = (f_plus - f_minus) / (2.0 * step);
      const double a = analytic[p].data()[e];
      const double rel = std::abs(a - numeric) / std::max(1.0, std::abs(numeric));
      if (rel > report.max_rel_error) {
        report.max_rel_error = rel;
        report.worst_param = p;
        report.worst_entry = e;
        report.analytic_at_worst = a;
        report.numeric_at_worst = numeric;
      }
    }
  }
  return report;
}

}  // namespace pal
