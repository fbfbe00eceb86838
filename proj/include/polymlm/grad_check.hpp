// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "polymlm/autodiff.hpp"

namespace polymlm {

struct GradCheckOptions {
  double h = 1e-5;
  double tol = 1e-6;
  /// Denominator floor for the relative error. Entries whose true gradient
  /// is below this magnitude are compared absolutely against it.
  double floor = 1e-6;
  /// Use the fourth-order five-point stencil instead of the central difference.
  bool five_point = false;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t worst_param = 0;
  std::size_t worst_index = 0;
  std::size_t checked = 0;
  bool passed = false;
  std::vector<std::vector<double>> analytic;
  std::vector<std::vector<double>> numeric;
};

/// Compares reverse-mode gradients of a scalar function against central
/// differences. `f` must register every tensor in `params` with
/// Tape::param and return the scalar output; it is called 1 + 2N times (1 + 4N with the five-point stencil).
inline GradCheckReport grad_check(const std::function<Var(Tape&)>& f,
                                  const std::vector<Tensor*>& params,
                                  const GradCheckOptions& opt = {}) {
  if (!(opt.h > 0.0)) throw ConfigError("grad_check: h must be positive");
  GradCheckReport rep;
  for (Tensor* p : params) {
    p->ensure_grad();
    p->zero_grad();
  }
  {
    Tape tape;
    Var out = f(tape);
    tape.backward(out);
  }
  auto eval = [&f]() {
    Tape tape;
    const double v = f(tape).value().item();
    if (!std::isfinite(v)) throw NumericError("grad_check: non-finite function value");
    return v;
  };
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor* p = params[pi];
    rep.analytic.emplace_back(p->grad().begin(), p->grad().end());
    std::vector<double> num(p->numel());
    for (std::size_t i = 0; i < p->numel(); ++i) {
      const double saved = (*p)[i];
      auto at = [&](double offset) {
        (*p)[i] = saved + offset;
        return eval();
      };
      if (opt.five_point) {
        const double up2 = at(2 * opt.h), up = at(opt.h), dn = at(-opt.h), dn2 = at(-2 * opt.h);
        num[i] = (dn2 - 8.0 * dn + 8.0 * up - up2) / (12.0 * opt.h);
      } else {
        const double up = at(opt.h), dn = at(-opt.h);
        num[i] = (up - dn) / (2.0 * opt.h);
      }
      (*p)[i] = saved;
      const double a = rep.analytic.back()[i];
      const double abs_err = std::fabs(a - num[i]);
      const double denom = std::max({std::fabs(a), std::fabs(num[i]), opt.floor});
      const double rel = abs_err / denom;
      rep.max_abs_error = std::max(rep.max_abs_error, abs_err);
      if (rel > rep.max_rel_error) {
        rep.max_rel_error = rel;
        rep.worst_param = pi;
        rep.worst_index = i;
      }
      ++rep.checked;
    }
    rep.numeric.push_back(std::move(num));
  }
  rep.passed = rep.max_rel_error < opt.tol;
  return rep;
}

}  // namespace polymlm
