#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "mhss/errors.hpp"
#include "mhss/tensor.hpp"

namespace mhss {

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t worst_element = 0;
  double analytic_at_worst = 0.0;
  double numeric_at_worst = 0.0;
};

/// Compares the analytic gradient of a deterministic scalar-valued closure
/// against central finite differences (f(x+eps) - f(x-eps)) / 2eps, element
/// by element over the given parameters. Relative error per element is
/// |a - n| / max(1e-5, |a| + |n|); the report carries the worst one. The
/// denominator floor absorbs finite-difference roundoff (about
/// |f| * machine-eps / eps, i.e. ~1e-11 here) on near-zero gradients, where
/// a pure ratio would amplify that noise past any sensible threshold.
///
/// The closure must rebuild its graph on every call: parameters are edited
/// in place between invocations.
inline GradCheckReport grad_check(const std::function<Tensor()>& f,
                                  const std::vector<std::pair<std::string, Tensor>>& params,
                                  double eps) {
  if (!(eps > 0.0)) throw ContractError("grad_check: eps must be > 0");

  for (const auto& [name, t] : params) {
    Tensor copy = t;
    copy.zero_grad();
  }
  Tensor loss = f();
  if (!std::isfinite(loss.value())) throw NumericError("grad_check: non-finite loss value");
  backward(loss);

  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (const auto& [name, t] : params) {
    analytic.push_back(t.has_grad() ? t.grad() : std::vector<double>(t.size(), 0.0));
  }

  GradCheckReport report;
  NoGradGuard no_grad;  // probe passes only need values
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor t = params[pi].second;
    for (std::size_t i = 0; i < t.size(); ++i) {
      const double saved = t.data()[i];
      t.data()[i] = saved + eps;
      const double f_plus = f().value();
      t.data()[i] = saved - eps;
      const double f_minus = f().value();
      t.data()[i] = saved;
      if (!std::isfinite(f_plus) || !std::isfinite(f_minus)) {
        throw NumericError("grad_check: non-finite probe at " + params[pi].first + "[" +
                           std::to_string(i) + "]");
      }
      const double numeric = (f_plus - f_minus) / (2.0 * eps);
      const double a = analytic[pi][i];
      const double rel = std::abs(a - numeric) / std::max(1e-5, std::abs(a) + std::abs(numeric));
      if (rel > report.max_rel_error) {
        report.max_rel_error = rel;
        report.worst_param = params[pi].first;
        report.worst_element = i;
        report.analytic_at_worst = a;
        report.numeric_at_worst = numeric;
      }
    }
  }
  return report;
}

inline double grad_check_max_error(const std::function<Tensor()>& f,
                                   const std::vector<Tensor>& params, double eps) {
  std::vector<std::pair<std::string, Tensor>> named;
  named.reserve(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) named.emplace_back("p" + std::to_string(i), params[i]);
  return grad_check(f, named, eps).max_rel_error;
}

}  // namespace mhss
