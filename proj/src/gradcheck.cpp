#include "clstm/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace clstm {

CheckReport finite_diff_check(const std::function<Tensor(const Tensor&)>& f,
                              const Tensor& x, double step, double tol) {
  CheckReport report;
  Tensor var = x.detach();
  var.set_requires_grad(true);

  Tensor y;
  try {
    y = f(var);
  } catch (const std::exception& e) {
    report.nonfinite = true;
    report.detail = std::string("forward failed: ") + e.what();
    return report;
  }
  if (y.size() != 1) {
    report.detail = "function did not return a scalar";
    return report;
  }
  if (!std::isfinite(y.value())) {
    report.nonfinite = true;
    report.detail = "non-finite function value";
    return report;
  }
  var.zero_grad();
  y.backward();
  std::vector<double> analytic = var.grad();

  for (std::size_t i = 0; i < var.size(); ++i) {
    double saved = var.data()[i];
    var.data()[i] = saved + step;
    double fp = f(var.detach()).value();
    var.data()[i] = saved - step;
    double fm = f(var.detach()).value();
    var.data()[i] = saved;
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      report.nonfinite = true;
      report.detail = "non-finite value during perturbation at index " +
                      std::to_string(i);
      return report;
    }
    double numeric = (fp - fm) / (2.0 * step);
    double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1.0});
    double rel = std::abs(analytic[i] - numeric) / denom;
    if (!std::isfinite(analytic[i])) {
      report.nonfinite = true;
      report.detail = "non-finite analytic gradient at index " +
                      std::to_string(i);
      return report;
    }
    if (rel > report.max_rel_err) {
      report.max_rel_err = rel;
      report.detail = "worst index " + std::to_string(i) + ": analytic " +
                      std::to_string(analytic[i]) + " numeric " +
                      std::to_string(numeric);
    }
  }
  report.pass = !report.nonfinite && report.max_rel_err < tol;
  return report;
}

}  // namespace clstm
