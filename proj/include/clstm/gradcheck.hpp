#pragma once

#include <functional>
#include <string>

#include "clstm/tensor.hpp"

namespace clstm {

struct CheckReport {
  double max_rel_err = 0.0;
  bool pass = false;
  bool nonfinite = false;
  std::string detail;
};

/// Compares the analytic gradient of the scalar-valued function `f` at `x`
/// against central finite differences. `f` must be deterministic.
CheckReport finite_diff_check(const std::function<Tensor(const Tensor&)>& f,
                              const Tensor& x, double step, double tol);

}  // namespace clstm
