#pragma once

// Central finite-difference gradient oracle for tests. Kept independent of
// the tape's adjoint implementations on purpose: it only calls forward
// evaluation through a caller-provided closure.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "mia/tensor.hpp"

namespace mia::testing {

struct FdReport {
  double max_rel_err = 0.0;
  std::string worst;  // "param <i> elem <j>"
};

// f: evaluates the scalar loss from current param values (no tape needed).
// analytic gradients must already be accumulated on the params.
inline FdReport fd_compare(std::vector<Tensor> params,
                           const std::function<double()>& f, double h = 1e-5) {
  FdReport rep;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    auto& vals = params[pi].values();
    const auto& grad = params[pi].grad_view();
    for (size_t j = 0; j < vals.size(); ++j) {
      const double orig = vals[j];
      vals[j] = orig + h;
      const double fp = f();
      vals[j] = orig - h;
      const double fm = f();
      vals[j] = orig;
      const double fd = (fp - fm) / (2.0 * h);
      const double rel = std::fabs(fd - grad[j]) / std::max(1.0, std::fabs(fd));
      if (rel > rep.max_rel_err) {
        rep.max_rel_err = rel;
        rep.worst = "param " + std::to_string(pi) + " elem " + std::to_string(j) + " fd=" +
                    std::to_string(fd) + " analytic=" + std::to_string(grad[j]);
      }
    }
  }
  return rep;
}

}  // namespace mia::testing
