#pragma once

#include <functional>
#include <vector>

#include "llamp/autodiff.hpp"

namespace llamp {

struct GradCheckReport {
  double max_rel_error = 0.0;
  double max_abs_analytic = 0.0;
  long checked = 0;
};

// Central-difference check of d(loss)/d(param) for every coordinate of every
// listed parameter against the analytic gradients from backward().
// loss_fn must rebuild the graph from the current parameter values on each
// call and return a 1x1 tensor. Relative error per coordinate is
// |fd - analytic| / max(|fd|, |analytic|, 1e-6). Throws on non-finite loss.
GradCheckReport finite_difference_check(const std::function<Tensor()>& loss_fn,
                                        const std::vector<Tensor>& params,
                                        double epsilon);

}  // namespace llamp
