#include "llamp/gradcheck.hpp"

#include <cmath>
#include <stdexcept>

namespace llamp {

namespace {

double eval_loss(const std::function<Tensor()>& loss_fn) {
  NoGradGuard ng;
  const double v = loss_fn().item();
  if (!std::isfinite(v))
    throw std::runtime_error("finite_difference_check: non-finite loss");
  return v;
}

}  // namespace

GradCheckReport finite_difference_check(const std::function<Tensor()>& loss_fn,
                                        const std::vector<Tensor>& params,
                                        double epsilon) {
  if (epsilon <= 0)
    throw std::invalid_argument("finite_difference_check: epsilon must be positive");

  for (const auto& p : params) p.node()->grad.resize(0, 0);
  Tensor loss = loss_fn();
  if (!std::isfinite(loss.item()))
    throw std::runtime_error("finite_difference_check: non-finite loss");
  backward(loss);

  std::vector<Matrix> analytic;
  analytic.reserve(params.size());
  for (const auto& p : params) analytic.push_back(p.grad());

  GradCheckReport report;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    Matrix& v = params[pi].mutable_value();
    for (Eigen::Index i = 0; i < v.rows(); ++i) {
      for (Eigen::Index j = 0; j < v.cols(); ++j) {
        const double saved = v(i, j);
        v(i, j) = saved + epsilon;
        const double up = eval_loss(loss_fn);
        v(i, j) = saved - epsilon;
        const double down = eval_loss(loss_fn);
        v(i, j) = saved;
        const double fd = (up - down) / (2.0 * epsilon);
        const double an = analytic[pi](i, j);
        const double denom = std::max({std::fabs(fd), std::fabs(an), 1e-6});
        const double rel = std::fabs(fd - an) / denom;
        report.max_rel_error = std::max(report.max_rel_error, rel);
        report.max_abs_analytic = std::max(report.max_abs_analytic, std::fabs(an));
        ++report.checked;
      }
    }
  }
  return report;
}

}  // namespace llamp
