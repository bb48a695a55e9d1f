#pragma once

#include <functional>
#include <string>
#include <vector>

#include "devit/tensor.hpp"

namespace devit {

struct GradReport {
  std::vector<double> max_rel_error;  // one entry per input
  std::vector<double> max_abs_error;
  double step = 0.0;
  double tolerance = 0.0;
  bool passed = false;

  double worst() const {
    double w = 0.0;
    for (double e : max_rel_error) w = std::max(w, e);
    return w;
  }
};

inline constexpr double kGradRelEps = 1e-8;

inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), kGradRelEps});
}

using ScalarClosure = std::function<Tensor(const std::vector<Tensor>&)>;

/// Compares reverse-mode gradients of a scalar closure against central
/// differences (f(x+h) - f(x-h)) / 2h, coordinate by coordinate.
inline GradReport grad_check(const ScalarClosure& f, const std::vector<Tensor>& inputs, double step = 1e-4,
                             double tolerance = 1e-3) {
  std::vector<Tensor> xs;
  xs.reserve(inputs.size());
  for (const Tensor& t : inputs) xs.push_back(t.detach().set_requires_grad(true));

  Tensor y = f(xs);
  if (y.numel() != 1) throw std::invalid_argument("grad_check: closure must return a scalar");
  backward(y);

  GradReport rep;
  rep.step = step;
  rep.tolerance = tolerance;
  NoGradGuard ng;
  for (Tensor& x : xs) {
    const std::vector<double> analytic = x.has_grad() ? std::vector<double>(x.grad().begin(), x.grad().end())
                                                      : std::vector<double>(x.numel(), 0.0);
    double worst_rel = 0.0, worst_abs = 0.0;
    for (std::size_t i = 0; i < x.numel(); ++i) {
      const double orig = x[i];
      x[i] = orig + step;
      const double fp = f(xs).item();
      x[i] = orig - step;
      const double fm = f(xs).item();
      x[i] = orig;
      const double numeric = (fp - fm) / (2.0 * step);
      worst_rel = std::max(worst_rel, relative_error(analytic[i], numeric));
      worst_abs = std::max(worst_abs, std::abs(analytic[i] - numeric));
    }
    rep.max_rel_error.push_back(worst_rel);
    rep.max_abs_error.push_back(worst_abs);
  }
  rep.passed = rep.worst() <= tolerance;
  return rep;
}

}  // namespace devit
