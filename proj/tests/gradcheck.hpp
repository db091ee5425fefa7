#pragma once

// Central finite-difference oracle, independent of the backward closures it
// checks: perturbs each input element by +/-h and re-evaluates the forward.

#include <cmath>
#include <functional>
#include <vector>

#include "pathadapt/random.hpp"
#include "pathadapt/tensor.hpp"

namespace pathadapt::testing {

using DTensor = Tensor<double>;

struct GradCheckResult {
  double rel_error = 0.0;  // ||analytic - numeric|| / max(||analytic||, ||numeric||)
  double max_abs = 0.0;
};

inline DTensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0,
                             bool requires_grad = true) {
  DTensor t(std::move(shape));
  for (auto& v : t.values()) v = rng.uniform(lo, hi);
  t.set_requires_grad(requires_grad);
  return t;
}

// `loss` must rebuild its graph from the current values of `inputs` each call.
inline GradCheckResult grad_check(const std::function<DTensor()>& loss, std::vector<DTensor> inputs,
                                  double h = 1e-3) {
  for (auto& t : inputs) t.zero_grad();
  loss().backward();
  double diff2 = 0.0, an2 = 0.0, nu2 = 0.0, max_abs = 0.0;
  for (auto& t : inputs) {
    std::vector<double> analytic(t.grad().begin(), t.grad().end());
    for (std::size_t i = 0; i < t.size(); ++i) {
      const double orig = t[i];
      double plus, minus;
      {
        NoGradGuard ng;
        t[i] = orig + h;
        plus = loss().item();
        t[i] = orig - h;
        minus = loss().item();
      }
      t[i] = orig;
      const double numeric = (plus - minus) / (2 * h);
      diff2 += (analytic[i] - numeric) * (analytic[i] - numeric);
      an2 += analytic[i] * analytic[i];
      nu2 += numeric * numeric;
      max_abs = std::max(max_abs, std::abs(analytic[i] - numeric));
    }
  }
  const double denom = std::max({std::sqrt(an2), std::sqrt(nu2), 1e-12});
  return {std::sqrt(diff2) / denom, max_abs};
}

}  // namespace pathadapt::testing
