#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "glscl/tensor.hpp"

// Central finite-difference verification of reverse-mode gradients.
// Independent of the tape: the numeric side only re-evaluates the forward
// function under perturbed inputs.

namespace glscl {

template <typename T>
struct GradCheckResult {
  double max_rel_err = 0.0;
  int64_t checked = 0;
};

// `loss_fn` rebuilds the scalar loss from the current values of `params`.
// Every element of every param is perturbed unless `max_per_tensor` caps it.
template <typename T, typename LossFn>
GradCheckResult<T> check_gradients(std::vector<Tensor<T>> params, LossFn loss_fn,
                                   T fd_eps = T(1e-5),
                                   int64_t max_per_tensor = -1) {
  for (auto& p : params) {
    p.set_requires_grad(true);
    p.zero_grad();
  }
  Tape<T> tape;
  {
    TapeScope<T> scope(tape);
    Tensor<T> loss = loss_fn();
    backward(loss);
  }
  GradCheckResult<T> res;
  for (auto& p : params) {
    std::vector<T> analytic = p.has_grad() ? p.grad() : std::vector<T>(p.values().size(), T(0));
    int64_t n = p.size();
    int64_t limit = max_per_tensor < 0 ? n : std::min(n, max_per_tensor);
    for (int64_t i = 0; i < limit; ++i) {
      T saved = p.data()[i];
      T lp, lm;
      {
        NoGradScope<T> ng;
        p.data()[i] = saved + fd_eps;
        lp = loss_fn().item();
        p.data()[i] = saved - fd_eps;
        lm = loss_fn().item();
        p.data()[i] = saved;
      }
      double numeric = (static_cast<double>(lp) - static_cast<double>(lm)) /
                       (2.0 * static_cast<double>(fd_eps));
      double rel = std::fabs(static_cast<double>(analytic[static_cast<size_t>(i)]) - numeric) /
                   std::max(1.0, std::fabs(numeric));
      res.max_rel_err = std::max(res.max_rel_err, rel);
      ++res.checked;
    }
  }
  return res;
}

}  // namespace glscl
