#pragma once

// Central finite-difference oracle for gradient checks. It only reads and
// perturbs parameter values and re-evaluates the loss without tracking
// gradients, so it shares nothing with the backward pass it checks.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "dialogkit/ops.hpp"
#include "dialogkit/tensor.hpp"

namespace dktest {

struct GradCheck {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
};

// Relative error |a - n| / max(|a| + |n|, floor). The floor keeps entries
// whose true gradient is ~0 from dominating through rounding noise.
inline double rel_error(double analytic, double numeric, double floor = 1e-6) {
  return std::abs(analytic - numeric) /
         std::max(std::abs(analytic) + std::abs(numeric), floor);
}

// Compares autodiff gradients of `loss_fn` w.r.t. `params` against central
// differences with step h. At most `max_per_tensor` entries per tensor are
// probed (evenly spaced), to keep large models cheap.
inline GradCheck check_gradients(const std::function<dialogkit::nn::Tensor()>& loss_fn,
                                 std::vector<dialogkit::nn::Tensor> params,
                                 double h = 1e-5, std::size_t max_per_tensor = 64) {
  using dialogkit::nn::Tensor;
  for (auto& p : params) p.zero_grad();
  Tensor loss = loss_fn();
  dialogkit::nn::backward(loss);
  std::vector<std::vector<double>> analytic;
  for (auto& p : params) {
    if (p.has_grad()) {
      analytic.emplace_back(p.grad().begin(), p.grad().end());
    } else {
      analytic.emplace_back(p.numel(), 0.0);
    }
  }
  GradCheck result;
  dialogkit::nn::NoGradGuard guard;
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto values = params[k].mutable_data();
    const std::size_t n = values.size();
    const std::size_t stride = std::max<std::size_t>(1, n / max_per_tensor);
    for (std::size_t i = 0; i < n; i += stride) {
      const double orig = values[i];
      values[i] = orig + h;
      const double up = loss_fn().item();
      values[i] = orig - h;
      const double down = loss_fn().item();
      values[i] = orig;
      const double numeric = (up - down) / (2.0 * h);
      result.max_rel_error =
          std::max(result.max_rel_error, rel_error(analytic[k][i], numeric));
      ++result.checked;
    }
  }
  return result;
}

}  // namespace dktest
