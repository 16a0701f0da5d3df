#pragma once

// Central-difference gradient comparison over every scalar of a ParamSet.

#include <algorithm>
#include <cmath>
#include <functional>

#include "latentcsi/nn/tape.hpp"

namespace testsupport {

using latentcsi::nn::ParamSet;
using latentcsi::nn::Tape;
using latentcsi::nn::Var;

/// `loss` builds a scalar on the tape from the (trainable) params.
/// Returns max over scalars of |a - n| / max(1, |a|, |n|).
inline double max_grad_error(ParamSet<double>& params,
                             const std::function<Var(Tape<double>&, ParamSet<double>&)>& loss,
                             double eps = 1e-5) {
  params.zero_grad();
  {
    Tape<double> t;
    t.backward(loss(t, params));
  }
  double worst = 0;
  for (auto& p : params.params()) {
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double a = p.grad.empty() ? 0.0 : p.grad[i];
      const double v = p.value[i];
      auto eval = [&](double x) {
        p.value[i] = x;
        Tape<double> t(false);
        return t.value(loss(t, params))[0];
      };
      const double num = (eval(v + eps) - eval(v - eps)) / (2 * eps);
      p.value[i] = v;
      worst = std::max(worst, std::abs(a - num) / std::max({1.0, std::abs(a), std::abs(num)}));
    }
  }
  return worst;
}

}  // namespace testsupport
