#pragma once

#include <vector>

#include "latentcsi/nn/tape.hpp"

namespace latentcsi::nn {

struct AdamConfig {
  double lr = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam with bias correction over every parameter of a ParamSet. Reads
/// `Param::grad`; parameters that have not received a gradient are skipped.
class Adam {
 public:
  Adam(ParamSet<float>& params, AdamConfig cfg);

  void step();
  int steps() const { return t_; }

 private:
  ParamSet<float>& params_;
  AdamConfig cfg_;
  std::vector<std::vector<float>> m_, v_;
  int t_ = 0;
};

}  // namespace latentcsi::nn
