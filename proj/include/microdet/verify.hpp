#pragma once

#include <cstdint>
#include <vector>

namespace microdet {

struct FuseCheckReport {
  std::vector<double> block_trial_max;  // per random RepConvN instance (f32)
  std::vector<double> model_input_max;  // per random input to a RepGFPN detector (f32)
  int fused_blocks = 0;                 // RepConvN blocks fused in the detector

  double block_max() const;
  double model_max() const;
  bool passed(double block_tol = 1e-5, double model_tol = 1e-4) const;
};

// Fused-vs-unfused max-abs deviation in eval mode. Blocks draw random shapes,
// strides and batch-norm statistics; the detector warms its batch-norm
// statistics on random images before the inputs are compared.
FuseCheckReport fuse_check(std::uint64_t seed, int block_trials = 1000, int model_inputs = 100);

}  // namespace microdet
