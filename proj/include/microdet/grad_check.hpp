#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "microdet/rng.hpp"
#include "microdet/tensor.hpp"

namespace microdet {

struct GradCheckOptions {
  double eps = 1e-5;
  // Inputs are redrawn while any relu/max-pool operand lies closer than
  // kink_factor * eps to its switching point.
  double kink_factor = 10.0;
  int max_attempts = 50;
  // When positive, draws where some coordinate's derivative is nonzero but
  // below this floor (a loss plateau) are also redrawn.
  double plateau_floor = 0.0;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst;  // "leaf[i] (shape) at flat index j: analytic a, numeric n"
  std::int64_t coordinates = 0;
  int attempts = 1;
};

// One instance of a check: the leaves to differentiate and a closure that
// recomputes a scalar loss from their current values. A case may expose
// several scalar losses (probes), e.g. independent random projections of one
// block output; each coordinate is then compared on the probe where its
// analytic derivative is largest, which keeps the relative error away from
// coordinates whose derivative happens to be tiny under a single projection.
struct GradCase {
  std::vector<Tensor<double>> leaves;
  std::vector<std::string> names;  // optional, parallel to leaves
  std::function<Tensor<double>(int probe)> loss;
  int probes = 1;
};

using GradCaseFactory = std::function<GradCase(Rng&)>;

// max over leaf coordinates of |a - n| / max(|a|, |n|, 1e-12), where n is the
// central difference with step eps. Non-finite values throw FormatError naming
// the coordinate.
GradCheckReport grad_check(GradCase& c, const GradCheckOptions& opt = {});

// Draws cases from the factory (sub-seeded per attempt) until one is far
// enough from every kink, then checks it.
GradCheckReport grad_check(const GradCaseFactory& factory, std::uint64_t seed, const GradCheckOptions& opt = {});

// Closure form over freshly drawn N(0,1) inputs of the given shapes.
GradCheckReport grad_check(const std::function<Tensor<double>(const std::vector<Tensor<double>>&)>& fn,
                           const std::vector<Shape>& shapes, std::uint64_t seed, const GradCheckOptions& opt = {});

// Fixed random projection sum(r * y) with r ~ N(0,1) drawn from the seed;
// every output coordinate contributes a generic weight to the loss.
Tensor<double> random_projection(const Tensor<double>& y, std::uint64_t seed);

Tensor<double> random_normal(const Shape& shape, Rng& rng, double scale = 1.0);

}  // namespace microdet
