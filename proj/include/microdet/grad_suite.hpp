#pragma once

#include <string>
#include <vector>

#include "microdet/grad_check.hpp"

namespace microdet {

struct GradSuiteEntry {
  std::string name;
  std::string kind;    // "primitive", "block" or "loss"
  double tolerance;    // max relative error allowed
  GradCaseFactory factory;
  double plateau_floor = 0.0;

  GradCheckOptions options() const {
    GradCheckOptions o;
    o.plateau_floor = plateau_floor;
    return o;
  }
};

// Every differentiable primitive, block and the composite loss, in f64.
const std::vector<GradSuiteEntry>& grad_suite();
const GradSuiteEntry* find_grad_entry(const std::string& name);

}  // namespace microdet
