#pragma once

// Analytic-vs-finite-difference check of every trainable leaf through the
// full training loss on a small model.

#include <cstddef>
#include <string>
#include <vector>

#include "dear/config.hpp"

namespace dear {

struct GradcheckLeaf {
  std::string name;
  std::size_t numel = 0;
  double max_rel_err = 0.0;
  double max_abs_err = 0.0;
};

struct GradcheckReport {
  std::vector<GradcheckLeaf> leaves;
  double max_rel_err = 0.0;
  std::vector<std::string> frozen_with_grad;  // should stay empty
  double loss = 0.0;
};

/// Relative error with a floor on the denominator so that near-zero
/// gradients compare on an absolute scale.
inline constexpr double kGradcheckFloor = 1e-6;

/// Uses cfg's widths and head counts with `layers` layers, injection at
/// layer 1 and a tiny three-class batch; loss weights come from cfg.loss.
GradcheckReport run_gradcheck(const RunConfig& cfg, int layers = 2, double h = 1e-5);

}  // namespace dear
