#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "khn/episodes.hpp"
#include "khn/model.hpp"

namespace khn {

struct GradcheckOptions {
  double step = 1e-5;
  double tolerance = 1e-4;
  // Denominator floor of the relative error |a - n| / max(|a|, |n|, floor).
  double error_floor = 1e-6;
  std::size_t max_parameters = 50000;
};

struct GroupCheck {
  std::string group;  // "theta_E", "theta_k" or "theta_H"
  std::size_t parameters = 0;
  std::size_t checked = 0;
  // Coordinates where x ± step crossed a ReLU/clamp/max-pool boundary.
  std::size_t skipped_kinks = 0;
  double max_rel_error = 0.0;
  std::string worst;  // "name[index]" of the largest error
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  bool passed = true;

  bool empty() const noexcept { return parameters == 0; }
};

struct GradcheckReport {
  std::vector<GroupCheck> groups;
  std::size_t total_parameters = 0;
  bool passed = true;
};

// Compares backward() on the episode loss with central finite differences,
// one coordinate at a time. Throws ConfigError when the model has more than
// max_parameters parameters.
GradcheckReport gradcheck(const Model& model, const Episode& episode, const GradcheckOptions& options);

}  // namespace khn
