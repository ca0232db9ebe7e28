#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace nerdd::fusion {

struct GradCheckResult {
  std::string op;
  double max_rel_error = 0;
  double max_abs_error = 0;
  std::string worst_param;
  std::size_t coordinates = 0;  // scalar coordinates compared
  std::size_t reduced_steps = 0;  // coordinates re-probed with a smaller step after a kink crossing
  std::size_t skipped = 0;        // coordinates left out because every step crossed a kink
};

/// Operation names accepted by grad_check. `forward_detect` also accepts a
/// `forward_detect:<strategy>@<cutoff>` form.
const std::vector<std::string>& grad_check_ops();

struct GradCheckOptions {
  double step = 1e-3;
  /// Relative error is |a - n| / max(|a|, |n|, denominator_floor).
  double denominator_floor = 1e-6;
};

/// Compares analytic gradients of a random scalar objective against central
/// differences, over every parameter and input matrix the op touches.
GradCheckResult grad_check(const std::string& op, std::uint64_t seed, const GradCheckOptions& opt = {});

}  // namespace nerdd::fusion
