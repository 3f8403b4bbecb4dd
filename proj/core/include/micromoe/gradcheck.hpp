#pragma once

#include <functional>
#include <map>
#include <string>

#include "micromoe/graph.hpp"
#include "micromoe/param.hpp"

namespace micromoe {

/// Builds a scalar loss on the given tape from the parameters it captured.
using LossBuilder = std::function<Val(Graph&)>;

struct GradCheckReport {
  std::map<std::string, double> per_param;  // max relative error per name
  double max_error = 0.0;
  long checked = 0;
  long skipped = 0;  // coordinates excluded for sitting on a ReLU kink
};

/// Central-difference gradient check against the tape.
///
/// For every coordinate of every trainable parameter, compares the reverse-
/// mode gradient with (f(x+eps) - f(x-eps)) / (2 eps) and reports
/// |g_ad - g_fd| / max(|g_ad|, |g_fd|, 1e-8). A coordinate whose base or
/// perturbed evaluations bring any ReLU input within 1e-7 of zero is
/// excluded from the maximum (non-differentiable point).
///
/// The builder must be deterministic: it is evaluated twice up front and a
/// value mismatch throws invalid_argument.
GradCheckReport finite_difference_check(const LossBuilder& f,
                                        ParamSet& params, double eps = 1e-5);

}  // namespace micromoe
