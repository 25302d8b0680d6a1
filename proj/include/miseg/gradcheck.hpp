#pragma once

#include <functional>
#include <vector>

#include "miseg/ops.hpp"

namespace miseg {

// Builds a scalar loss from leaves registered on the given record.
using ScalarFn = std::function<DiffArray(Tape&, const std::vector<DiffArray>&)>;

// Compares reverse-mode gradients of `fn` against central finite differences
// at the given step, over every entry of every parameter. Returns the
// maximum of |analytic - cd| / max(|analytic|, |cd|, 1e-8).
// `fn` must be deterministic; two evaluations that disagree are rejected.
double grad_check(const ScalarFn& fn, const std::vector<NDArray>& params, double step);

}  // namespace miseg
