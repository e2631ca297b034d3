#pragma once

#include "okd/tensor.hpp"

#include <functional>
#include <span>

namespace okd {

/// Largest relative disagreement between the tape gradient of scalar `f` at `x`
/// and central differences, |a - n| / max(1, |a|, |n|).
/// `f` must also accept untracked tensors (it is evaluated off-tape for the
/// finite differences).
Scalar grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, Scalar eps = 1e-5);

/// Same check against parameters. `loss` builds the scalar on the given tape,
/// watching whichever parameters it uses; the probes perturb `params` in place
/// and restore them afterwards. At most `max_probes_per_param` entries of each
/// parameter are probed, spread evenly (0 = all).
Scalar grad_check(const std::function<Tensor(Tape&)>& loss, std::span<Parameter* const> params, Scalar eps = 1e-5,
                  Index max_probes_per_param = 0);

}  // namespace okd
