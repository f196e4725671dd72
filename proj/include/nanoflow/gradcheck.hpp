#pragma once

#include <functional>

#include "nanoflow/tensor.hpp"

namespace nf {

// Max over coordinates of |analytic - central difference| / (|central difference| + 1e-8)
// for the scalar function f at x. Throws OracleError when f is not
// deterministic (two evaluations at x disagree).
double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double step = 1e-5);

// Same check for a parameter already wired into f: perturbs leaf in place and
// restores it afterwards.
double finite_diff_check_leaf(const std::function<Tensor()>& f, Tensor leaf, double step = 1e-5);

}  // namespace nf
