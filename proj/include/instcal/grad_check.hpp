#pragma once

#include <functional>
#include <span>
#include <vector>

#include "instcal/graph.hpp"

namespace instcal {

/// Scalar-valued function of graph leaves, rebuilt on every evaluation.
using ScalarFn = std::function<Var(Graph&, std::span<const Var>)>;

/// Largest element-wise relative error between reverse-mode gradients of f and
/// central differences (f(p + eps) - f(p - eps)) / (2 eps), with denominator
/// max(|analytic|, |numeric|, 1e-8). Throws NonFiniteError if f is not finite.
Real grad_check(const ScalarFn& f, const std::vector<Tensor>& params, Real eps);

}  // namespace instcal
