#include "instcal/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace instcal {
namespace {

Real evaluate(const ScalarFn& f, const std::vector<Tensor>& params) {
  Graph g(false);
  std::vector<Var> leaves;
  leaves.reserve(params.size());
  for (const Tensor& p : params) leaves.push_back(g.leaf(p, false));
  const Real value = f(g, leaves).value().item();
  if (!std::isfinite(value)) throw NonFiniteError("grad_check: function value is not finite");
  return value;
}

}  // namespace

Real grad_check(const ScalarFn& f, const std::vector<Tensor>& params, Real eps) {
  if (!(eps > 0)) throw std::invalid_argument("grad_check: eps must be positive");

  std::vector<Tensor> analytic;
  {
    Graph g;
    std::vector<Var> leaves;
    for (const Tensor& p : params) leaves.push_back(g.leaf(p, true));
    Var out = f(g, leaves);
    if (!std::isfinite(out.value().item())) throw NonFiniteError("grad_check: function value is not finite");
    g.backward(out);
    for (Var v : leaves) analytic.push_back(g.has_grad(v) ? g.grad(v) : Tensor(v.shape(), Real(0)));
  }

  Real worst = 0;
  std::vector<Tensor> probe = params;
  for (std::size_t t = 0; t < probe.size(); ++t) {
    for (std::size_t i = 0; i < probe[t].numel(); ++i) {
      const Real original = probe[t][i];
      probe[t][i] = original + eps;
      const Real up = evaluate(f, probe);
      probe[t][i] = original - eps;
      const Real down = evaluate(f, probe);
      probe[t][i] = original;
      const Real numeric = (up - down) / (Real(2) * eps);
      const Real a = analytic[t][i];
      const Real denom = std::max({std::abs(a), std::abs(numeric), Real(1e-8)});
      worst = std::max(worst, std::abs(a - numeric) / denom);
    }
  }
  return worst;
}

}  // namespace instcal
