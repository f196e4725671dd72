#include "nanoflow/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "nanoflow/errors.hpp"

namespace nf {

namespace {

double eval_scalar(const std::function<Tensor()>& f) {
  NoGradGuard guard;
  Tensor y = f();
  if (y.numel() != 1) throw ContractError("finite_diff_check needs a scalar function");
  return y.item();
}

}  // namespace

double finite_diff_check_leaf(const std::function<Tensor()>& f, Tensor leaf, double step) {
  if (!(step > 0.0)) throw ContractError("finite difference step must be positive");
  if (eval_scalar(f) != eval_scalar(f)) throw OracleError("function is not deterministic");

  const bool had_grad = leaf.requires_grad();
  leaf.set_requires_grad(true);
  leaf.zero_grad();
  {
    GradTape tape;
    Tensor y = f();
    tape.backward(y);
  }
  std::vector<double> analytic(leaf.numel(), 0.0);
  if (leaf.has_grad()) std::copy(leaf.grad().begin(), leaf.grad().end(), analytic.begin());
  leaf.zero_grad();
  leaf.set_requires_grad(had_grad);

  double worst = 0.0;
  auto values = leaf.mutable_data();
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double saved = values[i];
    values[i] = saved + step;
    const double up = eval_scalar(f);
    values[i] = saved - step;
    const double down = eval_scalar(f);
    values[i] = saved;
    const double central = (up - down) / (2.0 * step);
    worst = std::max(worst, std::abs(analytic[i] - central) / (std::abs(central) + 1e-8));
  }
  return worst;
}

double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double step) {
  Tensor leaf = x.clone();
  return finite_diff_check_leaf([&] { return f(leaf); }, leaf, step);
}

}  // namespace nf
