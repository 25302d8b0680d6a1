#include "miseg/gradcheck.hpp"

#include <cmath>
#include <stdexcept>

namespace miseg {

namespace {

double evaluate(const ScalarFn& fn, const std::vector<NDArray>& params) {
  Tape tape;
  std::vector<DiffArray> leaves;
  leaves.reserve(params.size());
  for (const NDArray& p : params) leaves.push_back(tape.leaf(p));
  return fn(tape, leaves).scalar_value();
}

}  // namespace

double grad_check(const ScalarFn& fn, const std::vector<NDArray>& params, double step) {
  if (step <= 0.0) throw std::invalid_argument("grad_check: step must be positive");

  const double v0 = evaluate(fn, params);
  const double v1 = evaluate(fn, params);
  if (v0 != v1) {
    throw std::invalid_argument("grad_check: function is not deterministic (" +
                                std::to_string(v0) + " vs " + std::to_string(v1) + ")");
  }

  // Analytic gradients.
  Tape tape;
  std::vector<DiffArray> leaves;
  leaves.reserve(params.size());
  for (const NDArray& p : params) leaves.push_back(tape.leaf(p));
  DiffArray loss = fn(tape, leaves);
  tape.backward(loss);

  double worst = 0.0;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    const NDArray* analytic = tape.gradient(leaves[pi]);
    for (int64_t i = 0; i < params[pi].size(); ++i) {
      std::vector<NDArray> probe;
      probe.reserve(params.size());
      for (const NDArray& p : params) probe.push_back(p);
      NDArray bumped = params[pi].clone();

      bumped[i] = params[pi][i] + step;
      probe[pi] = bumped;
      const double up = evaluate(fn, probe);
      bumped[i] = params[pi][i] - step;
      const double down = evaluate(fn, probe);

      const double numeric = (up - down) / (2.0 * step);
      const double exact = analytic ? (*analytic)[i] : 0.0;
      const double denom = std::max({std::fabs(exact), std::fabs(numeric), 1e-8});
      worst = std::max(worst, std::fabs(exact - numeric) / denom);
    }
  }
  return worst;
}

}  // namespace miseg
