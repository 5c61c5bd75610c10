#include "refprior/grad_check.hpp"

#include <cmath>

namespace refprior::num {

namespace {

double evaluate(const LossBuilder& loss, const std::vector<Tensor2d>& params) {
  Tape<double> tape;
  std::vector<Var<double>> handles;
  handles.reserve(params.size());
  for (const auto& p : params) handles.push_back(tape.constant(p));
  const Var<double> out = loss(tape, handles);
  const Tensor2d& v = tape.value(out);
  require(v.rows() == 1 && v.cols() == 1, "grad_check: loss must be 1x1");
  if (!std::isfinite(v(0, 0))) throw ContractViolation("grad_check: non-finite loss");
  return v(0, 0);
}

}  // namespace

GradCheckResult grad_check(const LossBuilder& loss, const std::vector<Tensor2d>& params, double h) {
  require(h > 0.0, "grad_check: step must be positive");
  for (const auto& p : params) require_finite(p, "grad_check parameter");

  Tape<double> tape;
  std::vector<Var<double>> handles;
  for (const auto& p : params) handles.push_back(tape.parameter(p));
  const Var<double> out = loss(tape, handles);
  if (!std::isfinite(tape.value(out)(0, 0))) throw ContractViolation("grad_check: non-finite loss");
  tape.backward(out);

  GradCheckResult result;
  std::vector<Tensor2d> probe = params;
  for (std::size_t p = 0; p < params.size(); ++p) {
    const Tensor2d analytic = tape.grad(handles[p]);
    for (std::size_t i = 0; i < params[p].size(); ++i) {
      const double original = params[p].flat()[i];
      probe[p].flat()[i] = original + h;
      const double up = evaluate(loss, probe);
      probe[p].flat()[i] = original - h;
      const double down = evaluate(loss, probe);
      probe[p].flat()[i] = original;

      const double numeric = (up - down) / (2.0 * h);
      const double err = std::abs(analytic.flat()[i] - numeric) / std::max(1.0, std::abs(numeric));
      if (err > result.max_relative_error) {
        result.max_relative_error = err;
        result.worst_param = p;
        result.worst_entry = i;
      }
      ++result.entries_checked;
    }
  }
  return result;
}

}  // namespace refprior::num
