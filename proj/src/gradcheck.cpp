#include "capsar/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace capsar {

namespace {

double evaluate(const ScalarGraph& f, const ParamSet<double>& params) {
  Tape<double> tape;
  Var<double> out = f(tape, params);
  if (out.size() != 1) throw DimensionError("gradient check target must be scalar");
  const double v = out.value()[0];
  if (!std::isfinite(v)) throw NumericError("gradient check target is not finite");
  return v;
}

}  // namespace

GradCheckReport finite_diff_check(const ScalarGraph& f, ParamSet<double>& params, double eps, double floor) {
  GradMap<double> analytic;
  {
    Tape<double> tape;
    Var<double> out = f(tape, params);
    if (out.size() != 1) throw DimensionError("gradient check target must be scalar");
    if (!std::isfinite(out.value()[0])) throw NumericError("gradient check target is not finite");
    tape.backward(out, analytic);
  }

  GradCheckReport report;
  for (auto& [name, tensor] : params) {
    ParamCheck check;
    check.name = name;
    const auto it = analytic.find(name);
    for (std::size_t i = 0; i < tensor.size(); ++i) {
      const double saved = tensor[i];
      double up = 0.0, down = 0.0;
      try {
        tensor[i] = saved + eps;
        up = evaluate(f, params);
        tensor[i] = saved - eps;
        down = evaluate(f, params);
      } catch (...) {
        tensor[i] = saved;
        throw;
      }
      tensor[i] = saved;

      const double numeric = (up - down) / (2.0 * eps);
      const double exact = it == analytic.end() ? 0.0 : it->second[i];
      const double denom = std::max({std::abs(exact), std::abs(numeric), floor});
      const double rel = std::abs(exact - numeric) / denom;
      if (i == 0 || rel > check.max_rel_error) {
        check.max_rel_error = rel;
        check.worst_index = i;
        check.analytic = exact;
        check.numeric = numeric;
      }
      ++report.coordinates;
    }
    if (report.worst_param.empty() || check.max_rel_error > report.max_rel_error) {
      report.max_rel_error = check.max_rel_error;
      report.worst_param = name;
    }
    report.per_param.push_back(std::move(check));
  }
  return report;
}

}  // namespace capsar
