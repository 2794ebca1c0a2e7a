#pragma once

#include <functional>
#include <string>
#include <vector>

#include "capsar/autograd.hpp"

namespace capsar {

struct ParamCheck {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t coordinates = 0;
  std::vector<ParamCheck> per_param;  // canonical name order
};

// Builds a scalar computation on the given tape. Parameters must be bound with
// tape.parameter(name, params.at(name)). Must be deterministic.
using ScalarGraph = std::function<Var<double>(Tape<double>&, const ParamSet<double>&)>;

// Compares tape gradients with central differences (f(x+eps) - f(x-eps)) / 2eps
// for every coordinate of every parameter. Relative error uses the
// denominator max(|analytic|, |numeric|, floor). Parameters are restored
// exactly on return. Differencing roundoff is about 1e-16 |f| / eps, so for
// large graphs a floor well above that keeps near-zero coordinates from being
// judged on noise alone.
GradCheckReport finite_diff_check(const ScalarGraph& f, ParamSet<double>& params, double eps = 1e-5,
                                  double floor = 1e-8);

}  // namespace capsar
