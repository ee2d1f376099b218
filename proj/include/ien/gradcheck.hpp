#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>

#include "ien/graph.hpp"
#include "ien/optim.hpp"

namespace ien {

// Builds a scalar loss from parameter leaves already placed on the graph.
using LossBuilder = std::function<Var(Graph<double>&, const std::map<std::string, Var>&)>;

ParamMap<double> analytic_gradient(const LossBuilder& build, const ParamMap<double>& params);

// Evaluates the loss only (no tape).
double evaluate_loss(const LossBuilder& build, const ParamMap<double>& params);

struct Coordinate {
  std::string param;
  std::size_t index;
};

// Central differences (L(p+h) - L(p-h)) / 2h at the requested coordinates.
std::vector<double> numeric_gradient(const LossBuilder& build, const ParamMap<double>& params,
                                     const std::vector<Coordinate>& coords, double h);

// max over pairs of |a-n| / max(|a|, |n|, 1e-5).
double max_relative_error(std::span<const double> analytic, std::span<const double> numeric);

struct GradCheckReport {
  double max_relative_error = 0.0;
  Coordinate worst{};
  std::size_t checked = 0;
  std::size_t kinks = 0;  // coordinates resolved by smaller steps
};

// Compares analytic and numeric gradients. With max_coords_per_param > 0 a
// seeded random subset of each parameter's coordinates is checked;
// analytic_scale != 1 corrupts the analytic side (harness self-test).
// Coordinates whose stencil straddles a ReLU kink are re-checked down to
// h/1000 and counted in `kinks`.
GradCheckReport finite_difference_check(const LossBuilder& build, const ParamMap<double>& params, double h = 1e-5,
                                        std::size_t max_coords_per_param = 0, std::uint64_t seed = 0,
                                        double analytic_scale = 1.0);

}  // namespace ien
