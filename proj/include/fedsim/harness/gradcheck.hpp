#pragma once

// Finite-difference verification of every differentiable op and composite loss.

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "fedsim/tensor.hpp"

namespace fedsim::harness::gradcheck {

struct Problem {
  std::vector<Tensor> inputs;  // leaves to differentiate, requires_grad set
  std::function<Tensor(Tape&, std::span<const Tensor>)> loss;  // scalar
};

struct Case {
  std::string name;
  std::function<Problem(std::uint64_t seed)> make;
};

struct Options {
  std::size_t seeds = 20;  // seeds 0 .. seeds-1
  double step = 1e-6;      // central difference step
  double tolerance = 1e-4;
};

struct CaseReport {
  std::string name;
  double max_error = 0.0;
  std::uint64_t worst_seed = 0;
  bool passed = false;
  std::string error;  // exception text, empty when the case ran
};

// ||a - n|| / max(||a||, ||n||, 1e-10) over the concatenated gradient.
double relative_error(std::span<const double> analytic, std::span<const double> numeric);

// Analytic vs central-difference gradient for one seed.
double check_once(const Problem& problem, double step);

CaseReport run_case(const Case& c, const Options& options);

std::vector<Case> standard_cases();

std::vector<CaseReport> run_suite(const std::vector<Case>& cases, const Options& options);

// One line per case: name, max relative error, worst seed, PASS/FAIL; then a summary line.
std::string format_report(const std::vector<CaseReport>& reports, const Options& options);

}  // namespace fedsim::harness::gradcheck
