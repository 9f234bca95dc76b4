#pragma once

// Gamma-family functions for positive real arguments. All throw DomainError
// for x <= 0 or non-finite x. Accuracy is better than 1e-10 absolute on
// [1e-3, 1e4].

namespace fedsim::special {

double lgamma(double x);
double digamma(double x);
// d/dx digamma(x); needed for the Dirichlet KL gradient.
double trigamma(double x);

}  // namespace fedsim::special
