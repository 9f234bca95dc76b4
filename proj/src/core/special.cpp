#include "fedsim/special.hpp"

#include <cmath>
#include <numbers>
#include <string>

#include "fedsim/errors.hpp"

namespace fedsim::special {
namespace {

void check_domain(double x, const char* fn) {
  if (!(x > 0.0) || !std::isfinite(x)) throw DomainError(std::string(fn) + " requires a positive finite argument, got " + std::to_string(x));
}

// Stirling series for log Gamma, used for x >= 10.
double lgamma_asymptotic(double x) {
  const double z = 1.0 / x;
  const double z2 = z * z;
  const double series =
      z * (1.0 / 12.0 +
           z2 * (-1.0 / 360.0 +
                 z2 * (1.0 / 1260.0 +
                       z2 * (-1.0 / 1680.0 + z2 * (1.0 / 1188.0 + z2 * (-691.0 / 360360.0 + z2 * (1.0 / 156.0)))))));
  return (x - 0.5) * std::log(x) - x + 0.5 * std::log(2.0 * std::numbers::pi) + series;
}

double digamma_asymptotic(double x) {
  const double z2 = 1.0 / (x * x);
  const double series =
      z2 * (1.0 / 12.0 -
            z2 * (1.0 / 120.0 -
                  z2 * (1.0 / 252.0 - z2 * (1.0 / 240.0 - z2 * (1.0 / 132.0 - z2 * (691.0 / 32760.0 - z2 * (1.0 / 12.0)))))));
  return std::log(x) - 0.5 / x - series;
}

double trigamma_asymptotic(double x) {
  const double z = 1.0 / x;
  const double z2 = z * z;
  const double series =
      z2 * z * (1.0 / 6.0 -
                z2 * (1.0 / 30.0 -
                      z2 * (1.0 / 42.0 - z2 * (1.0 / 30.0 - z2 * (5.0 / 66.0 - z2 * (691.0 / 2730.0 - z2 * (7.0 / 6.0)))))));
  return z + 0.5 * z2 + series;
}

}  // namespace

double lgamma(double x) {
  check_domain(x, "lgamma");
  if (x >= 10.0) return lgamma_asymptotic(x);
  // Gamma(x) = Gamma(x + n) / (x (x+1) ... (x+n-1))
  double product = 1.0;
  while (x < 10.0) {
    product *= x;
    x += 1.0;
  }
  return lgamma_asymptotic(x) - std::log(product);
}

double digamma(double x) {
  check_domain(x, "digamma");
  double shift = 0.0;
  while (x < 6.0) {
    shift += 1.0 / x;
    x += 1.0;
  }
  return digamma_asymptotic(x) - shift;
}

double trigamma(double x) {
  check_domain(x, "trigamma");
  double shift = 0.0;
  while (x < 6.0) {
    shift += 1.0 / (x * x);
    x += 1.0;
  }
  return trigamma_asymptotic(x) + shift;
}

}  // namespace fedsim::special
