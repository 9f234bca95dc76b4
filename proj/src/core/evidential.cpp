#include "fedsim/evidential.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "fedsim/errors.hpp"
#include "fedsim/special.hpp"

namespace fedsim::evidential {
namespace {

void require_one_hot(std::span<const double> y) {
  std::size_t ones = 0;
  for (double v : y) {
    if (v == 1.0) ++ones;
    else if (v != 0.0) throw UsageError("label vector is not one-hot");
  }
  if (ones != 1) throw UsageError("label vector is not one-hot");
}

void require_same_size(std::size_t a, std::size_t b, const char* what) {
  if (a != b) throw DimensionError(std::string(what) + ": length " + std::to_string(a) + " vs " + std::to_string(b));
}

// d(evidential_mse)/d(alpha)
void mse_gradient(std::span<const double> y, std::span<const double> alpha, double S, std::span<double> out) {
  const std::size_t K = alpha.size();
  double sum_sq_p = 0.0, resid_dot_p = 0.0;
  for (std::size_t k = 0; k < K; ++k) {
    const double p = alpha[k] / S;
    sum_sq_p += p * p;
    resid_dot_p += (y[k] - p) * p;
  }
  for (std::size_t j = 0; j < K; ++j) {
    const double p = alpha[j] / S;
    const double d_fit = -2.0 / S * ((y[j] - p) - resid_dot_p);
    const double d_var = -2.0 * (p - sum_sq_p) / (S * (S + 1.0)) - (1.0 - sum_sq_p) / ((S + 1.0) * (S + 1.0));
    out[j] += d_fit + d_var;
  }
}

// d(kl_to_prior)/d(alpha_tilde), scaled and masked to the non-target classes
void kl_gradient(std::span<const double> y, std::span<const double> at, std::span<const double> w, double scale,
                 std::span<double> out) {
  const double S = std::accumulate(at.begin(), at.end(), 0.0);
  const double W = std::accumulate(w.begin(), w.end(), 0.0);
  const double shared = (S - W) * special::trigamma(S);
  for (std::size_t j = 0; j < at.size(); ++j) {
    if (y[j] == 1.0) continue;
    out[j] += scale * ((at[j] - w[j]) * special::trigamma(at[j]) - shared);
  }
}

}  // namespace

ClassPrior weighted_prior(std::span<const std::size_t> class_counts) {
  const std::size_t K = class_counts.size();
  if (K < 2) throw DomainError("weighted prior needs at least two classes");
  const std::size_t N = std::accumulate(class_counts.begin(), class_counts.end(), std::size_t{0});
  if (N == 0) throw DomainError("weighted prior needs at least one sample");
  ClassPrior prior;
  prior.counts.assign(class_counts.begin(), class_counts.end());
  prior.total = N;
  const double scale = static_cast<double>(K) / static_cast<double>(K - 1);
  for (std::size_t k = 0; k < K; ++k) {
    if (class_counts[k] == N)
      throw DomainError("degenerate class distribution: class " + std::to_string(k) +
                        " holds all samples, so its Dirichlet prior weight would be 0");
    prior.weights.push_back(scale * (1.0 - static_cast<double>(class_counts[k]) / static_cast<double>(N)));
  }
  return prior;
}

ClassPrior uniform_prior(std::size_t num_classes) {
  ClassPrior p;
  p.weights.assign(num_classes, 1.0);
  p.counts.assign(num_classes, 0);
  return p;
}

DirichletOpinion opinion(std::span<const double> evidence, std::span<const double> prior) {
  require_same_size(evidence.size(), prior.size(), "opinion");
  DirichletOpinion op;
  op.evidence.assign(evidence.begin(), evidence.end());
  op.prior.assign(prior.begin(), prior.end());
  for (std::size_t k = 0; k < evidence.size(); ++k) {
    if (!(evidence[k] >= 0.0)) throw UsageError("evidence must be non-negative, got " + std::to_string(evidence[k]));
    if (!(prior[k] > 0.0)) throw DomainError("Dirichlet prior weights must be positive");
    op.alpha.push_back(evidence[k] + prior[k]);
  }
  op.strength = std::accumulate(op.alpha.begin(), op.alpha.end(), 0.0);
  for (std::size_t k = 0; k < evidence.size(); ++k) {
    op.beliefs.push_back(evidence[k] / op.strength);
    op.expected.push_back(op.alpha[k] / op.strength);
  }
  op.vacuity = static_cast<double>(evidence.size()) / op.strength;
  return op;
}

DirichletOpinion opinion(std::span<const double> evidence, const ClassPrior& prior) { return opinion(evidence, prior.weights); }

double vacuity(const DirichletOpinion& op) { return op.vacuity; }

double vacuity(std::span<const double> evidence, std::span<const double> prior) {
  require_same_size(evidence.size(), prior.size(), "vacuity");
  double S = 0.0;
  for (std::size_t k = 0; k < evidence.size(); ++k) S += evidence[k] + prior[k];
  return static_cast<double>(evidence.size()) / S;
}

double evidential_mse(std::span<const double> y, std::span<const double> alpha) {
  require_same_size(y.size(), alpha.size(), "evidential_mse");
  require_one_hot(y);
  const double S = std::accumulate(alpha.begin(), alpha.end(), 0.0);
  double loss = 0.0;
  for (std::size_t k = 0; k < alpha.size(); ++k) {
    if (!(alpha[k] > 0.0)) throw DomainError("Dirichlet parameters must be positive");
    const double p = alpha[k] / S;
    loss += (y[k] - p) * (y[k] - p) + alpha[k] * (S - alpha[k]) / (S * S * (S + 1.0));
  }
  return loss;
}

double kl_to_prior(std::span<const double> alpha_tilde, std::span<const double> w) {
  require_same_size(alpha_tilde.size(), w.size(), "kl_to_prior");
  const double S = std::accumulate(alpha_tilde.begin(), alpha_tilde.end(), 0.0);
  const double W = std::accumulate(w.begin(), w.end(), 0.0);
  const double psi_S = special::digamma(S);
  double kl = special::lgamma(S) - special::lgamma(W);
  for (std::size_t k = 0; k < w.size(); ++k) {
    kl += special::lgamma(w[k]) - special::lgamma(alpha_tilde[k]);
    kl += (alpha_tilde[k] - w[k]) * (special::digamma(alpha_tilde[k]) - psi_S);
  }
  return kl;
}

std::vector<double> masked_alpha(std::span<const double> y, std::span<const double> alpha, std::span<const double> w) {
  require_same_size(y.size(), alpha.size(), "masked_alpha");
  require_same_size(w.size(), alpha.size(), "masked_alpha");
  std::vector<double> out(alpha.size());
  for (std::size_t k = 0; k < alpha.size(); ++k) out[k] = y[k] * w[k] + (1.0 - y[k]) * alpha[k];
  return out;
}

double annealing(double epoch) { return std::min(1.0, epoch / 10.0); }

double evidential_loss(std::span<const double> y, std::span<const double> alpha, std::span<const double> w, double epoch) {
  if (epoch < 0.0) throw UsageError("annealing epoch must be non-negative");
  const double mse = evidential_mse(y, alpha);
  const double lambda = annealing(epoch);
  if (lambda == 0.0) return mse;
  return mse + lambda * kl_to_prior(masked_alpha(y, alpha, w), w);
}

std::vector<double> one_hot(std::size_t label, std::size_t num_classes) {
  if (label >= num_classes) throw UsageError("label " + std::to_string(label) + " out of range");
  std::vector<double> y(num_classes, 0.0);
  y[label] = 1.0;
  return y;
}

Tensor evidential_loss(Tape& tape, const Tensor& evidence, std::span<const std::size_t> labels,
                       std::span<const double> prior, double epoch) {
  if (evidence.rank() != 2) throw DimensionError("evidential_loss: evidence must be [B, K], got " + to_string(evidence.shape()));
  const std::size_t B = evidence.dim(0), K = evidence.dim(1);
  require_same_size(labels.size(), B, "evidential_loss labels");
  require_same_size(prior.size(), K, "evidential_loss prior");
  if (epoch < 0.0) throw UsageError("annealing epoch must be non-negative");
  const double lambda = annealing(epoch);
  const auto ev = evidence.data();
  auto grad = std::make_shared<std::vector<double>>(B * K, 0.0);
  double total = 0.0;
  std::vector<double> alpha(K);
  for (std::size_t b = 0; b < B; ++b) {
    const auto y = one_hot(labels[b], K);
    for (std::size_t k = 0; k < K; ++k) alpha[k] = ev[b * K + k] + prior[k];
    const std::span<double> g(grad->data() + b * K, K);
    const double S = std::accumulate(alpha.begin(), alpha.end(), 0.0);
    total += evidential_mse(y, alpha);
    mse_gradient(y, alpha, S, g);
    if (lambda > 0.0) {
      const auto at = masked_alpha(y, alpha, prior);
      total += lambda * kl_to_prior(at, prior);
      kl_gradient(y, at, prior, lambda, g);
    }
  }
  const double inv_b = 1.0 / static_cast<double>(B);
  return tape.record({}, {total * inv_b}, {evidence}, [e = Tensor(evidence), grad, inv_b](std::span<const double> g) mutable {
    auto ge = e.grad_buffer();
    const double c = g[0] * inv_b;
    for (std::size_t i = 0; i < ge.size(); ++i) ge[i] += c * (*grad)[i];
  });
}

}  // namespace fedsim::evidential
