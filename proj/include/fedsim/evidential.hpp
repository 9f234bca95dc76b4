#pragma once

// Dirichlet opinions, the class-frequency-weighted prior, and the evidential
// loss (expected squared error plus annealed KL to the prior on misleading
// evidence).

#include <cstddef>
#include <span>
#include <vector>

#include "fedsim/tensor.hpp"

namespace fedsim::evidential {

struct ClassPrior {
  std::vector<double> weights;         // W_k, sums to K
  std::vector<std::size_t> counts;     // N_k
  std::size_t total = 0;               // N
  std::size_t num_classes() const { return weights.size(); }
};

// W_k = K/(K-1) * (1 - N_k/N). Throws DomainError when some class holds every
// sample (its weight would be zero) or when N = 0 or K < 2.
ClassPrior weighted_prior(std::span<const std::size_t> class_counts);
ClassPrior uniform_prior(std::size_t num_classes);

struct DirichletOpinion {
  std::vector<double> evidence;
  std::vector<double> prior;
  std::vector<double> alpha;
  double strength = 0.0;
  // (alpha_k - W_k) / S, which is (alpha_k - 1) / S under the uniform prior
  std::vector<double> beliefs;
  std::vector<double> expected;  // alpha_k / S
  double vacuity = 1.0;          // K / S
};

DirichletOpinion opinion(std::span<const double> evidence, std::span<const double> prior);
DirichletOpinion opinion(std::span<const double> evidence, const ClassPrior& prior);

double vacuity(const DirichletOpinion& op);
double vacuity(std::span<const double> evidence, std::span<const double> prior);

// Sum_k (y_k - alpha_k/S)^2 + alpha_k (S - alpha_k) / (S^2 (S + 1)). `y` must be one-hot.
double evidential_mse(std::span<const double> y, std::span<const double> alpha);

// KL(Dir(alpha_tilde) || Dir(w)) in closed form.
double kl_to_prior(std::span<const double> alpha_tilde, std::span<const double> w);

// Replaces the true-class entry of alpha with its prior weight.
std::vector<double> masked_alpha(std::span<const double> y, std::span<const double> alpha, std::span<const double> w);

// min(1, t/10)
double annealing(double epoch);

double evidential_loss(std::span<const double> y, std::span<const double> alpha, std::span<const double> w, double epoch);

std::vector<double> one_hot(std::size_t label, std::size_t num_classes);

// Batch-mean evidential loss on tape. `evidence` is [B, K]; alpha = evidence + prior.
Tensor evidential_loss(Tape& tape, const Tensor& evidence, std::span<const std::size_t> labels,
                       std::span<const double> prior, double epoch);

}  // namespace fedsim::evidential
