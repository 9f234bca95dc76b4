#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "fedsim/errors.hpp"
#include "fedsim/evidential.hpp"

using namespace fedsim;
using namespace fedsim::evidential;

namespace {

// E_{p ~ Dir(alpha)} ||y - p||^2 by sampling.
double monte_carlo_mse(const std::vector<double>& y, const std::vector<double>& alpha, std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<std::gamma_distribution<double>> g;
  for (double a : alpha) g.emplace_back(a, 1.0);
  std::vector<double> p(alpha.size());
  double total = 0.0;
  for (std::size_t s = 0; s < n; ++s) {
    double z = 0.0;
    for (std::size_t k = 0; k < alpha.size(); ++k) z += (p[k] = g[k](rng));
    double l = 0.0;
    for (std::size_t k = 0; k < alpha.size(); ++k) l += (y[k] - p[k] / z) * (y[k] - p[k] / z);
    total += l;
  }
  return total / static_cast<double>(n);
}

}  // namespace

TEST(Prior, Examples) {
  auto w = weighted_prior(std::vector<std::size_t>{50, 50}).weights;
  EXPECT_DOUBLE_EQ(w[0], 1.0);
  EXPECT_DOUBLE_EQ(w[1], 1.0);
  auto p = weighted_prior(std::vector<std::size_t>{60, 30, 10});
  EXPECT_NEAR(p.weights[0], 0.6, 1e-15);
  EXPECT_NEAR(p.weights[1], 1.05, 1e-15);
  EXPECT_NEAR(p.weights[2], 1.35, 1e-15);
  EXPECT_NEAR(std::accumulate(p.weights.begin(), p.weights.end(), 0.0), 3.0, 1e-12);
  EXPECT_EQ(p.total, 100u);
  EXPECT_THROW(weighted_prior(std::vector<std::size_t>{100, 0}), DomainError);
  EXPECT_THROW(weighted_prior(std::vector<std::size_t>{0, 0}), DomainError);
  EXPECT_THROW(weighted_prior(std::vector<std::size_t>{5}), DomainError);
}

TEST(Prior, WeightsSumToK) {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t K = 2 + rng() % 8;
    std::vector<std::size_t> counts(K);
    for (auto& c : counts) c = 1 + rng() % 1000;
    const auto w = weighted_prior(counts).weights;
    EXPECT_NEAR(std::accumulate(w.begin(), w.end(), 0.0), static_cast<double>(K), 1e-12);
  }
}

TEST(Opinion, Examples) {
  auto uni = uniform_prior(4);
  auto o = opinion(std::vector<double>(4, 0.0), uni);
  EXPECT_EQ(o.vacuity, 1.0);

  auto op = opinion(std::vector<double>{3, 1}, uniform_prior(2));
  EXPECT_DOUBLE_EQ(op.alpha[0], 4.0);
  EXPECT_DOUBLE_EQ(op.alpha[1], 2.0);
  EXPECT_DOUBLE_EQ(op.strength, 6.0);
  EXPECT_NEAR(op.expected[0], 2.0 / 3, 1e-15);
  EXPECT_NEAR(op.expected[1], 1.0 / 3, 1e-15);
  EXPECT_NEAR(op.vacuity, 1.0 / 3, 1e-15);
  EXPECT_NEAR(op.beliefs[0] + op.beliefs[1] + op.vacuity, 1.0, 1e-15);

  auto w = weighted_prior(std::vector<std::size_t>{60, 30, 10});
  auto z = opinion(std::vector<double>(3, 0.0), w);
  EXPECT_NEAR(z.expected[0], 0.2, 1e-15);
  EXPECT_NEAR(z.expected[1], 0.35, 1e-15);
  EXPECT_NEAR(z.expected[2], 0.45, 1e-15);

  EXPECT_NEAR(vacuity(std::vector<double>{8, 0}, std::vector<double>{1, 1}), 0.2, 1e-15);
  EXPECT_THROW(opinion(std::vector<double>{-1, 0}, uniform_prior(2)), UsageError);
}

TEST(Opinion, Identities) {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(0.0, 20.0);
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t K = 2 + rng() % 5;
    std::vector<std::size_t> counts(K);
    for (auto& c : counts) c = 1 + rng() % 100;
    auto prior = weighted_prior(counts);
    std::vector<double> e(K);
    for (auto& x : e) x = u(rng);
    auto o = opinion(e, prior);
    EXPECT_NEAR(o.vacuity, static_cast<double>(K) / o.strength, 1e-12);
    EXPECT_NEAR(std::accumulate(o.expected.begin(), o.expected.end(), 0.0), 1.0, 1e-12);
    EXPECT_NEAR(std::accumulate(o.beliefs.begin(), o.beliefs.end(), 0.0) + o.vacuity, 1.0, 1e-12);
  }
}

TEST(Vacuity, StrictlyDecreasesWithEvidence) {
  std::vector<double> e{1.0, 2.0, 0.5};
  const std::vector<double> w{1.0, 1.0, 1.0};
  double prev = vacuity(e, w);
  for (std::size_t k = 0; k < 3; ++k) {
    e[k] += 0.25;
    const double now = vacuity(e, w);
    EXPECT_LT(now, prev);
    prev = now;
  }
}

TEST(Mse, Examples) {
  EXPECT_NEAR(evidential_mse(std::vector<double>{1, 0}, std::vector<double>{1, 1}), 2.0 / 3, 1e-15);
  double prev = 1e9;
  for (double t : {1.0, 10.0, 100.0, 1e4, 1e6}) {
    const double l = evidential_mse(std::vector<double>{0, 1, 0}, std::vector<double>{1, t + 1, 1});
    EXPECT_LT(l, prev);
    prev = l;
  }
  EXPECT_LT(prev, 1e-5);
}

TEST(Mse, MatchesMonteCarlo) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.2, 6.0);
  for (int trial = 0; trial < 4; ++trial) {
    const std::size_t K = 3;
    std::vector<double> alpha(K);
    for (auto& a : alpha) a = u(rng);
    auto y = one_hot(rng() % K, K);
    EXPECT_NEAR(evidential_mse(y, alpha), monte_carlo_mse(y, alpha, 200000, trial), 1e-2);
  }
}

TEST(Kl, Examples) {
  EXPECT_NEAR(kl_to_prior(std::vector<double>{2, 1}, std::vector<double>{1, 1}), 0.1931471806, 1e-9);
  EXPECT_NEAR(kl_to_prior(std::vector<double>{0.6, 1.05, 1.35}, std::vector<double>{0.6, 1.05, 1.35}), 0.0, 1e-12);
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(0.05, 10.0);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t K = 2 + rng() % 4;
    std::vector<double> a(K), w(K);
    for (std::size_t k = 0; k < K; ++k) {
      a[k] = u(rng);
      w[k] = u(rng);
    }
    EXPECT_GE(kl_to_prior(a, w), -1e-12);
  }
}

TEST(MaskedAlpha, Examples) {
  auto m = masked_alpha(std::vector<double>{1, 0}, std::vector<double>{5, 3}, std::vector<double>{0.8, 1.2});
  EXPECT_DOUBLE_EQ(m[0], 0.8);
  EXPECT_DOUBLE_EQ(m[1], 3.0);
  const std::vector<double> w{0.7, 1.3};
  auto same = masked_alpha(std::vector<double>{0, 1}, w, w);
  EXPECT_NEAR(kl_to_prior(same, w), 0.0, 1e-12);
}

TEST(Annealing, Schedule) {
  EXPECT_EQ(annealing(0), 0.0);
  EXPECT_EQ(annealing(5), 0.5);
  EXPECT_EQ(annealing(10), 1.0);
  EXPECT_EQ(annealing(1000), 1.0);
  double prev = -1;
  for (double t = 0; t < 30; t += 0.5) {
    EXPECT_GE(annealing(t), prev);
    prev = annealing(t);
  }
}

TEST(EvidentialLoss, ReducesToMseAtEpochZero) {
  const std::vector<double> y{0, 1, 0}, alpha{2.0, 1.5, 4.0}, w{0.9, 1.2, 0.9};
  EXPECT_EQ(evidential_loss(y, alpha, w, 0.0), evidential_mse(y, alpha));
  EXPECT_EQ(evidential_loss(y, alpha, w, 10.0), evidential_loss(y, alpha, w, 1000.0));
  EXPECT_NEAR(evidential_loss(y, alpha, w, 5.0), evidential_mse(y, alpha) + 0.5 * kl_to_prior(masked_alpha(y, alpha, w), w),
              1e-14);
}

TEST(EvidentialLoss, TapeMatchesScalarAndMasksTrueClass) {
  const std::vector<double> prior{0.8, 1.2};
  const std::vector<std::size_t> labels{0, 1, 1};
  auto make = [] { return Tensor::from_data({3, 2}, {3.0, 0.5, 1.0, 2.0, 0.2, 0.1}, true); };
  auto e_full = make();
  auto e_mse = make();
  {
    Tape tape;
    auto l = evidential_loss(tape, e_full, labels, prior, 20.0);
    double ref = 0.0;
    for (std::size_t i = 0; i < 3; ++i) {
      std::vector<double> alpha{e_full.data()[2 * i] + prior[0], e_full.data()[2 * i + 1] + prior[1]};
      ref += evidential_loss(one_hot(labels[i], 2), alpha, prior, 20.0);
    }
    EXPECT_NEAR(l.item(), ref / 3.0, 1e-14);
    tape.backward(l);
  }
  {
    Tape tape;
    tape.backward(evidential_loss(tape, e_mse, labels, prior, 0.0));
  }
  // The KL part contributes nothing to true-class evidence gradients.
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(e_full.grad()[2 * i + labels[i]], e_mse.grad()[2 * i + labels[i]], 1e-15);
}
