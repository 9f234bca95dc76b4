#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "fedsim/errors.hpp"
#include "fedsim/federation.hpp"

using namespace fedsim;
using namespace fedsim::federation;

namespace {

vit::ViTConfig tiny_config() {
  vit::ViTConfig c;
  c.image_size = 8;
  c.patch_size = 4;
  c.embed_dim = 8;
  c.num_heads = 2;
  c.num_layers = 2;
  c.mlp_dim = 16;
  c.prompt_len = 2;
  c.split_layer = 1;
  return c;
}

std::vector<data::Split> tiny_splits(std::uint64_t seed, std::size_t clients = 3) {
  data::SkewSpec spec;
  for (std::size_t c = 0; c < clients; ++c) {
    spec.client_sizes.push_back(40 - 8 * (c % 3));
    const double p = 0.3 + 0.2 * static_cast<double>(c % 3);
    spec.proportions.push_back({p, 1.0 - p});
  }
  auto ds = data::generate_synthetic(spec, 8, seed);
  std::vector<data::Split> out;
  for (std::size_t c = 0; c < clients; ++c) out.push_back(data::split(ds.clients[c], 0.75, seed * 10 + c));
  return out;
}

Hyperparameters tiny_hp() {
  Hyperparameters hp;
  hp.rounds = 2;
  hp.epochs = 1;
  hp.batch_size = 8;
  hp.buffer_maps = 2;
  return hp;
}

Federation make(std::uint64_t seed = 1, Hyperparameters hp = tiny_hp(), std::size_t clients = 3) {
  auto cfg = tiny_config();
  return Federation(vit::FrozenBackbone::random(cfg, 99), tiny_splits(seed, clients), 2, hp, seed);
}

void expect_same_rows(const RunResult& a, const RunResult& b, double tol = 0.0) {
  ASSERT_EQ(a.rows.size(), b.rows.size());
  for (std::size_t i = 0; i < a.rows.size(); ++i) {
    EXPECT_EQ(a.rows[i].round, b.rows[i].round);
    EXPECT_EQ(a.rows[i].client, b.rows[i].client);
    if (tol == 0.0) {
      EXPECT_EQ(a.rows[i].balanced_accuracy, b.rows[i].balanced_accuracy);
      EXPECT_EQ(a.rows[i].mean_vacuity, b.rows[i].mean_vacuity);
      EXPECT_EQ(a.rows[i].loss_eps, b.rows[i].loss_eps);
      EXPECT_EQ(a.rows[i].loss_kd, b.rows[i].loss_kd);
    } else {
      EXPECT_NEAR(a.rows[i].mean_vacuity, b.rows[i].mean_vacuity, tol);
      EXPECT_NEAR(a.rows[i].loss_eps, b.rows[i].loss_eps, tol);
    }
  }
}

std::vector<double> flat(std::span<const Tensor> ts) {
  std::vector<double> out;
  for (const auto& t : ts) out.insert(out.end(), t.data().begin(), t.data().end());
  return out;
}

}  // namespace

TEST(Names, StrategiesAndPayloads) {
  EXPECT_EQ(parse_strategy("kd_uncertainty"), Strategy::FedEvPrompt);
  EXPECT_EQ(parse_strategy("fedavg_bt"), Strategy::FedAvg);
  for (auto s : all_strategies()) EXPECT_EQ(parse_strategy(name(s)), s);
  EXPECT_THROW(parse_strategy("fedsgd"), ConfigError);
  EXPECT_EQ(name(PayloadKind::AttentionMaps), "attention_maps");
  EXPECT_EQ(name(PayloadKind::Parameters), "parameters");
}

TEST(Hyperparameters, Validation) {
  Hyperparameters hp;
  EXPECT_NO_THROW(hp.validate());
  EXPECT_EQ(hp.lambda_kd, 1e-6);
  EXPECT_EQ(hp.rounds, 5u);
  EXPECT_EQ(hp.epochs, 15u);
  auto bad = hp;
  bad.epochs = 0;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = hp;
  bad.lambda_kd = -1;
  try {
    bad.validate();
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.field(), "lambda_kd");
  }
}

TEST(Aggregation, WeightedMeanToy) {
  std::vector<std::vector<double>> thetas{{0.0}, {4.0}};
  std::vector<double> n{3.0, 1.0};
  EXPECT_EQ(weighted_average(thetas, n)[0], 1.0);
}

TEST(Aggregation, IdenticalClientsAreAFixedPoint) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-5.0, 5.0), w(1.0, 1000.0);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> theta(37);
    for (auto& x : theta) x = u(rng);
    const std::size_t C = 2 + rng() % 6;
    std::vector<std::vector<double>> thetas(C, theta);
    std::vector<double> weights(C);
    for (auto& x : weights) x = std::floor(w(rng));
    EXPECT_EQ(weighted_average(thetas, weights), theta);
  }
}

TEST(Metrics, BalancedAccuracy) {
  std::vector<std::size_t> labels{0, 0, 0, 0, 1, 1, 1, 1};
  std::vector<std::size_t> preds{0, 0, 0, 1, 1, 1, 0, 0};
  EXPECT_DOUBLE_EQ(balanced_accuracy(preds, labels, 2), 0.625);
  EXPECT_EQ(balanced_accuracy(labels, labels, 2), 1.0);
  std::vector<std::size_t> constant(8, 1);
  EXPECT_EQ(balanced_accuracy(constant, labels, 2), 0.5);
}

TEST(Losses, ProximalTerm) {
  auto a = Tensor::from_data({2}, {1.0, 2.0}, true);
  std::vector<Tensor> params{a};
  std::vector<std::vector<double>> anchor{{1.0, 2.0}};
  Tape t1;
  EXPECT_EQ(proximal_term(t1, params, anchor, 0.3).item(), 0.0);
  anchor = {{0.0, 0.0}};
  Tape t2;
  auto l = proximal_term(t2, params, anchor, 0.3);
  EXPECT_NEAR(l.item(), 0.15 * 5.0, 1e-15);
  t2.backward(l);
  EXPECT_NEAR(a.grad()[0], 0.3 * 1.0, 1e-15);
  EXPECT_NEAR(a.grad()[1], 0.3 * 2.0, 1e-15);
}

TEST(Losses, PrototypeAlignmentZeroAtPrototype) {
  auto f = Tensor::from_data({2, 3}, {1, 2, 3, 1, 2, 3}, true);
  std::vector<std::optional<std::vector<double>>> protos{std::vector<double>{1, 2, 3}, std::nullopt};
  std::vector<std::size_t> labels{0, 0};
  Tape tape;
  auto l = prototype_alignment(tape, f, labels, protos, 1.0);
  EXPECT_EQ(l.item(), 0.0);
  tape.backward(l);
  for (double g : f.grad()) EXPECT_EQ(g, 0.0);
  std::vector<std::size_t> missing{1, 1};
  Tape t2;
  EXPECT_EQ(prototype_alignment(t2, f, missing, protos, 1.0).item(), 0.0);
}

TEST(Losses, MeanOutputDistillationZeroWhenMeansMatch) {
  auto out = Tensor::from_data({2, 2}, {1, 3, 3, 1}, true);
  std::vector<std::optional<std::vector<double>>> targets{std::vector<double>{2, 2}, std::nullopt};
  std::vector<std::size_t> labels{0, 0};
  Tape tape;
  auto l = mean_output_distillation(tape, out, labels, targets, 0.5);
  EXPECT_EQ(l.item(), 0.0);
}

TEST(FedEvPrompt, FirstRoundEqualsLocalAndOnlyMapsAreShared) {
  auto fed = make();
  auto ev = fed.run(Strategy::FedEvPrompt);
  auto local = make().run(Strategy::LocalBt);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(ev.rows[i].round, 1u);
    EXPECT_EQ(ev.rows[i].balanced_accuracy, local.rows[i].balanced_accuracy);
    EXPECT_EQ(ev.rows[i].loss_eps, local.rows[i].loss_eps);
    EXPECT_EQ(ev.rows[i].loss_kd, 0.0);
  }
  EXPECT_GT(ev.rows[3].loss_kd, 0.0);
  EXPECT_FALSE(ev.log.empty());
  EXPECT_TRUE(ev.log.only(PayloadKind::AttentionMaps));
  EXPECT_EQ(ev.log.count(PayloadKind::Parameters), 0u);
  EXPECT_EQ(ev.buffer_version, 2u);
  EXPECT_LE(ev.buffer_size, 3u * 2 * 2);
  EXPECT_TRUE(local.log.empty());
}

TEST(FedEvPrompt, RoundProtocolIsEnforced) {
  auto fed = make();
  fed.reset(PromptVariant::BT);
  EXPECT_THROW(fed.run_round_fedevprompt(2, false), ProtocolError);
  fed.run_round_fedevprompt(1, false);
  EXPECT_EQ(fed.buffer().version(), 1u);
  EXPECT_THROW(fed.run_round_fedevprompt(1, false), ProtocolError);
}

TEST(FedEvPrompt, DeterministicAndThreadIndependent) {
  auto a = make().run(Strategy::FedEvPrompt);
  auto b = make().run(Strategy::FedEvPrompt);
  expect_same_rows(a, b);
  auto hp = tiny_hp();
  hp.threads = 3;
  auto c = make(1, hp).run(Strategy::FedEvPrompt);
  expect_same_rows(a, c);
}

TEST(FedEvPrompt, HookSeesEveryCommit) {
  auto fed = make();
  std::vector<std::size_t> seen;
  fed.run(Strategy::KdRandom, [&](std::size_t r, const distill::AttentionBuffer& b) {
    EXPECT_EQ(b.version(), r);
    EXPECT_FALSE(b.publishing());
    seen.push_back(r);
  });
  EXPECT_EQ(seen, (std::vector<std::size_t>{1, 2}));
}

TEST(Local, GVariantSharesOneLearningRateAcrossPromptPartitions) {
  auto fed = make();
  fed.reset(PromptVariant::G);
  const auto groups = fed.clients()[0].optimizer.groups();
  ASSERT_EQ(groups.size(), 2u);
  EXPECT_EQ(groups[0].name, "g_prompts");
  EXPECT_EQ(groups[0].params.size(), 2u * tiny_config().num_layers);
  fed.reset(PromptVariant::BT);
  EXPECT_NE(fed.clients()[0].optimizer.groups()[0].lr, fed.clients()[0].optimizer.groups()[1].lr);
  auto res = fed.run(Strategy::LocalG);
  EXPECT_TRUE(res.log.empty());
}

TEST(Local, SameSeedSameParameters) {
  auto a = make(), b = make();
  a.run_local(PromptVariant::BT);
  b.run_local(PromptVariant::BT);
  for (std::size_t c = 0; c < 3; ++c) {
    EXPECT_EQ(flat(a.clients()[c].prompts.keys), flat(b.clients()[c].prompts.keys));
    EXPECT_EQ(flat(a.clients()[c].prompts.values), flat(b.clients()[c].prompts.values));
  }
}

TEST(FedAvg, SharedGroupsAgreeAfterAggregation) {
  auto fed = make();
  auto res = fed.run(Strategy::FedAvg);
  EXPECT_GT(res.log.count(PayloadKind::Parameters), 0u);
  EXPECT_TRUE(res.log.only(PayloadKind::Parameters));
  const auto ref = flat(fed.clients()[0].prompts.keys);
  for (const auto& c : fed.clients()) {
    EXPECT_EQ(flat(c.prompts.keys), ref);
    EXPECT_EQ(c.head.weight.data()[0], fed.clients()[0].head.weight.data()[0]);
  }
}

TEST(FedAvg, OnlyBPromptsLeavesTPromptsLocal) {
  auto fed = make();
  fed.run(Strategy::FedAvgB);
  const auto& c0 = fed.clients()[0];
  const auto& c1 = fed.clients()[1];
  EXPECT_EQ(flat(std::span(c0.prompts.keys).first(1)), flat(std::span(c1.prompts.keys).first(1)));
  EXPECT_NE(flat(std::span(c0.prompts.keys).subspan(1)), flat(std::span(c1.prompts.keys).subspan(1)));
}

TEST(FedAvg, PersonalizedAddsFineTuneRound) {
  auto res = make().run(Strategy::FedAvgPers);
  EXPECT_EQ(res.rows.back().round, 3u);
  auto kd = make().run(Strategy::FedAvgBtKd);
  EXPECT_GT(kd.log.count(PayloadKind::AttentionMaps), 0u);
  EXPECT_GT(kd.log.count(PayloadKind::Parameters), 0u);
}

TEST(FedProx, VanishingMuMatchesFedAvg) {
  auto hp = tiny_hp();
  hp.fedprox_mu = 1e-12;
  auto prox = make(1, hp).run(Strategy::FedProx);
  auto avg = make(1, hp).run(Strategy::FedAvg);
  expect_same_rows(prox, avg, 1e-6);
  hp.fedprox_mu = 0.0;
  EXPECT_THROW(make(1, hp).run(Strategy::FedProx), std::exception);
}

TEST(FedProto, PayloadIsPrototypes) {
  auto res = make().run(Strategy::FedProto);
  EXPECT_TRUE(res.log.only(PayloadKind::Prototypes));
  for (const auto& m : res.log.entries()) EXPECT_EQ(m.payload_size % tiny_config().embed_dim, 0u);
}

TEST(FedDistill, PayloadAndZeroGammaLimit) {
  auto res = make().run(Strategy::FedDistill);
  EXPECT_TRUE(res.log.only(PayloadKind::MeanLogits));
  for (const auto& m : res.log.entries()) EXPECT_EQ(m.payload_size, 4u);
  auto hp = tiny_hp();
  hp.feddistill_gamma = 0.0;
  auto off = make(1, hp).run(Strategy::FedDistill);
  auto local = make(1, hp).run(Strategy::LocalBt);
  expect_same_rows(off, local, 1e-12);
}

TEST(Federation, EvaluateAndEmptyClients) {
  auto fed = make();
  fed.run(Strategy::LocalBt);
  for (const auto& c : fed.clients()) {
    const double acc = fed.evaluate(c);
    EXPECT_GE(acc, 0.0);
    EXPECT_LE(acc, 1.0);
    EXPECT_EQ(acc, c.history.back().balanced_accuracy);
  }
  auto splits = tiny_splits(1);
  splits[1].train.clear();
  EXPECT_THROW(
      {
        Federation bad(vit::FrozenBackbone::random(tiny_config(), 1), splits, 2, tiny_hp(), 1);
        bad.run(Strategy::LocalBt);
      },
      UsageError);
}
