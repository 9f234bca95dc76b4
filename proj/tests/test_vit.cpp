#include <gtest/gtest.h>

#include <filesystem>
#include <random>

#include "fedsim/errors.hpp"
#include "fedsim/pretrain.hpp"
#include "fedsim/vit.hpp"

using namespace fedsim;
using namespace fedsim::vit;

namespace {

ViTConfig small_config(std::size_t prompt_len = 3) {
  ViTConfig c;
  c.image_size = 8;
  c.patch_size = 4;
  c.embed_dim = 8;
  c.num_heads = 2;
  c.num_layers = 3;
  c.mlp_dim = 16;
  c.prompt_len = prompt_len;
  c.split_layer = 1;
  return c;
}

Tensor random_images(std::size_t n, const ViTConfig& c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> v(n * c.pixels());
  for (auto& x : v) x = u(rng);
  return Tensor::from_data({n, c.pixels()}, std::move(v));
}

using Mat = std::array<std::array<double, 3>, 3>;

// Head-mean, renormalize, half residual, renormalize.
Mat fuse(const std::vector<Mat>& heads) {
  Mat a{};
  for (const auto& h : heads)
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) a[i][j] += h[i][j] / heads.size();
  for (int i = 0; i < 3; ++i) {
    double s = a[i][0] + a[i][1] + a[i][2];
    for (int j = 0; j < 3; ++j) a[i][j] = 0.5 * a[i][j] / s + (i == j ? 0.5 : 0.0);
    s = a[i][0] + a[i][1] + a[i][2];
    for (int j = 0; j < 3; ++j) a[i][j] /= s;
  }
  return a;
}

Tensor layer_tensor(const std::vector<Mat>& heads) {
  std::vector<double> v;
  for (const auto& h : heads)
    for (const auto& row : h)
      for (double x : row) v.push_back(x);
  return Tensor::from_data({1, heads.size(), 3, 3}, std::move(v));
}

}  // namespace

TEST(ViTConfig, PresetsAndValidation) {
  EXPECT_NO_THROW(ViTConfig::desk().validate());
  EXPECT_NO_THROW(ViTConfig::paper().validate());
  EXPECT_EQ(ViTConfig::desk().embed_dim, 32u);
  EXPECT_EQ(ViTConfig::paper().num_layers, 12u);
  auto c = ViTConfig::desk();
  c.patch_size = 5;
  try {
    c.validate();
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.field(), "patch_size");
  }
}

TEST(Forward, ShapesAndNonNegativeEvidence) {
  const auto cfg = small_config();
  auto backbone = FrozenBackbone::random(cfg, 1);
  auto prompts = PromptSet::init(cfg, 2);
  auto head = EvidenceHead::init(cfg, 3);
  auto tape = Tape::inference();
  auto out = forward(tape, backbone, &prompts, head, random_images(100, cfg, 4));
  ASSERT_EQ(out.evidence.shape(), (Shape{100, 2}));
  ASSERT_EQ(out.features.shape(), (Shape{100, 8}));
  for (double e : out.evidence.data()) EXPECT_GE(e, 0.0);
  ASSERT_EQ(out.attentions.size(), cfg.num_layers);
  for (const auto& a : out.attentions) EXPECT_EQ(a.shape(), (Shape{100, 2, cfg.tokens(), cfg.tokens() + cfg.prompt_len}));
}

TEST(Forward, EmptyPrefixIsBitEqualToPlainViT) {
  const auto cfg = small_config(0);
  auto backbone = FrozenBackbone::random(cfg, 5);
  auto prompts = PromptSet::init(cfg, 6);
  auto head = EvidenceHead::init(cfg, 7);
  auto images = random_images(6, cfg, 8);
  auto t1 = Tape::inference();
  auto t2 = Tape::inference();
  auto with = forward(t1, backbone, &prompts, head, images);
  auto plain = forward(t2, backbone, nullptr, head, images);
  ASSERT_EQ(with.evidence.size(), plain.evidence.size());
  for (std::size_t i = 0; i < with.evidence.size(); ++i) EXPECT_EQ(with.evidence.data()[i], plain.evidence.data()[i]);
  for (std::size_t i = 0; i < with.features.size(); ++i) EXPECT_EQ(with.features.data()[i], plain.features.data()[i]);
}

TEST(Forward, PromptsOnlyChangeAttentionNotBackbone) {
  const auto cfg = small_config();
  auto backbone = FrozenBackbone::random(cfg, 9);
  auto before = backbone.named_parameters();
  auto prompts = PromptSet::init(cfg, 10);
  auto head = EvidenceHead::init(cfg, 11);
  Tape tape;
  auto out = forward(tape, backbone, &prompts, head, random_images(4, cfg, 12));
  tape.backward(ops::sum(tape, out.evidence));
  for (const auto& [name, t] : backbone.named_parameters()) EXPECT_FALSE(t.has_grad()) << name;
  for (const auto& k : prompts.keys) EXPECT_TRUE(k.has_grad());
}

TEST(Rollout, TwoLayerHandProduct) {
  std::mt19937_64 rng(13);
  std::uniform_real_distribution<double> u(0.05, 1.0);
  auto random_stochastic = [&] {
    Mat m{};
    for (auto& row : m) {
      double s = 0;
      for (auto& x : row) s += (x = u(rng));
      for (auto& x : row) x /= s;
    }
    return m;
  };
  std::vector<Mat> l1{random_stochastic(), random_stochastic()}, l2{random_stochastic(), random_stochastic()};
  const Mat a1 = fuse(l1), a2 = fuse(l2);
  Mat expect{};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      for (int k = 0; k < 3; ++k) expect[i][j] += a2[i][k] * a1[k][j];
  auto tape = Tape::inference();
  std::vector<Tensor> layers{layer_tensor(l1), layer_tensor(l2)};
  auto r = rollout_matrix(tape, layers, 0);
  ASSERT_EQ(r.shape(), (Shape{1, 3, 3}));
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) EXPECT_NEAR(r.data()[i * 3 + j], expect[i][j], 1e-12);
}

TEST(Rollout, IdentityAttentionsPropagateIdentity) {
  auto cfg = small_config(0);
  const std::size_t T = cfg.tokens();
  std::vector<double> eye(2 * T * T, 0.0);
  for (std::size_t h = 0; h < 2; ++h)
    for (std::size_t i = 0; i < T; ++i) eye[(h * T + i) * T + i] = 1.0;
  std::vector<Tensor> layers(cfg.num_layers, Tensor::from_data({1, 2, T, T}, eye));
  auto tape = Tape::inference();
  auto r = rollout_matrix(tape, layers, 0);
  for (std::size_t i = 0; i < T; ++i)
    for (std::size_t j = 0; j < T; ++j) EXPECT_EQ(r.data()[i * T + j], i == j ? 1.0 : 0.0);
  std::vector<Tensor> single;
  for (std::size_t l = 0; l < cfg.num_layers; ++l) single.push_back(Tensor::from_data({2, T, T}, eye));
  auto map = attention_rollout(single, cfg);
  for (double x : map.grid) EXPECT_EQ(x, 0.0);
}

TEST(Rollout, UniformAttentionGivesConstantMap) {
  auto cfg = small_config(2);
  const std::size_t T = cfg.tokens(), L = 2;
  std::vector<Tensor> layers{Tensor::full({2, T, T + L}, 1.0 / static_cast<double>(T + L))};
  auto map = attention_rollout(layers, cfg);
  ASSERT_EQ(map.grid.size(), cfg.image_size * cfg.image_size);
  for (double x : map.grid) EXPECT_NEAR(x, 1.0, 1e-12);
}

TEST(Rollout, RejectsMismatchedShapes) {
  auto tape = Tape::inference();
  std::vector<Tensor> bad{Tensor::full({1, 2, 3, 4}, 0.25)};
  EXPECT_THROW(rollout_matrix(tape, bad, 0), DimensionError);
  EXPECT_THROW(rollout_matrix(tape, std::vector<Tensor>{}, 0), UsageError);
}

TEST(Params, GroupsPartitionPrompts) {
  auto cfg = ViTConfig::paper();
  auto prompts = PromptSet::init(cfg, 1);
  auto head = EvidenceHead::init(cfg, 2);
  auto g = trainable_params(prompts, head);
  EXPECT_EQ(g.b_group.params.size(), 2u * 3);
  EXPECT_EQ(g.t_group.params.size(), 2u * 9 + 2);
  const std::size_t prompt_total = 12 * 2 * 50 * 384;
  EXPECT_EQ(parameter_count(g.b_group.params) + parameter_count(g.t_group.params),
            prompt_total + head.weight.size() + head.bias.size());

  auto small = small_config();
  small.split_layer = small.num_layers - 1;
  auto p2 = PromptSet::init(small, 3);
  auto g2 = trainable_params(p2, EvidenceHead::init(small, 4));
  EXPECT_EQ(g2.t_group.params.size(), 2u + 2u);
}

TEST(Backbone, SaveLoadRoundTrip) {
  const auto cfg = small_config();
  auto backbone = FrozenBackbone::random(cfg, 21);
  const auto path = std::filesystem::temp_directory_path() / "fedsim_test_backbone.bin";
  backbone.save(path);
  auto loaded = FrozenBackbone::load(path, cfg);
  auto a = backbone.named_parameters(), b = loaded.named_parameters();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].first, b[i].first);
    ASSERT_EQ(a[i].second.size(), b[i].second.size());
    for (std::size_t j = 0; j < a[i].second.size(); ++j) EXPECT_EQ(a[i].second.data()[j], b[i].second.data()[j]);
  }
  auto other = cfg;
  other.embed_dim = 12;
  other.num_heads = 2;
  EXPECT_ANY_THROW(FrozenBackbone::load(path, other));
  std::filesystem::remove(path);
  EXPECT_ANY_THROW(FrozenBackbone::load(path, cfg));
}

TEST(Backbone, FromNamedValidates) {
  const auto cfg = small_config();
  auto named = FrozenBackbone::random(cfg, 22).named_parameters();
  auto wrong_name = named;
  wrong_name[0].first = "bogus";
  EXPECT_THROW(FrozenBackbone::from_named(cfg, wrong_name), DimensionError);
  auto short_list = named;
  short_list.pop_back();
  EXPECT_THROW(FrozenBackbone::from_named(cfg, short_list), DimensionError);
}

TEST(Pretrain, DeterministicAndZeroStepsIsRandom) {
  const auto cfg = small_config();
  pretrain::Options opts;
  opts.steps = 0;
  auto r = pretrain::pretrain_backbone(cfg, opts);
  auto ref = FrozenBackbone::random(cfg, opts.seed).named_parameters();
  auto got = r.named_parameters();
  for (std::size_t i = 0; i < ref.size(); ++i)
    for (std::size_t j = 0; j < ref[i].second.size(); ++j) ASSERT_EQ(ref[i].second.data()[j], got[i].second.data()[j]);

  opts.steps = 4;
  opts.pool = 64;
  auto a = pretrain::pretrain_backbone(cfg, opts).named_parameters();
  auto b = pretrain::pretrain_backbone(cfg, opts).named_parameters();
  bool changed = false;
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a[i].second.size(); ++j) {
      ASSERT_EQ(a[i].second.data()[j], b[i].second.data()[j]);
      changed |= a[i].second.data()[j] != ref[i].second.data()[j];
      EXPECT_FALSE(a[i].second.requires_grad());
    }
  EXPECT_TRUE(changed);
}
