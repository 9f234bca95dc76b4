#include <gtest/gtest.h>

#include <filesystem>
#include <set>

#include "fedsim/data.hpp"
#include "fedsim/errors.hpp"

using namespace fedsim;
using namespace fedsim::data;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  auto dir = fs::temp_directory_path() / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

SkewSpec two_client_spec() {
  SkewSpec s;
  s.client_sizes = {200, 200};
  s.proportions = {{0.9, 0.1}, {0.1, 0.9}};
  return s;
}

}  // namespace

TEST(Synthetic, ClassRatiosFollowSpec) {
  auto ds = generate_synthetic(two_client_spec(), 16, 3);
  ASSERT_EQ(ds.clients.size(), 2u);
  for (std::size_t c = 0; c < 2; ++c) {
    ASSERT_EQ(ds.clients[c].size(), 200u);
    auto counts = class_counts(ds.clients[c], 2);
    const double expected = c == 0 ? 0.9 : 0.1;
    EXPECT_NEAR(static_cast<double>(counts[0]) / 200.0, expected, 0.02);
    for (const auto& s : ds.clients[c]) {
      ASSERT_EQ(s.pixels.size(), 256u);
      for (double p : s.pixels) ASSERT_TRUE(p >= 0.0 && p <= 1.0);
    }
  }
}

TEST(Synthetic, DeterministicPerSeed) {
  auto a = generate_synthetic(two_client_spec(), 16, 9), b = generate_synthetic(two_client_spec(), 16, 9);
  auto c = generate_synthetic(two_client_spec(), 16, 10);
  bool differs = false;
  for (std::size_t k = 0; k < 2; ++k)
    for (std::size_t i = 0; i < a.clients[k].size(); ++i) {
      ASSERT_EQ(a.clients[k][i].pixels, b.clients[k][i].pixels);
      ASSERT_EQ(a.clients[k][i].label, b.clients[k][i].label);
      differs |= a.clients[k][i].pixels != c.clients[k][i].pixels;
    }
  EXPECT_TRUE(differs);
}

TEST(Synthetic, HighSeparabilityIsNearlyPerfectForNearestMean) {
  auto spec = two_client_spec();
  spec.separability = 1e6;
  auto ds = generate_synthetic(spec, 16, 4);
  for (const auto& client : ds.clients) {
    std::vector<std::vector<double>> mean(2, std::vector<double>(256, 0.0));
    auto counts = class_counts(client, 2);
    for (const auto& s : client)
      for (std::size_t i = 0; i < 256; ++i) mean[s.label][i] += s.pixels[i] / static_cast<double>(counts[s.label]);
    std::size_t correct = 0;
    for (const auto& s : client) {
      double d[2] = {0, 0};
      for (std::size_t k = 0; k < 2; ++k)
        for (std::size_t i = 0; i < 256; ++i) d[k] += (s.pixels[i] - mean[k][i]) * (s.pixels[i] - mean[k][i]);
      correct += (d[0] < d[1] ? 0u : 1u) == s.label;
    }
    EXPECT_GE(static_cast<double>(correct) / client.size(), 0.99);
  }
}

TEST(SkewSpec, DefaultAndValidation) {
  auto s = SkewSpec::desk_default();
  EXPECT_NO_THROW(s.validate());
  EXPECT_EQ(s.num_clients(), 6u);
  EXPECT_EQ(s.num_classes(), 2u);
  auto bad = s;
  bad.proportions[2] = {0.5, 0.6};
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = s;
  bad.proportions.pop_back();
  try {
    bad.validate();
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.field(), "proportions");
  }
  bad = s;
  bad.client_sizes[0] = 0;
  EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(Apportion, SumsAndRounds) {
  EXPECT_EQ(apportion(10, std::vector<double>{0.65, 0.35}), (std::vector<std::size_t>{7, 3}));
  EXPECT_EQ(apportion(450, std::vector<double>{0.7, 0.3}), (std::vector<std::size_t>{315, 135}));
  auto c = apportion(7, std::vector<double>{1.0 / 3, 1.0 / 3, 1.0 / 3});
  EXPECT_EQ(c[0] + c[1] + c[2], 7u);
}

TEST(Split, ExactFractionsDisjointAndStratified) {
  SkewSpec spec;
  spec.client_sizes = {100, 100};
  spec.proportions = {{0.3, 0.7}, {0.55, 0.45}};
  auto ds = generate_synthetic(spec, 8, 1);
  for (const auto& client : ds.clients) {
    auto sp = split(client, 0.75, 2);
    EXPECT_EQ(sp.train.size(), 75u);
    EXPECT_EQ(sp.test.size(), 25u);
    std::set<std::size_t> train_ids;
    for (const auto& s : sp.train) train_ids.insert(s.id);
    for (const auto& s : sp.test) EXPECT_EQ(train_ids.count(s.id), 0u);
    auto all = class_counts(client, 2), test = class_counts(sp.test, 2);
    for (std::size_t k = 0; k < 2; ++k) EXPECT_LE(std::abs(static_cast<double>(test[k]) - 0.25 * all[k]), 1.0);
  }
  std::vector<Sample> one{{std::vector<double>(64, 0.5), 0, 0}, {std::vector<double>(64, 0.5), 1, 1}};
  auto sp = split(one, 0.75, 3);
  EXPECT_EQ(sp.train.size(), 2u);
  EXPECT_THROW(split(one, 1.0, 3), UsageError);
}

TEST(Pretext, LabelsCoverSectors) {
  auto samples = generate_pretext(400, 16, 8, 1);
  std::vector<int> seen(8, 0);
  for (const auto& s : samples) {
    ASSERT_LT(s.label, 8u);
    ++seen[s.label];
  }
  for (int n : seen) EXPECT_GT(n, 20);
}

TEST(External, RoundTripThroughBinFiles) {
  SkewSpec spec;
  spec.client_sizes = {6, 4};
  spec.proportions = {{0.5, 0.5}, {0.25, 0.75}};
  auto ds = generate_synthetic(spec, 16, 5);
  auto dir = fresh_dir("fedsim_ext_roundtrip");
  write_federation(ds, dir);
  auto loaded = load_external(dir, 16, 1, 2);
  ASSERT_EQ(loaded.clients.size(), 2u);
  for (std::size_t c = 0; c < 2; ++c) {
    ASSERT_EQ(loaded.clients[c].size(), ds.clients[c].size());
    EXPECT_EQ(class_counts(loaded.clients[c], 2), class_counts(ds.clients[c], 2));
    for (const auto& s : loaded.clients[c]) EXPECT_EQ(s.pixels.size(), 256u);
  }
  auto resized = load_external(dir, 8, 1, 2);
  EXPECT_EQ(resized.clients[0][0].pixels.size(), 64u);
  fs::remove_all(dir);
}

TEST(External, Errors) {
  auto dir = fresh_dir("fedsim_ext_errors");
  fs::create_directories(dir / "client0" / "class0");
  write_bin(dir / "client0" / "class0" / "a.bin", std::vector<double>(256, 0.5), 16, 16, 1);
  fs::create_directories(dir / "client1");
  try {
    load_external(dir, 16, 1, 2);
    FAIL();
  } catch (const std::exception& e) {
    EXPECT_NE(std::string(e.what()).find("client1"), std::string::npos) << e.what();
  }
  fs::remove_all(dir / "client1");
  auto bad = std::vector<double>(256, 0.5);
  bad[17] = 1.5;
  const auto bad_path = dir / "client0" / "class0" / "bad.bin";
  write_bin(bad_path, bad, 16, 16, 1);
  try {
    load_external(dir, 16, 1, 2);
    FAIL();
  } catch (const std::exception& e) {
    EXPECT_NE(std::string(e.what()).find(bad_path.string()), std::string::npos) << e.what();
  }
  fs::remove(bad_path);
  EXPECT_NO_THROW(load_external(dir, 16, 1, 2));
  EXPECT_ANY_THROW(load_external(dir / "missing", 16, 1, 2));
  EXPECT_ANY_THROW(load_external(dir, 16, 3, 2));
  fs::remove_all(dir);
}
