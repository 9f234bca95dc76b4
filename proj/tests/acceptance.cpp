// Acceptance checks; prints one PASS/FAIL line per criterion.

#include <fmt/core.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <sys/wait.h>
#include <vector>

#include "fedsim/distill.hpp"
#include "fedsim/evidential.hpp"
#include "fedsim/federation.hpp"
#include "fedsim/harness/config.hpp"
#include "fedsim/harness/experiment.hpp"
#include "fedsim/harness/gradcheck.hpp"
#include "fedsim/vit.hpp"

using namespace fedsim;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
  bool passed = true;
  std::string detail;
  void require(bool ok, const std::string& what) {
    if (!ok && passed) detail = what;
    passed = passed && ok;
  }
};

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

Outcome guarded(const std::function<Outcome()>& body) {
  try {
    return body();
  } catch (const std::exception& e) {
    return {false, std::string("exception: ") + e.what()};
  }
}

// ---------------------------------------------------------------- 1
Outcome gradient_suite() {
  Outcome o;
  const auto t0 = Clock::now();
  harness::gradcheck::Options opts;
  const auto reports = harness::gradcheck::run_suite(harness::gradcheck::standard_cases(), opts);
  const double elapsed = seconds_since(t0);
  double worst = 0.0;
  for (const auto& r : reports) {
    o.require(r.passed, fmt::format("{} rel error {:.3g} at seed {} {}", r.name, r.max_error, r.worst_seed, r.error));
    worst = std::max(worst, r.max_error);
  }
  o.require(elapsed < 60.0, fmt::format("took {:.1f} s", elapsed));
  if (o.passed)
    o.detail = fmt::format("{} cases x {} seeds, worst rel error {:.2e}, {:.1f} s", reports.size(), opts.seeds, worst, elapsed);
  return o;
}

// ---------------------------------------------------------------- 2
Outcome evidential_identities() {
  using namespace evidential;
  Outcome o;
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> ev(0.0, 50.0), pos(0.05, 20.0);
  for (int t = 0; t < 1000; ++t) {
    const std::size_t K = 2 + rng() % 9;
    std::vector<std::size_t> counts(K);
    for (auto& c : counts) c = 1 + rng() % 1000;
    const auto prior = weighted_prior(counts);
    const double sum = std::accumulate(prior.weights.begin(), prior.weights.end(), 0.0);
    o.require(std::abs(sum - static_cast<double>(K)) <= 1e-12, fmt::format("sum W = {:.17g} for K = {}", sum, K));

    std::vector<double> e(K);
    for (auto& x : e) x = ev(rng);
    const auto op = opinion(e, prior);
    o.require(std::abs(op.vacuity - static_cast<double>(K) / op.strength) <= 1e-12, "u != K/S");
    const double ps = std::accumulate(op.expected.begin(), op.expected.end(), 0.0);
    o.require(std::abs(ps - 1.0) <= 1e-12, fmt::format("sum p = {:.17g}", ps));
    o.require(std::abs(kl_to_prior(prior.weights, prior.weights)) <= 1e-12, "KL(W || W) != 0");
  }
  for (std::size_t K = 2; K <= 10; ++K) {
    const auto u = uniform_prior(K);
    o.require(vacuity(std::vector<double>(K, 0.0), u.weights) == 1.0, "zero-evidence vacuity != 1");
  }
  for (int t = 0; t < 1000; ++t) {
    const std::size_t K = 2 + rng() % 5;
    std::vector<double> a(K), w(K);
    for (auto& x : a) x = pos(rng);
    for (auto& x : w) x = pos(rng);
    o.require(kl_to_prior(a, w) >= 0.0, "negative KL");
  }
  const double hand = kl_to_prior(std::vector<double>{2.0, 1.0}, std::vector<double>{1.0, 1.0});
  o.require(std::abs(hand - 0.1931471806) <= 1e-9, fmt::format("KL(Dir[2,1] || Dir[1,1]) = {:.12f}", hand));
  if (o.passed) o.detail = fmt::format("hand KL {:.10f}", hand);
  return o;
}

// ---------------------------------------------------------------- 3
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

Outcome mse_oracle() {
  Outcome o;
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(1.0, 10.0);
  double worst = 0.0;
  for (int t = 0; t < 10; ++t) {
    const std::size_t K = 2 + t % 2;
    std::vector<double> alpha(K);
    for (auto& a : alpha) a = u(rng);
    const auto y = evidential::one_hot(rng() % K, K);
    const double gap = std::abs(evidential::evidential_mse(y, alpha) - monte_carlo_mse(y, alpha, 1000000, 100 + t));
    worst = std::max(worst, gap);
    o.require(gap <= 1e-2, fmt::format("case {} differs by {:.4g}", t, gap));
  }
  if (o.passed) o.detail = fmt::format("10 cases, worst gap {:.2e}", worst);
  return o;
}

// ---------------------------------------------------------------- 4
using Mat = std::array<std::array<double, 3>, 3>;

Mat fuse(const std::vector<Mat>& heads) {
  Mat a{};
  for (const auto& h : heads)
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) a[i][j] += h[i][j] / static_cast<double>(heads.size());
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

Outcome rollout_oracle() {
  Outcome o;
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(0.05, 1.0);
  auto stochastic = [&] {
    Mat m{};
    for (auto& row : m) {
      double s = 0;
      for (auto& x : row) s += (x = u(rng));
      for (auto& x : row) x /= s;
    }
    return m;
  };
  double worst = 0.0;
  for (int t = 0; t < 20; ++t) {
    std::vector<Mat> l1{stochastic(), stochastic()}, l2{stochastic(), stochastic()};
    const Mat a1 = fuse(l1), a2 = fuse(l2);
    auto tape = Tape::inference();
    std::vector<Tensor> layers{layer_tensor(l1), layer_tensor(l2)};
    const auto r = vit::rollout_matrix(tape, layers, 0);
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) {
        double expect = 0.0;
        for (int k = 0; k < 3; ++k) expect += a2[i][k] * a1[k][j];
        worst = std::max(worst, std::abs(r.data()[i * 3 + j] - expect));
      }
  }
  o.require(worst <= 1e-12, fmt::format("hand product differs by {:.3g}", worst));

  auto cfg = vit::ViTConfig::desk();
  cfg.prompt_len = 0;
  const std::size_t T = cfg.tokens(), H = cfg.num_heads;
  std::vector<double> eye(H * T * T, 0.0);
  for (std::size_t h = 0; h < H; ++h)
    for (std::size_t i = 0; i < T; ++i) eye[(h * T + i) * T + i] = 1.0;
  {
    std::vector<Tensor> layers(cfg.num_layers, Tensor::from_data({1, H, T, T}, eye));
    auto tape = Tape::inference();
    const auto r = vit::rollout_matrix(tape, layers, 0);
    for (std::size_t i = 0; i < T; ++i)
      for (std::size_t j = 0; j < T; ++j) o.require(r.data()[i * T + j] == (i == j ? 1.0 : 0.0), "identity not propagated");
  }

  auto backbone = vit::FrozenBackbone::random(cfg, 5);
  auto prompts = vit::PromptSet::init(cfg, 6);
  auto head = vit::EvidenceHead::init(cfg, 7);
  std::vector<double> px(8 * cfg.pixels());
  for (auto& x : px) x = u(rng);
  const auto images = Tensor::from_data({8, cfg.pixels()}, std::move(px));
  auto t1 = Tape::inference();
  auto t2 = Tape::inference();
  const auto with = vit::forward(t1, backbone, &prompts, head, images);
  const auto plain = vit::forward(t2, backbone, nullptr, head, images);
  o.require(std::equal(with.evidence.data().begin(), with.evidence.data().end(), plain.evidence.data().begin()) &&
                std::equal(with.features.data().begin(), with.features.data().end(), plain.features.data().begin()),
            "empty prefix changes the forward pass");
  if (o.passed) o.detail = fmt::format("20 hand products, worst {:.1e}", worst);
  return o;
}

// ---------------------------------------------------------------- 5
distill::RolloutMap make_map(int cls, double u, std::size_t id, std::vector<double> grid = {0.5, 0.5, 0.5, 0.5}) {
  distill::RolloutMap m;
  m.height = m.width = 2;
  m.grid = std::move(grid);
  m.class_id = cls;
  m.uncertainty = u;
  m.sample_id = id;
  return m;
}

Outcome buffer_correctness() {
  using namespace distill;
  Outcome o;
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const std::size_t C = 4, K = 3, M = 5;
  AttentionBuffer buffer(C, K, M);
  for (int trial = 0; trial < 100; ++trial) {
    const int client = static_cast<int>(trial % C);
    const std::size_t n = 1 + rng() % 60;
    std::vector<RolloutMap> cands;
    for (std::size_t i = 0; i < n; ++i) cands.push_back(make_map(static_cast<int>(rng() % K), u(rng), i));
    const auto sel = select_for_sharing(client, cands, M);
    for (std::size_t k = 0; k < K; ++k) {
      std::vector<double> scores, chosen;
      for (const auto& c : cands)
        if (c.class_id == static_cast<int>(k)) scores.push_back(c.uncertainty);
      for (const auto& s : sel)
        if (s.class_id == static_cast<int>(k)) chosen.push_back(s.uncertainty);
      std::sort(scores.begin(), scores.end());
      scores.resize(std::min(M, scores.size()));
      std::sort(chosen.begin(), chosen.end());
      o.require(chosen == scores, fmt::format("trial {} class {} is not the M smallest", trial, k));
    }
    for (const auto& s : sel) o.require(s.client_id == client, "selection not tagged with client");
    buffer.open_publication(buffer.version() + 1);
    buffer.publish(client, sel);
    buffer.commit();
    o.require(buffer.size() <= buffer.capacity(), fmt::format("buffer holds {} > {}", buffer.size(), buffer.capacity()));
  }

  std::vector<double> map{0.1, 0.2, 0.3, 0.4};
  auto build = [&](bool poison) {
    AttentionBuffer b(3, 1, 2);
    b.open_publication(1);
    if (poison) b.publish(0, select_for_sharing(0, {make_map(0, 0.0, 0, {100, -100, 100, -100})}, 2));
    b.publish(1, select_for_sharing(1, {make_map(0, 0.1, 0, {0.9, 0.9, 0.9, 0.9})}, 2));
    b.publish(2, select_for_sharing(2, {make_map(0, 0.1, 0, {0.0, 0.0, 1.0, 0.0})}, 2));
    b.commit();
    return b;
  };
  const auto clean = build(false), poisoned = build(true);
  o.require(kd_loss(map, poisoned, 0, 0) == kd_loss(map, clean, 0, 0), "own entries change the KD loss");
  o.require(kd_loss(map, poisoned, 1, 0) != kd_loss(map, clean, 1, 0), "foreign entries ignored");

  AttentionBuffer empty(3, 2, 5);
  o.require(kd_loss(map, empty, 0, 1) == 0.0, "empty buffer KD != 0");
  Tape tape;
  auto maps = Tensor::from_data({1, 4}, map, true);
  std::vector<std::size_t> labels{1};
  o.require(kd_loss(tape, maps, labels, empty, 0).item() == 0.0, "empty buffer KD on tape != 0");
  if (o.passed) o.detail = "100 sort-oracle trials, poisoning and empty buffer";
  return o;
}

// ---------------------------------------------------------------- 6, 7
struct Desk {
  harness::ExperimentConfig config = harness::preset("desk");
  vit::FrozenBackbone backbone;
  Desk() : backbone(harness::make_backbone(config)) {}
};

struct DirectionalRuns {
  std::vector<federation::RunResult> fedevprompt, local_bt, kd_random;
  double seconds = 0.0;
};

double mean_accuracy(const federation::RunResult& r) {
  return harness::mean_std(r.final_accuracy).first;
}

DirectionalRuns directional_runs(const Desk& desk) {
  DirectionalRuns out;
  const auto t0 = Clock::now();
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    for (auto s : {federation::Strategy::FedEvPrompt, federation::Strategy::LocalBt, federation::Strategy::KdRandom}) {
      const auto cell = Clock::now();
      auto r = harness::run_cell(desk.config, desk.backbone, s, seed);
      fmt::print("  seed {} {:<12} mean bacc {:.4f}  ({:.0f} s)\n", seed, r.strategy, mean_accuracy(r), seconds_since(cell));
      std::fflush(stdout);
      auto& slot = s == federation::Strategy::FedEvPrompt ? out.fedevprompt
                   : s == federation::Strategy::LocalBt   ? out.local_bt
                                                          : out.kd_random;
      slot.push_back(std::move(r));
    }
  }
  out.seconds = seconds_since(t0);
  return out;
}

Outcome privacy_audit(const Desk& desk, const DirectionalRuns& runs) {
  using federation::PayloadKind;
  Outcome o;
  const auto& fed = runs.fedevprompt.front();
  o.require(fed.rows.back().round == 5, "FedEvPrompt run is not 5 rounds");
  o.require(!fed.log.empty() && fed.log.only(PayloadKind::AttentionMaps), "FedEvPrompt log holds a non-map payload");
  for (const auto& r : runs.kd_random) o.require(r.log.only(PayloadKind::AttentionMaps), "KD-random log holds a non-map payload");
  for (const auto& r : runs.local_bt) o.require(r.log.empty(), "Local(b,t) log is not empty");

  auto short_cfg = desk.config;
  short_cfg.training.rounds = 2;
  short_cfg.training.epochs = 1;
  const auto avg = harness::run_cell(short_cfg, desk.backbone, federation::Strategy::FedAvg, 1);
  o.require(avg.log.count(PayloadKind::Parameters) > 0, "FedAvg log has no parameters");
  const auto local_g = harness::run_cell(short_cfg, desk.backbone, federation::Strategy::LocalG, 1);
  o.require(local_g.log.empty(), "Local(G) log is not empty");
  if (o.passed)
    o.detail = fmt::format("FedEvPrompt {} map messages, FedAvg {} parameter messages, Local 0", fed.log.entries().size(),
                           avg.log.count(PayloadKind::Parameters));
  return o;
}

Outcome directional(const DirectionalRuns& runs) {
  Outcome o;
  int evp_vs_local = 0, unc_vs_random = 0;
  std::string margins;
  for (std::size_t i = 0; i < runs.fedevprompt.size(); ++i) {
    const double f = mean_accuracy(runs.fedevprompt[i]);
    const double m1 = f - mean_accuracy(runs.local_bt[i]);
    const double m2 = f - mean_accuracy(runs.kd_random[i]);
    evp_vs_local += m1 >= 0.0;
    unc_vs_random += m2 >= 0.0;
    margins += fmt::format(" [{:+.4f} {:+.4f}]", m1, m2);
  }
  o.require(evp_vs_local >= 4, fmt::format("FedEvPrompt >= Local(b,t) in {}/5 seeds", evp_vs_local));
  o.require(unc_vs_random >= 4, fmt::format("KD uncertainty >= KD random in {}/5 seeds", unc_vs_random));
  o.require(runs.seconds < 3600.0, fmt::format("took {:.0f} s", runs.seconds));
  o.detail += fmt::format("{}{}/5 vs local, {}/5 vs random, margins{}, {:.0f} s", o.passed ? "" : "; ", evp_vs_local,
                          unc_vs_random, margins, runs.seconds);
  return o;
}

// ---------------------------------------------------------------- 8
std::string csv_body(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::string out, line;
  while (std::getline(in, line))
    if (line.empty() || line[0] != '#') out += line + "\n";
  return out;
}

Outcome determinism() {
  Outcome o;
  const auto root = fs::temp_directory_path() / "fedsim_acceptance_det";
  fs::remove_all(root);
  for (const char* run : {"a", "b"}) {
    const std::string cmd = fmt::format("{} run --strategy fedevprompt --preset desk --seed 7 --out {} > {} 2>&1", FEDSIM_CLI_PATH,
                                        (root / run).string(), (root.string() + "_" + run + ".log"));
    const int status = std::system(cmd.c_str());
    o.require(WIFEXITED(status) && WEXITSTATUS(status) == 0, fmt::format("run {} exited with {}", run, status));
  }
  const auto a = csv_body(root / "a" / "results_fedevprompt_seed7.csv");
  const auto b = csv_body(root / "b" / "results_fedevprompt_seed7.csv");
  o.require(!a.empty(), "no results written");
  o.require(a == b, "results bodies differ");
  if (o.passed) o.detail = fmt::format("{} identical bytes", a.size());
  fs::remove_all(root);
  return o;
}

// ---------------------------------------------------------------- 9
Outcome fedavg_fixed_point() {
  Outcome o;
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> u(-5.0, 5.0), w(1.0, 1000.0);
  for (int t = 0; t < 1000; ++t) {
    std::vector<double> theta(1 + rng() % 64);
    for (auto& x : theta) x = u(rng);
    const std::size_t C = 2 + rng() % 6;
    std::vector<std::vector<double>> thetas(C, theta);
    std::vector<double> weights(C);
    for (auto& x : weights) x = std::floor(w(rng));
    o.require(federation::weighted_average(thetas, weights) == theta, fmt::format("trial {} not bit-exact", t));
  }
  std::vector<std::vector<double>> toy{{0.0}, {4.0}};
  std::vector<double> n{3.0, 1.0};
  const double v = federation::weighted_average(toy, n)[0];
  o.require(v == 1.0, fmt::format("toy average {:.17g}", v));
  if (o.passed) o.detail = "1000 identity trials, toy = 1.0";
  return o;
}

}  // namespace

int main() {
  harness::tune_allocator();
  const auto t0 = Clock::now();
  std::vector<std::pair<std::string, Outcome>> results;
  auto report = [&](int id, const std::string& name, Outcome o) {
    fmt::print("criterion {} {}: {}{}{}\n", id, name, o.passed ? "PASS" : "FAIL", o.detail.empty() ? "" : " | ", o.detail);
    std::fflush(stdout);
    results.emplace_back(name, std::move(o));
  };

  report(1, "gradient suite", guarded(gradient_suite));
  report(2, "evidential identities", guarded(evidential_identities));
  report(3, "evidential mse oracle", guarded(mse_oracle));
  report(4, "rollout oracle", guarded(rollout_oracle));
  report(5, "buffer correctness", guarded(buffer_correctness));
  report(9, "fedavg fixed point", guarded(fedavg_fixed_point));

  std::optional<Desk> desk;
  DirectionalRuns runs;
  Outcome setup = guarded([&] {
    desk.emplace();
    runs = directional_runs(*desk);
    return Outcome{};
  });
  if (setup.passed) {
    report(6, "privacy audit", guarded([&] { return privacy_audit(*desk, runs); }));
    report(7, "directional desk experiment", guarded([&] { return directional(runs); }));
  } else {
    report(6, "privacy audit", setup);
    report(7, "directional desk experiment", setup);
  }
  report(8, "determinism", guarded(determinism));

  const auto failed = std::count_if(results.begin(), results.end(), [](const auto& r) { return !r.second.passed; });
  fmt::print("{} of {} criteria passed in {:.0f} s\n", results.size() - failed, results.size(), seconds_since(t0));
  return failed == 0 ? 0 : 1;
}
