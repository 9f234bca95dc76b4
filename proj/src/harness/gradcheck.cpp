#include "fedsim/harness/gradcheck.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <array>
#include <memory>
#include <optional>
#include <cmath>
#include <random>

#include "fedsim/distill.hpp"
#include "fedsim/evidential.hpp"
#include "fedsim/federation.hpp"
#include "fedsim/vit.hpp"

namespace fedsim::harness::gradcheck {

double relative_error(std::span<const double> analytic, std::span<const double> numeric) {
  double diff = 0.0, na = 0.0, nn = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    diff += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
    na += analytic[i] * analytic[i];
    nn += numeric[i] * numeric[i];
  }
  return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nn), 1e-10});
}

double check_once(const Problem& problem, double step) {
  for (const auto& t : problem.inputs) const_cast<Tensor&>(t).zero_grad();
  {
    Tape tape;
    auto loss = problem.loss(tape, problem.inputs);
    tape.backward(loss);
  }
  std::vector<double> analytic, numeric;
  for (const auto& t : problem.inputs) {
    auto g = t.grad();
    if (g.empty())
      analytic.insert(analytic.end(), t.size(), 0.0);
    else
      analytic.insert(analytic.end(), g.begin(), g.end());
  }
  auto eval = [&] {
    auto tape = Tape::inference();
    return problem.loss(tape, problem.inputs).item();
  };
  for (const auto& t : problem.inputs) {
    auto x = const_cast<Tensor&>(t).mutable_data();
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double orig = x[i];
      x[i] = orig + step;
      const double up = eval();
      x[i] = orig - step;
      const double down = eval();
      x[i] = orig;
      numeric.push_back((up - down) / (2.0 * step));
    }
  }
  return relative_error(analytic, numeric);
}

CaseReport run_case(const Case& c, const Options& options) {
  CaseReport report;
  report.name = c.name;
  try {
    for (std::uint64_t seed = 0; seed < options.seeds; ++seed) {
      const double err = check_once(c.make(seed), options.step);
      // NaN counts as worst.
      if (seed == 0 || !(err <= report.max_error)) {
        report.max_error = err;
        report.worst_seed = seed;
      }
    }
    report.passed = report.max_error <= options.tolerance;
  } catch (const std::exception& e) {
    report.error = e.what();
    report.passed = false;
  }
  return report;
}

std::vector<CaseReport> run_suite(const std::vector<Case>& cases, const Options& options) {
  std::vector<CaseReport> out;
  for (const auto& c : cases) out.push_back(run_case(c, options));
  return out;
}

std::string format_report(const std::vector<CaseReport>& reports, const Options& options) {
  std::size_t width = 4;
  for (const auto& r : reports) width = std::max(width, r.name.size());
  std::string out = fmt::format("{:<{}}  {:>12}  {:>10}  result\n", "case", width, "max_rel_err", "worst_seed");
  std::size_t failed = 0;
  for (const auto& r : reports) {
    if (!r.passed) ++failed;
    if (!r.error.empty())
      out += fmt::format("{:<{}}  {:>12}  {:>10}  FAIL ({})\n", r.name, width, "-", "-", r.error);
    else
      out += fmt::format("{:<{}}  {:>12.3e}  {:>10}  {}\n", r.name, width, r.max_error, r.worst_seed, r.passed ? "PASS" : "FAIL");
  }
  out += fmt::format("{} of {} cases passed (tolerance {:.0e}, {} seeds, step {:.0e})\n", reports.size() - failed,
                     reports.size(), options.tolerance, options.seeds, options.step);
  for (const auto& r : reports)
    if (!r.passed) out += fmt::format("FAILED: {}\n", r.name);
  return out;
}

namespace {

using Rng = std::mt19937_64;

Tensor rand_tensor(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0, bool grad = true) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = u(rng);
  return Tensor::from_data(std::move(shape), std::move(v), grad);
}

// Values with |x| in [0.1, 1.1], away from kinks at zero.
Tensor away_from_zero(Rng& rng, Shape shape) {
  std::uniform_real_distribution<double> u(0.1, 1.1);
  std::bernoulli_distribution sign(0.5);
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = sign(rng) ? u(rng) : -u(rng);
  return Tensor::from_data(std::move(shape), std::move(v), true);
}

// Scalar probe of a tensor-valued op: sum(y * r) with fixed random r.
Tensor probe(Tape& tape, const Tensor& y, std::uint64_t seed) {
  Rng rng(seed ^ 0x9e3779b97f4a7c15ULL);
  auto r = rand_tensor(rng, y.shape(), -1.0, 1.0, false);
  return ops::sum(tape, ops::mul(tape, y, r));
}

Case unary_case(std::string name, std::function<Tensor(Tape&, const Tensor&)> op, std::function<Tensor(Rng&)> input) {
  return {name, [op, input](std::uint64_t seed) {
            Rng rng(seed);
            Problem p;
            p.inputs = {input(rng)};
            p.loss = [op, seed](Tape& t, std::span<const Tensor> in) { return probe(t, op(t, in[0]), seed); };
            return p;
          }};
}

Case binary_case(std::string name, std::function<Tensor(Tape&, const Tensor&, const Tensor&)> op,
                 std::function<std::pair<Tensor, Tensor>(Rng&)> inputs) {
  return {name, [op, inputs](std::uint64_t seed) {
            Rng rng(seed);
            auto [a, b] = inputs(rng);
            Problem p;
            p.inputs = {a, b};
            p.loss = [op, seed](Tape& t, std::span<const Tensor> in) { return probe(t, op(t, in[0], in[1]), seed); };
            return p;
          }};
}

vit::ViTConfig tiny_vit() {
  vit::ViTConfig c;
  c.image_size = 8;
  c.patch_size = 4;
  c.channels = 1;
  c.embed_dim = 8;
  c.num_heads = 2;
  c.num_layers = 2;
  c.mlp_dim = 16;
  c.prompt_len = 2;
  c.split_layer = 1;
  c.num_classes = 2;
  return c;
}

struct TinyModel {
  vit::ViTConfig config = tiny_vit();
  vit::FrozenBackbone backbone;
  vit::PromptSet prompts;
  vit::EvidenceHead head;
  Tensor images;
  std::vector<std::size_t> labels;
};

std::shared_ptr<TinyModel> tiny_model(std::uint64_t seed, std::size_t batch) {
  auto m = std::make_shared<TinyModel>(TinyModel{tiny_vit(), vit::FrozenBackbone::random(tiny_vit(), seed + 11), {}, {}, {}, {}});
  m->prompts = vit::PromptSet::init(m->config, seed + 12);
  // Larger prompts so their gradients are not dwarfed by rounding.
  for (auto* group : {&m->prompts.keys, &m->prompts.values})
    for (auto& t : *group)
      for (auto& x : t.mutable_data()) x *= 10.0;
  m->head = vit::EvidenceHead::init(m->config, seed + 13);
  Rng rng(seed + 14);
  m->images = rand_tensor(rng, {batch, m->config.pixels()}, 0.0, 1.0, false);
  for (std::size_t i = 0; i < batch; ++i) m->labels.push_back(i % m->config.num_classes);
  return m;
}

std::vector<Tensor> prompt_leaves(const vit::PromptSet& p) {
  std::vector<Tensor> out(p.keys.begin(), p.keys.end());
  out.insert(out.end(), p.values.begin(), p.values.end());
  return out;
}

distill::AttentionBuffer random_buffer(Rng& rng, std::size_t clients, std::size_t classes, std::size_t per_class,
                                       std::size_t side) {
  distill::AttentionBuffer buffer(clients, classes, per_class);
  buffer.open_publication(1);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (std::size_t c = 0; c < clients; ++c) {
    std::vector<vit::RolloutMap> maps;
    for (std::size_t k = 0; k < classes; ++k)
      for (std::size_t m = 0; m < per_class; ++m) {
        vit::RolloutMap map;
        map.height = map.width = side;
        map.grid.resize(side * side);
        for (auto& g : map.grid) g = u(rng);
        map.client_id = static_cast<int>(c);
        map.class_id = static_cast<int>(k);
        map.uncertainty = u(rng);
        map.sample_id = k * per_class + m;
        maps.push_back(std::move(map));
      }
    buffer.publish(static_cast<int>(c), std::move(maps));
  }
  buffer.commit();
  return buffer;
}

std::vector<double> random_prior(Rng& rng, std::size_t K) {
  std::uniform_int_distribution<std::size_t> n(1, 50);
  std::vector<std::size_t> counts(K);
  for (auto& c : counts) c = n(rng);
  return evidential::weighted_prior(counts).weights;
}

}  // namespace

std::vector<Case> standard_cases() {
  std::vector<Case> cases;
  auto mat = [](std::size_t r, std::size_t c) { return [r, c](Rng& rng) { return rand_tensor(rng, {r, c}); }; };

  cases.push_back(binary_case("matmul", ops::matmul, [](Rng& rng) { return std::pair{rand_tensor(rng, {3, 4}), rand_tensor(rng, {4, 2})}; }));
  cases.push_back({"linear", [](std::uint64_t seed) {
                     Rng rng(seed);
                     Problem p;
                     p.inputs = {rand_tensor(rng, {5, 4}), rand_tensor(rng, {4, 3}), rand_tensor(rng, {3})};
                     p.loss = [seed](Tape& t, std::span<const Tensor> in) { return probe(t, ops::linear(t, in[0], in[1], in[2]), seed); };
                     return p;
                   }});
  cases.push_back(binary_case("bmm", ops::bmm, [](Rng& rng) { return std::pair{rand_tensor(rng, {2, 3, 4}), rand_tensor(rng, {2, 4, 5})}; }));
  cases.push_back(binary_case("bmm_nt", ops::bmm_nt, [](Rng& rng) { return std::pair{rand_tensor(rng, {2, 3, 4}), rand_tensor(rng, {2, 5, 4})}; }));
  cases.push_back({"attention_probs", [](std::uint64_t seed) {
                     Rng rng(seed);
                     Problem p;
                     // B=2, T=S=3, D=4, heads 2, prefix L=2
                     p.inputs = {rand_tensor(rng, {6, 4}), rand_tensor(rng, {6, 4}), rand_tensor(rng, {2, 4})};
                     p.loss = [seed](Tape& t, std::span<const Tensor> in) {
                       return probe(t, ops::attention_probs(t, in[0], in[1], in[2], 2, 2, 0.7), seed);
                     };
                     return p;
                   }});
  cases.push_back({"attention_probs_no_prefix", [](std::uint64_t seed) {
                     Rng rng(seed);
                     Problem p;
                     p.inputs = {rand_tensor(rng, {6, 4}), rand_tensor(rng, {6, 4})};
                     p.loss = [seed](Tape& t, std::span<const Tensor> in) {
                       return probe(t, ops::attention_probs(t, in[0], in[1], Tensor(), 2, 2, 0.7), seed);
                     };
                     return p;
                   }});
  cases.push_back({"attention_mix", [](std::uint64_t seed) {
                     Rng rng(seed);
                     Problem p;
                     p.inputs = {rand_tensor(rng, {2, 2, 3, 5}, 0.0, 1.0), rand_tensor(rng, {6, 4}), rand_tensor(rng, {2, 4})};
                     p.loss = [seed](Tape& t, std::span<const Tensor> in) {
                       return probe(t, ops::attention_mix(t, in[0], in[1], in[2]), seed);
                     };
                     return p;
                   }});
  cases.push_back(unary_case("softmax", [](Tape& t, const Tensor& x) { return ops::softmax(t, x, -1); }, mat(3, 5)));
  cases.push_back(unary_case("softmax_axis0", [](Tape& t, const Tensor& x) { return ops::softmax(t, x, 0); }, mat(3, 5)));
  cases.push_back(unary_case("relu", ops::relu, [](Rng& rng) { return away_from_zero(rng, {4, 5}); }));
  cases.push_back(unary_case("gelu", ops::gelu, [](Rng& rng) { return rand_tensor(rng, {4, 5}, -4.0, 4.0); }));
  cases.push_back({"layernorm", [](std::uint64_t seed) {
                     Rng rng(seed);
                     Problem p;
                     p.inputs = {rand_tensor(rng, {3, 6}), rand_tensor(rng, {6}), rand_tensor(rng, {6})};
                     p.loss = [seed](Tape& t, std::span<const Tensor> in) { return probe(t, ops::layernorm(t, in[0], in[1], in[2]), seed); };
                     return p;
                   }});
  auto broadcast_pair = [](Rng& rng) { return std::pair{rand_tensor(rng, {3, 4}), rand_tensor(rng, {1, 4})}; };
  cases.push_back(binary_case("add", ops::add, broadcast_pair));
  cases.push_back(binary_case("sub", ops::sub, broadcast_pair));
  cases.push_back(binary_case("mul", ops::mul, [](Rng& rng) { return std::pair{rand_tensor(rng, {3, 4}), rand_tensor(rng, {3, 1})}; }));
  cases.push_back(binary_case("div", ops::div, [](Rng& rng) {
    return std::pair{rand_tensor(rng, {3, 4}), rand_tensor(rng, {4}, 0.5, 2.0)};
  }));
  cases.push_back(unary_case("scale", [](Tape& t, const Tensor& x) { return ops::scale(t, x, -1.7); }, mat(3, 4)));
  cases.push_back(unary_case("sum", [](Tape& t, const Tensor& x) { return ops::scale(t, ops::sum(t, x), 1.3); }, mat(3, 4)));
  cases.push_back(unary_case("sum_axis", [](Tape& t, const Tensor& x) { return ops::sum(t, x, 1, true); }, mat(3, 4)));
  cases.push_back(unary_case("mean", [](Tape& t, const Tensor& x) { return ops::scale(t, ops::mean(t, x), 0.7); }, mat(3, 4)));
  cases.push_back(unary_case("mean_axis", [](Tape& t, const Tensor& x) { return ops::mean(t, x, 0); }, mat(3, 4)));
  cases.push_back(binary_case("concat", [](Tape& t, const Tensor& a, const Tensor& b) { return ops::concat(t, {a, b}, 1); },
                              [](Rng& rng) { return std::pair{rand_tensor(rng, {3, 2}), rand_tensor(rng, {3, 4})}; }));
  cases.push_back(unary_case("slice", [](Tape& t, const Tensor& x) { return ops::slice(t, x, 1, 1, 4); }, mat(3, 5)));
  cases.push_back(unary_case("transpose", ops::transpose, [](Rng& rng) { return rand_tensor(rng, {2, 3, 4}); }));
  cases.push_back(unary_case("permute", [](Tape& t, const Tensor& x) { return ops::permute(t, x, {2, 0, 1}); },
                             [](Rng& rng) { return rand_tensor(rng, {2, 3, 4}); }));
  cases.push_back(unary_case("reshape", [](Tape& t, const Tensor& x) { return ops::reshape(t, x, {4, 3}); }, mat(3, 4)));
  cases.push_back(unary_case("expand", [](Tape& t, const Tensor& x) { return ops::expand(t, x, {3, 2, 4}); }, mat(1, 4)));
  cases.push_back(binary_case("mse", ops::mse, [](Rng& rng) { return std::pair{rand_tensor(rng, {3, 4}), rand_tensor(rng, {3, 4})}; }));
  cases.push_back(unary_case("normalize_max", ops::normalize_max, [](Rng& rng) { return rand_tensor(rng, {3, 5}, 0.1, 1.0); }));

  cases.push_back({"rollout_maps", [](std::uint64_t seed) {
                     Rng rng(seed);
                     auto cfg = tiny_vit();
                     const std::size_t B = 2, T = cfg.tokens(), L = cfg.prompt_len;
                     Problem p;
                     for (std::size_t l = 0; l < cfg.num_layers; ++l) {
                       // Row-stochastic attentions with positive entries.
                       auto a = rand_tensor(rng, {B, cfg.num_heads, T, T + L}, 0.1, 1.0);
                       p.inputs.push_back(a);
                     }
                     p.loss = [cfg, seed](Tape& t, std::span<const Tensor> in) {
                       std::vector<Tensor> att;
                       for (const auto& a : in) att.push_back(ops::softmax(t, a, -1));
                       return probe(t, vit::rollout_maps(t, att, cfg), seed);
                     };
                     return p;
                   }});
  cases.push_back({"vit_forward", [](std::uint64_t seed) {
                     auto m = tiny_model(seed, 3);
                     Problem p;
                     p.inputs = prompt_leaves(m->prompts);
                     p.inputs.push_back(m->head.weight);
                     p.inputs.push_back(m->head.bias);
                     p.loss = [m, seed](Tape& t, std::span<const Tensor>) {
                       auto fwd = vit::forward(t, m->backbone, &m->prompts, m->head, m->images);
                       return ops::add(t, probe(t, fwd.evidence, seed), probe(t, fwd.features, seed + 1));
                     };
                     return p;
                   }});

  cases.push_back({"evidential_loss", [](std::uint64_t seed) {
                     Rng rng(seed);
                     const std::size_t K = std::array<std::size_t, 3>{2, 3, 5}[seed % 3], B = 4;
                     auto prior = random_prior(rng, K);
                     std::vector<std::size_t> labels(B);
                     std::uniform_int_distribution<std::size_t> lab(0, K - 1);
                     for (auto& l : labels) l = lab(rng);
                     const double epoch = std::uniform_real_distribution<double>(0.0, 12.0)(rng);
                     Problem p;
                     p.inputs = {rand_tensor(rng, {B, K}, 0.0, 5.0)};
                     p.loss = [prior, labels, epoch](Tape& t, std::span<const Tensor> in) {
                       return evidential::evidential_loss(t, in[0], labels, prior, epoch);
                     };
                     return p;
                   }});
  cases.push_back({"kd_loss", [](std::uint64_t seed) {
                     Rng rng(seed);
                     const std::size_t side = 4, B = 4;
                     auto buffer = std::make_shared<distill::AttentionBuffer>(random_buffer(rng, 3, 2, 2, side));
                     std::vector<std::size_t> labels{0, 1, 1, 0};
                     Problem p;
                     p.inputs = {rand_tensor(rng, {B, side * side}, 0.0, 1.0)};
                     p.loss = [buffer, labels](Tape& t, std::span<const Tensor> in) {
                       return distill::kd_loss(t, in[0], labels, *buffer, 1);
                     };
                     return p;
                   }});
  cases.push_back({"kd_path", [](std::uint64_t seed) {
                     auto m = tiny_model(seed, 4);
                     Rng rng(seed + 21);
                     auto buffer = std::make_shared<distill::AttentionBuffer>(random_buffer(rng, 3, 2, 2, m->config.image_size));
                     Problem p;
                     p.inputs = prompt_leaves(m->prompts);
                     p.loss = [m, buffer](Tape& t, std::span<const Tensor>) {
                       auto fwd = vit::forward(t, m->backbone, &m->prompts, m->head, m->images);
                       auto maps = vit::rollout_maps(t, fwd.attentions, m->config);
                       return distill::kd_loss(t, maps, m->labels, *buffer, 0);
                     };
                     return p;
                   }});
  cases.push_back({"combined_loss", [](std::uint64_t seed) {
                     auto m = tiny_model(seed, 4);
                     Rng rng(seed + 31);
                     auto buffer = std::make_shared<distill::AttentionBuffer>(random_buffer(rng, 3, 2, 2, m->config.image_size));
                     auto prior = random_prior(rng, m->config.num_classes);
                     // A large lambda keeps both terms visible in the gradient.
                     const double lambda = std::uniform_real_distribution<double>(0.1, 1.0)(rng);
                     Problem p;
                     p.inputs = prompt_leaves(m->prompts);
                     p.inputs.push_back(m->head.weight);
                     p.inputs.push_back(m->head.bias);
                     p.loss = [m, buffer, prior, lambda](Tape& t, std::span<const Tensor>) {
                       auto fwd = vit::forward(t, m->backbone, &m->prompts, m->head, m->images);
                       auto l_eps = evidential::evidential_loss(t, fwd.evidence, m->labels, prior, 3.0);
                       auto maps = vit::rollout_maps(t, fwd.attentions, m->config);
                       auto l_kd = distill::kd_loss(t, maps, m->labels, *buffer, 2);
                       return distill::combined_loss(t, l_eps, l_kd, lambda);
                     };
                     return p;
                   }});
  cases.push_back({"combined_loss_default_lambda", [](std::uint64_t seed) {
                     auto m = tiny_model(seed, 4);
                     Rng rng(seed + 41);
                     auto buffer = std::make_shared<distill::AttentionBuffer>(random_buffer(rng, 3, 2, 2, m->config.image_size));
                     auto prior = random_prior(rng, m->config.num_classes);
                     Problem p;
                     p.inputs = prompt_leaves(m->prompts);
                     p.loss = [m, buffer, prior](Tape& t, std::span<const Tensor>) {
                       auto fwd = vit::forward(t, m->backbone, &m->prompts, m->head, m->images);
                       auto l_eps = evidential::evidential_loss(t, fwd.evidence, m->labels, prior, 12.0);
                       auto maps = vit::rollout_maps(t, fwd.attentions, m->config);
                       auto l_kd = distill::kd_loss(t, maps, m->labels, *buffer, 1);
                       return distill::combined_loss(t, l_eps, l_kd, 1e-6);
                     };
                     return p;
                   }});
  cases.push_back({"fedprox_proximal", [](std::uint64_t seed) {
                     Rng rng(seed);
                     Problem p;
                     p.inputs = {rand_tensor(rng, {3, 4}), rand_tensor(rng, {5})};
                     std::vector<std::vector<double>> anchor;
                     for (const auto& t : p.inputs) {
                       auto a = rand_tensor(rng, t.shape(), -1.0, 1.0, false);
                       anchor.emplace_back(a.data().begin(), a.data().end());
                     }
                     const double mu = std::uniform_real_distribution<double>(0.001, 1.0)(rng);
                     p.loss = [anchor, mu](Tape& t, std::span<const Tensor> in) {
                       return federation::proximal_term(t, in, anchor, mu);
                     };
                     return p;
                   }});
  cases.push_back({"prototype_alignment", [](std::uint64_t seed) {
                     Rng rng(seed);
                     std::vector<std::optional<std::vector<double>>> protos(3);
                     for (std::size_t k = 0; k < 2; ++k) {
                       auto t = rand_tensor(rng, {4}, -1.0, 1.0, false);
                       protos[k] = std::vector<double>(t.data().begin(), t.data().end());
                     }
                     std::vector<std::size_t> labels{0, 1, 2, 1, 0};
                     Problem p;
                     p.inputs = {rand_tensor(rng, {5, 4})};
                     p.loss = [protos, labels](Tape& t, std::span<const Tensor> in) {
                       return federation::prototype_alignment(t, in[0], labels, protos, 0.8);
                     };
                     return p;
                   }});
  cases.push_back({"mean_output_distillation", [](std::uint64_t seed) {
                     Rng rng(seed);
                     std::vector<std::optional<std::vector<double>>> targets(3);
                     for (std::size_t k : {0, 2}) {
                       auto t = rand_tensor(rng, {3}, 0.0, 3.0, false);
                       targets[k] = std::vector<double>(t.data().begin(), t.data().end());
                     }
                     std::vector<std::size_t> labels{0, 1, 2, 2, 0, 1};
                     Problem p;
                     p.inputs = {rand_tensor(rng, {6, 3}, 0.0, 3.0)};
                     p.loss = [targets, labels](Tape& t, std::span<const Tensor> in) {
                       return federation::mean_output_distillation(t, in[0], labels, targets, 0.1);
                     };
                     return p;
                   }});
  return cases;
}

}  // namespace fedsim::harness::gradcheck
