#include "fedsim/federation.hpp"

#include <algorithm>
#include <atomic>
#include <exception>
#include <mutex>
#include <numeric>
#include <thread>

#include <fmt/format.h>

#include "fedsim/errors.hpp"

namespace fedsim::federation {
namespace {

std::uint64_t mix(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = seed ^ (0x9e3779b97f4a7c15ULL * (a + 1)) ^ (0xc2b2ae3d27d4eb4fULL * (b + 1));
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// Runs fn(i) for i in [0, n) on up to `threads` workers; rethrows the first failure.
void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> workers;
  for (std::size_t t = 0; t < threads; ++t)
    workers.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!error) error = std::current_exception();
        }
      }
    });
  for (auto& w : workers) w.join();
  if (error) std::rethrow_exception(error);
}

Tensor batch_images(std::span<const data::Sample> samples, std::span<const std::size_t> idx, std::size_t pixels,
                    std::vector<std::size_t>& labels) {
  std::vector<double> buf(idx.size() * pixels);
  labels.resize(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const auto& s = samples[idx[i]];
    if (s.pixels.size() != pixels) throw DimensionError(fmt::format("sample {} has {} pixels, model expects {}", s.id, s.pixels.size(), pixels));
    std::copy(s.pixels.begin(), s.pixels.end(), buf.begin() + static_cast<std::ptrdiff_t>(i * pixels));
    labels[i] = s.label;
  }
  return Tensor::from_data({idx.size(), pixels}, std::move(buf));
}

std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

std::size_t argmax(std::span<const double> v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

}  // namespace

std::string_view name(PayloadKind kind) {
  switch (kind) {
    case PayloadKind::AttentionMaps:
      return "attention_maps";
    case PayloadKind::Parameters:
      return "parameters";
    case PayloadKind::Prototypes:
      return "prototypes";
    case PayloadKind::MeanLogits:
      return "mean_logits";
  }
  return "unknown";
}

std::size_t MessageLog::count(PayloadKind kind) const {
  return static_cast<std::size_t>(std::count_if(entries_.begin(), entries_.end(), [kind](const Message& m) { return m.kind == kind; }));
}

bool MessageLog::only(PayloadKind kind) const { return count(kind) == entries_.size(); }

namespace {
struct StrategyName {
  Strategy strategy;
  std::string_view name;
};
constexpr StrategyName kStrategyNames[] = {
    {Strategy::FedEvPrompt, "fedevprompt"}, {Strategy::KdRandom, "kd_random"},   {Strategy::LocalBt, "local_bt"},
    {Strategy::LocalG, "local_g"},          {Strategy::FedAvg, "fedavg"},        {Strategy::FedAvgPers, "fedavg_pers"},
    {Strategy::FedProx, "fedprox"},         {Strategy::FedProto, "fedproto"},    {Strategy::FedDistill, "feddistill"},
    {Strategy::FedAvgB, "fedavg_b"},        {Strategy::FedAvgBtKd, "fedavg_bt_kd"}, {Strategy::FedAvgG, "fedavg_g"},
    {Strategy::FedAvgGKd, "fedavg_g_kd"},
};
}  // namespace

Strategy parse_strategy(std::string_view n) {
  if (n == "kd_uncertainty") return Strategy::FedEvPrompt;
  if (n == "fedavg_bt") return Strategy::FedAvg;
  for (const auto& s : kStrategyNames)
    if (s.name == n) return s.strategy;
  std::string known;
  for (const auto& s : kStrategyNames) known += (known.empty() ? "" : ", ") + std::string(s.name);
  throw ConfigError("strategy", fmt::format("unknown strategy '{}' (known: {})", n, known));
}

std::string_view name(Strategy strategy) {
  for (const auto& s : kStrategyNames)
    if (s.strategy == strategy) return s.name;
  return "unknown";
}

std::vector<Strategy> all_strategies() {
  std::vector<Strategy> out;
  for (const auto& s : kStrategyNames) out.push_back(s.strategy);
  return out;
}

void Hyperparameters::validate() const {
  if (rounds == 0) throw ConfigError("rounds", "must be positive");
  if (epochs == 0) throw ConfigError("epochs", "must be positive");
  if (batch_size == 0) throw ConfigError("batch_size", "must be positive");
  if (lambda_kd < 0.0) throw ConfigError("lambda_kd", "must be non-negative");
  if (!(mu1 > 0.0)) throw ConfigError("mu1", "must be positive");
  if (!(mu2 > 0.0)) throw ConfigError("mu2", "must be positive");
  if (!(mu1 < mu2)) throw ConfigError("mu1", "b-prompt learning rate must be smaller than mu2");
  if (weight_decay < 0.0) throw ConfigError("weight_decay", "must be non-negative");
  if (buffer_maps == 0) throw ConfigError("buffer_maps", "must be positive");
  if (fedprox_mu < 0.0) throw ConfigError("fedprox_mu", "must be non-negative");
  if (fedproto_beta < 0.0) throw ConfigError("fedproto_beta", "must be non-negative");
  if (feddistill_gamma < 0.0) throw ConfigError("feddistill_gamma", "must be non-negative");
  if (threads == 0) throw ConfigError("threads", "must be positive");
}

Tensor prototype_alignment(Tape& tape, const Tensor& features, std::span<const std::size_t> labels,
                           const std::vector<std::optional<std::vector<double>>>& prototypes, double beta) {
  const std::size_t B = features.dim(0), D = features.dim(1);
  std::vector<double> target(B * D, 0.0), mask(B, 0.0);
  for (std::size_t b = 0; b < B; ++b) {
    if (labels[b] >= prototypes.size() || !prototypes[labels[b]]) continue;
    const auto& p = *prototypes[labels[b]];
    if (p.size() != D) throw DimensionError(fmt::format("prototype has {} dims, features {}", p.size(), D));
    std::copy(p.begin(), p.end(), target.begin() + static_cast<std::ptrdiff_t>(b * D));
    mask[b] = 1.0;
  }
  const Tensor diff = ops::sub(tape, features, Tensor::from_data({B, D}, std::move(target)));
  const Tensor sq = ops::mul(tape, ops::mul(tape, diff, diff), Tensor::from_data({B, 1}, std::move(mask)));
  return ops::scale(tape, ops::sum(tape, sq), beta / static_cast<double>(B));
}

Tensor mean_output_distillation(Tape& tape, const Tensor& outputs, std::span<const std::size_t> labels,
                                const std::vector<std::optional<std::vector<double>>>& targets, double gamma) {
  const std::size_t B = outputs.dim(0), K = outputs.dim(1);
  std::vector<std::size_t> classes;
  for (std::size_t k = 0; k < targets.size(); ++k)
    if (targets[k] && std::find(labels.begin(), labels.end(), k) != labels.end()) classes.push_back(k);
  if (classes.empty()) return Tensor::scalar(0.0);
  const std::size_t R = classes.size();
  std::vector<double> select(R * B, 0.0), target(R * K);
  for (std::size_t r = 0; r < R; ++r) {
    const auto n = static_cast<double>(std::count(labels.begin(), labels.end(), classes[r]));
    for (std::size_t b = 0; b < B; ++b)
      if (labels[b] == classes[r]) select[r * B + b] = 1.0 / n;
    const auto& t = *targets[classes[r]];
    if (t.size() != K) throw DimensionError(fmt::format("distillation target has {} dims, outputs {}", t.size(), K));
    std::copy(t.begin(), t.end(), target.begin() + static_cast<std::ptrdiff_t>(r * K));
  }
  const Tensor means = ops::matmul(tape, Tensor::from_data({R, B}, std::move(select)), outputs);
  return ops::scale(tape, ops::mse(tape, means, Tensor::from_data({R, K}, std::move(target))), gamma);
}

Tensor proximal_term(Tape& tape, std::span<const Tensor> params, std::span<const std::vector<double>> anchor, double mu) {
  if (params.size() != anchor.size()) throw DimensionError("proximal_term: parameter and anchor counts differ");
  Tensor total;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Tensor diff = ops::sub(tape, params[i], Tensor::from_data(params[i].shape(), anchor[i]));
    const Tensor s = ops::sum(tape, ops::mul(tape, diff, diff));
    total = total.defined() ? ops::add(tape, total, s) : s;
  }
  if (!total.defined()) return Tensor::scalar(0.0);
  return ops::scale(tape, total, 0.5 * mu);
}

std::vector<double> weighted_average(std::span<const std::vector<double>> thetas, std::span<const double> weights) {
  if (thetas.empty() || thetas.size() != weights.size()) throw UsageError("weighted_average: need one weight per parameter vector");
  const double total = std::accumulate(weights.begin(), weights.end(), 0.0);
  if (!(total > 0.0)) throw UsageError("weighted_average: weights must sum to a positive value");
  std::vector<double> out = thetas[0];
  for (std::size_t c = 0; c < thetas.size(); ++c) {
    if (thetas[c].size() != out.size()) throw DimensionError("weighted_average: parameter sizes differ");
    const double w = weights[c] / total;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += w * (thetas[c][i] - thetas[0][i]);
  }
  return out;
}

double balanced_accuracy(std::span<const std::size_t> predictions, std::span<const std::size_t> labels, std::size_t num_classes) {
  if (predictions.size() != labels.size()) throw DimensionError("balanced_accuracy: prediction and label counts differ");
  std::vector<std::size_t> total(num_classes, 0), correct(num_classes, 0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= num_classes) throw UsageError(fmt::format("label {} outside 0..{}", labels[i], num_classes - 1));
    ++total[labels[i]];
    if (predictions[i] == labels[i]) ++correct[labels[i]];
  }
  double sum = 0.0;
  std::size_t present = 0;
  for (std::size_t k = 0; k < num_classes; ++k) {
    if (total[k] == 0) continue;
    sum += static_cast<double>(correct[k]) / static_cast<double>(total[k]);
    ++present;
  }
  return present == 0 ? 0.0 : sum / static_cast<double>(present);
}

struct Federation::Extras {
  bool kd = false;
  std::vector<Tensor> prox_params;
  std::vector<std::vector<double>> prox_anchor;
  double prox_mu = 0.0;
  const std::vector<std::optional<std::vector<double>>>* prototypes = nullptr;
  const std::vector<std::optional<std::vector<double>>>* distill_targets = nullptr;
};

Federation::Federation(vit::FrozenBackbone backbone, std::vector<data::Split> splits, std::size_t num_classes,
                       Hyperparameters hp, std::uint64_t seed)
    : backbone_(std::move(backbone)),
      splits_(std::move(splits)),
      num_classes_(num_classes),
      hp_(hp),
      seed_(seed),
      buffer_(splits_.size(), num_classes, hp.buffer_maps) {
  hp_.validate();
  if (splits_.empty()) throw UsageError("federation needs at least one client");
  if (num_classes_ != backbone_.config().num_classes)
    throw ConfigError("num_classes", fmt::format("data has {} classes, model head {}", num_classes_, backbone_.config().num_classes));
  reset(PromptVariant::BT);
}

void Federation::reset(PromptVariant variant) {
  const auto& cfg = backbone_.config();
  clients_.clear();
  for (std::size_t c = 0; c < splits_.size(); ++c) {
    ClientState s;
    s.id = static_cast<int>(c);
    s.train = splits_[c].train;
    s.test = splits_[c].test;
    if (s.train.empty()) throw UsageError(fmt::format("client {} has an empty training split", c));
    s.prompts = vit::PromptSet::init(cfg, mix(seed_, c, 1));
    s.head = vit::EvidenceHead::init(cfg, mix(seed_, c, 2));
    try {
      s.prior = evidential::weighted_prior(data::class_counts(s.train, num_classes_));
    } catch (const DomainError& e) {
      throw DomainError(fmt::format("client {}: {}", c, e.what()));
    }
    s.optimizer = optim::Optimizer(hp_.optimizer, hp_.weight_decay);
    auto groups = vit::trainable_params(s.prompts, s.head);
    if (variant == PromptVariant::BT) {
      s.optimizer.add_group(groups.b_group.name, groups.b_group.params, hp_.mu1);
      s.optimizer.add_group(groups.t_group.name, groups.t_group.params, hp_.mu2);
    } else {
      std::vector<Tensor> prompts = groups.b_group.params;
      prompts.insert(prompts.end(), s.prompts.keys.begin() + static_cast<std::ptrdiff_t>(s.prompts.split_layer), s.prompts.keys.end());
      prompts.insert(prompts.end(), s.prompts.values.begin() + static_cast<std::ptrdiff_t>(s.prompts.split_layer), s.prompts.values.end());
      s.optimizer.add_group("g_prompts", std::move(prompts), hp_.mu1);
      s.optimizer.add_group("head", {s.head.weight, s.head.bias}, hp_.mu2);
    }
    s.rng.seed(mix(seed_, c, 3));
    clients_.push_back(std::move(s));
  }
  buffer_ = distill::AttentionBuffer(splits_.size(), num_classes_, hp_.buffer_maps);
  log_ = MessageLog{};
  completed_rounds_ = 0;
}

Federation::EpochStats Federation::train_client(ClientState& client, std::size_t round_index, const Extras& extras) const {
  const auto& cfg = backbone_.config();
  const std::size_t n = client.train.size();
  const bool kd = extras.kd && buffer_.size() > 0;
  std::vector<std::size_t> order(n);
  std::vector<std::size_t> labels;
  EpochStats last;
  for (std::size_t j = 0; j < hp_.epochs; ++j) {
    const double epoch = static_cast<double>(round_index * hp_.epochs + j);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), client.rng);
    double sum_eps = 0.0, sum_kd = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < n; start += hp_.batch_size) {
      const std::span<const std::size_t> idx(order.data() + start, std::min(hp_.batch_size, n - start));
      const Tensor images = batch_images(client.train, idx, cfg.pixels(), labels);
      Tape tape;
      const auto fwd = vit::forward(tape, backbone_, &client.prompts, client.head, images);
      const Tensor l_eps = evidential::evidential_loss(tape, fwd.evidence, labels, client.prior.weights, epoch);
      Tensor loss = l_eps;
      sum_eps += l_eps.item();
      if (kd) {
        const Tensor maps = vit::rollout_maps(tape, fwd.attentions, cfg);
        const Tensor l_kd = distill::kd_loss(tape, maps, labels, buffer_, client.id);
        sum_kd += l_kd.item();
        loss = distill::combined_loss(tape, loss, l_kd, hp_.lambda_kd);
      }
      if (extras.prox_mu > 0.0) loss = ops::add(tape, loss, proximal_term(tape, extras.prox_params, extras.prox_anchor, extras.prox_mu));
      if (extras.prototypes != nullptr)
        loss = ops::add(tape, loss, prototype_alignment(tape, fwd.features, labels, *extras.prototypes, hp_.fedproto_beta));
      if (extras.distill_targets != nullptr)
        loss = ops::add(tape, loss, mean_output_distillation(tape, fwd.evidence, labels, *extras.distill_targets, hp_.feddistill_gamma));
      tape.backward(loss);
      client.optimizer.step();
      client.optimizer.zero_grad();
      ++batches;
    }
    last.loss_eps = sum_eps / static_cast<double>(batches);
    last.loss_kd = sum_kd / static_cast<double>(batches);
  }
  return last;
}

Federation::Inference Federation::infer(const ClientState& client, std::span<const data::Sample> samples, bool want_maps) const {
  const auto& cfg = backbone_.config();
  constexpr std::size_t chunk = 64;
  Inference out;
  std::vector<std::size_t> idx, labels;
  for (std::size_t start = 0; start < samples.size(); start += chunk) {
    idx.resize(std::min(chunk, samples.size() - start));
    std::iota(idx.begin(), idx.end(), start);
    const Tensor images = batch_images(samples, idx, cfg.pixels(), labels);
    Tape tape = Tape::inference();
    const auto fwd = vit::forward(tape, backbone_, &client.prompts, client.head, images);
    const std::size_t K = fwd.evidence.dim(1), D = fwd.features.dim(1);
    const auto ev = fwd.evidence.data();
    const auto fv = fwd.features.data();
    for (std::size_t b = 0; b < idx.size(); ++b) {
      out.evidence.emplace_back(ev.begin() + static_cast<std::ptrdiff_t>(b * K), ev.begin() + static_cast<std::ptrdiff_t>((b + 1) * K));
      out.features.emplace_back(fv.begin() + static_cast<std::ptrdiff_t>(b * D), fv.begin() + static_cast<std::ptrdiff_t>((b + 1) * D));
    }
    if (want_maps) {
      const Tensor maps = vit::rollout_maps(tape, fwd.attentions, cfg);
      const std::size_t P = maps.dim(1);
      const auto mv = maps.data();
      for (std::size_t b = 0; b < idx.size(); ++b)
        out.maps.emplace_back(mv.begin() + static_cast<std::ptrdiff_t>(b * P), mv.begin() + static_cast<std::ptrdiff_t>((b + 1) * P));
    }
  }
  return out;
}

double Federation::evaluate(const ClientState& client) const {
  const auto inf = infer(client, client.test, false);
  std::vector<std::size_t> predictions, labels;
  for (std::size_t i = 0; i < client.test.size(); ++i) {
    const auto op = evidential::opinion(inf.evidence[i], client.prior);
    predictions.push_back(argmax(op.expected));
    labels.push_back(client.test[i].label);
  }
  return balanced_accuracy(predictions, labels, num_classes_);
}

void Federation::train_all(std::size_t round_index, const std::function<Extras(const ClientState&)>& extras,
                           std::vector<EpochStats>& stats) {
  stats.assign(clients_.size(), {});
  parallel_for(clients_.size(), hp_.threads, [&](std::size_t c) {
    const Extras e = extras ? extras(clients_[c]) : Extras{};
    stats[c] = train_client(clients_[c], round_index, e);
  });
}

void Federation::publish_maps(std::size_t round, bool random_selection) {
  // barrier: every client has finished training before the window opens
  buffer_.open_publication(round);
  const std::size_t pixels = backbone_.config().image_size * backbone_.config().image_size;
  std::vector<std::vector<vit::RolloutMap>> selected(clients_.size());
  parallel_for(clients_.size(), hp_.threads, [&](std::size_t c) {
    const ClientState& client = clients_[c];
    auto inf = infer(client, client.train, true);
    std::vector<vit::RolloutMap> candidates;
    for (std::size_t i = 0; i < client.train.size(); ++i) {
      vit::RolloutMap m;
      m.height = m.width = backbone_.config().image_size;
      m.grid = std::move(inf.maps[i]);
      m.client_id = client.id;
      m.class_id = static_cast<int>(client.train[i].label);
      m.uncertainty = evidential::vacuity(inf.evidence[i], client.prior.weights);
      m.sample_id = client.train[i].id;
      candidates.push_back(std::move(m));
    }
    selected[c] = random_selection
                      ? distill::random_selection(client.id, std::move(candidates), hp_.buffer_maps, mix(seed_, c, 100 + round))
                      : distill::select_for_sharing(client.id, std::move(candidates), hp_.buffer_maps);
  });
  for (std::size_t c = 0; c < clients_.size(); ++c) {
    log_.append({round, clients_[c].id, kServer, PayloadKind::AttentionMaps, selected[c].size() * (pixels + 1)});
    buffer_.publish(clients_[c].id, std::move(selected[c]));
  }
  buffer_.commit();
  for (const auto& client : clients_) {
    std::size_t foreign = 0;
    for (std::size_t k = 0; k < num_classes_; ++k) foreign += buffer_.foreign(client.id, k).size();
    log_.append({round, kServer, client.id, PayloadKind::AttentionMaps, foreign * (pixels + 1)});
  }
}

void Federation::record_round(std::size_t round, const std::vector<EpochStats>& stats) {
  std::vector<RoundMetrics> metrics(clients_.size());
  parallel_for(clients_.size(), hp_.threads, [&](std::size_t c) {
    const ClientState& client = clients_[c];
    const auto inf = infer(client, client.test, false);
    std::vector<std::size_t> predictions, labels;
    double vac = 0.0;
    for (std::size_t i = 0; i < client.test.size(); ++i) {
      const auto op = evidential::opinion(inf.evidence[i], client.prior);
      predictions.push_back(argmax(op.expected));
      labels.push_back(client.test[i].label);
      vac += op.vacuity;
    }
    metrics[c] = {round, client.id, balanced_accuracy(predictions, labels, num_classes_),
                  client.test.empty() ? 0.0 : vac / static_cast<double>(client.test.size()), stats[c].loss_eps, stats[c].loss_kd};
  });
  for (std::size_t c = 0; c < clients_.size(); ++c) clients_[c].history.push_back(metrics[c]);
  completed_rounds_ = round;
}

void Federation::run_round_fedevprompt(std::size_t round, bool random_selection) {
  if (buffer_.publishing() || buffer_.version() + 1 != round)
    throw ProtocolError(fmt::format("round {} requires buffer version {}, found {}", round, round - 1, buffer_.version()));
  std::vector<EpochStats> stats;
  train_all(round - 1, [](const ClientState&) {
    Extras e;
    e.kd = true;
    return e;
  }, stats);
  publish_maps(round, random_selection);
  record_round(round, stats);
}

void Federation::run_fedevprompt(bool random_selection, const BufferHook& hook) {
  reset(PromptVariant::BT);
  for (std::size_t r = 1; r <= hp_.rounds; ++r) {
    run_round_fedevprompt(r, random_selection);
    if (hook) hook(r, buffer_);
  }
}

void Federation::run_local(PromptVariant variant) {
  reset(variant);
  std::vector<EpochStats> stats;
  for (std::size_t r = 1; r <= hp_.rounds; ++r) {
    train_all(r - 1, {}, stats);
    record_round(r, stats);
  }
}

std::vector<Tensor> Federation::shared_params(const ClientState& client, const ShareSet& share, PromptVariant variant) const {
  std::vector<Tensor> out;
  const std::size_t split = client.prompts.split_layer;
  for (std::size_t i = 0; i < client.prompts.num_layers(); ++i) {
    const bool b_layer = i < split;
    const bool shared = variant == PromptVariant::G ? (share.b_prompts || share.t_prompts)
                                                    : (b_layer ? share.b_prompts : share.t_prompts);
    if (!shared) continue;
    out.push_back(client.prompts.keys[i]);
    out.push_back(client.prompts.values[i]);
  }
  if (share.head) {
    out.push_back(client.head.weight);
    out.push_back(client.head.bias);
  }
  return out;
}

void Federation::aggregate(std::size_t round, const ShareSet& share, PromptVariant variant) {
  std::vector<std::vector<Tensor>> params;
  std::vector<double> weights;
  for (auto& client : clients_) {
    params.push_back(shared_params(client, share, variant));
    weights.push_back(static_cast<double>(client.train.size()));
  }
  const std::size_t count = vit::parameter_count(params.front());
  for (const auto& client : clients_) log_.append({round, client.id, kServer, PayloadKind::Parameters, count});
  for (std::size_t p = 0; p < params.front().size(); ++p) {
    std::vector<std::vector<double>> thetas;
    for (const auto& cp : params) thetas.push_back(values(cp[p]));
    const auto avg = weighted_average(thetas, weights);
    for (auto& cp : params) std::copy(avg.begin(), avg.end(), cp[p].mutable_data().begin());
  }
  for (const auto& client : clients_) log_.append({round, kServer, client.id, PayloadKind::Parameters, count});
}

void Federation::run_fedavg(const FedAvgOptions& options, const BufferHook& hook) {
  if (!options.share.any()) throw UsageError("FedAvg needs a non-empty share set");
  reset(options.variant);
  // common starting point for the shared groups
  aggregate(0, options.share, options.variant);
  std::vector<EpochStats> stats;
  for (std::size_t r = 1; r <= hp_.rounds; ++r) {
    train_all(r - 1, [&](const ClientState& client) {
      Extras e;
      e.kd = options.kd;
      if (options.prox_mu > 0.0) {
        e.prox_mu = options.prox_mu;
        e.prox_params = shared_params(client, options.share, options.variant);
        for (const auto& p : e.prox_params) e.prox_anchor.push_back(values(p));
      }
      return e;
    }, stats);
    aggregate(r, options.share, options.variant);
    if (options.kd) {
      publish_maps(r, false);
      if (hook) hook(r, buffer_);
    }
    record_round(r, stats);
  }
  if (options.personalize) {
    train_all(hp_.rounds, {}, stats);
    record_round(hp_.rounds + 1, stats);
  }
}

void Federation::run_fedprox(double mu) {
  if (!(mu > 0.0)) throw UsageError("FedProx needs a positive proximal weight");
  FedAvgOptions o;
  o.share = {true, true, hp_.aggregate_head};
  o.prox_mu = mu;
  run_fedavg(o);
}

void Federation::run_fedproto() {
  reset(PromptVariant::BT);
  const std::size_t D = backbone_.config().embed_dim;
  std::vector<std::optional<std::vector<double>>> global(num_classes_);
  bool have_global = false;
  std::vector<EpochStats> stats;
  for (std::size_t r = 1; r <= hp_.rounds; ++r) {
    train_all(r - 1, [&](const ClientState&) {
      Extras e;
      if (have_global) e.prototypes = &global;
      return e;
    }, stats);
    // per-client class means of the class-token features
    std::vector<std::vector<std::vector<double>>> local(clients_.size(), std::vector<std::vector<double>>(num_classes_, std::vector<double>(D, 0.0)));
    std::vector<std::vector<std::size_t>> counts(clients_.size());
    parallel_for(clients_.size(), hp_.threads, [&](std::size_t c) {
      const auto inf = infer(clients_[c], clients_[c].train, false);
      counts[c] = data::class_counts(clients_[c].train, num_classes_);
      for (std::size_t i = 0; i < clients_[c].train.size(); ++i) {
        const std::size_t k = clients_[c].train[i].label;
        for (std::size_t d = 0; d < D; ++d) local[c][k][d] += inf.features[i][d] / static_cast<double>(counts[c][k]);
      }
    });
    for (std::size_t c = 0; c < clients_.size(); ++c) {
      const auto present = static_cast<std::size_t>(std::count_if(counts[c].begin(), counts[c].end(), [](std::size_t n) { return n > 0; }));
      log_.append({r, clients_[c].id, kServer, PayloadKind::Prototypes, present * D});
    }
    for (std::size_t k = 0; k < num_classes_; ++k) {
      std::vector<std::vector<double>> thetas;
      std::vector<double> weights;
      for (std::size_t c = 0; c < clients_.size(); ++c)
        if (counts[c][k] > 0) {
          thetas.push_back(local[c][k]);
          weights.push_back(static_cast<double>(counts[c][k]));
        }
      if (!thetas.empty()) global[k] = weighted_average(thetas, weights);
    }
    have_global = true;
    const auto available = static_cast<std::size_t>(std::count_if(global.begin(), global.end(), [](const auto& g) { return g.has_value(); }));
    for (const auto& client : clients_) log_.append({r, kServer, client.id, PayloadKind::Prototypes, available * D});
    record_round(r, stats);
  }
}

void Federation::run_feddistill() {
  reset(PromptVariant::BT);
  const std::size_t K = num_classes_;
  using Targets = std::vector<std::optional<std::vector<double>>>;
  std::vector<Targets> targets(clients_.size(), Targets(K));
  bool have_targets = false;
  std::vector<EpochStats> stats;
  for (std::size_t r = 1; r <= hp_.rounds; ++r) {
    train_all(r - 1, [&](const ClientState& client) {
      Extras e;
      if (have_targets) e.distill_targets = &targets[static_cast<std::size_t>(client.id)];
      return e;
    }, stats);
    std::vector<std::vector<std::vector<double>>> local(clients_.size(), std::vector<std::vector<double>>(K, std::vector<double>(K, 0.0)));
    std::vector<std::vector<std::size_t>> counts(clients_.size());
    parallel_for(clients_.size(), hp_.threads, [&](std::size_t c) {
      const auto inf = infer(clients_[c], clients_[c].train, false);
      counts[c] = data::class_counts(clients_[c].train, K);
      for (std::size_t i = 0; i < clients_[c].train.size(); ++i) {
        const std::size_t k = clients_[c].train[i].label;
        for (std::size_t j = 0; j < K; ++j) local[c][k][j] += inf.evidence[i][j] / static_cast<double>(counts[c][k]);
      }
    });
    for (const auto& client : clients_) log_.append({r, client.id, kServer, PayloadKind::MeanLogits, K * K});
    for (std::size_t c = 0; c < clients_.size(); ++c) {
      for (std::size_t k = 0; k < K; ++k) {
        std::vector<std::vector<double>> thetas;
        std::vector<double> weights;
        for (std::size_t o = 0; o < clients_.size(); ++o)
          if (o != c && counts[o][k] > 0) {
            thetas.push_back(local[o][k]);
            weights.push_back(static_cast<double>(counts[o][k]));
          }
        targets[c][k] = thetas.empty() ? std::nullopt : std::optional(weighted_average(thetas, weights));
      }
      log_.append({r, kServer, clients_[c].id, PayloadKind::MeanLogits, K * K});
    }
    have_targets = true;
    record_round(r, stats);
  }
}

RunResult Federation::run(Strategy strategy, const BufferHook& hook) {
  const ShareSet bt_head{true, true, hp_.aggregate_head};
  switch (strategy) {
    case Strategy::FedEvPrompt:
      run_fedevprompt(false, hook);
      break;
    case Strategy::KdRandom:
      run_fedevprompt(true, hook);
      break;
    case Strategy::LocalBt:
      run_local(PromptVariant::BT);
      break;
    case Strategy::LocalG:
      run_local(PromptVariant::G);
      break;
    case Strategy::FedAvg:
      run_fedavg({bt_head, PromptVariant::BT, false, false, 0.0}, hook);
      break;
    case Strategy::FedAvgPers:
      run_fedavg({bt_head, PromptVariant::BT, true, false, 0.0}, hook);
      break;
    case Strategy::FedProx:
      run_fedprox(hp_.fedprox_mu);
      break;
    case Strategy::FedProto:
      run_fedproto();
      break;
    case Strategy::FedDistill:
      run_feddistill();
      break;
    case Strategy::FedAvgB:
      run_fedavg({{true, false, hp_.aggregate_head}, PromptVariant::BT, false, false, 0.0}, hook);
      break;
    case Strategy::FedAvgBtKd:
      run_fedavg({bt_head, PromptVariant::BT, false, true, 0.0}, hook);
      break;
    case Strategy::FedAvgG:
      run_fedavg({bt_head, PromptVariant::G, false, false, 0.0}, hook);
      break;
    case Strategy::FedAvgGKd:
      run_fedavg({bt_head, PromptVariant::G, false, true, 0.0}, hook);
      break;
  }
  RunResult result;
  result.strategy = std::string(name(strategy));
  result.seed = seed_;
  for (std::size_t r = 0; r < clients_.front().history.size(); ++r)
    for (const auto& client : clients_) result.rows.push_back(client.history[r]);
  for (const auto& client : clients_) result.final_accuracy.push_back(client.history.back().balanced_accuracy);
  result.log = log_;
  result.buffer_version = buffer_.version();
  result.buffer_size = buffer_.size();
  return result;
}

}  // namespace fedsim::federation
