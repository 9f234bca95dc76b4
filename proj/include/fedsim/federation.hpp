#pragma once

// Round-based orchestration of federation clients: FedEvPrompt (local prompt
// training plus attention-map distillation through a shared buffer) and the
// baseline strategies it is compared against. Every cross-client transfer is
// recorded in a MessageLog so sharing contracts can be audited.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "fedsim/data.hpp"
#include "fedsim/distill.hpp"
#include "fedsim/evidential.hpp"
#include "fedsim/optim.hpp"
#include "fedsim/vit.hpp"

namespace fedsim::federation {

enum class PayloadKind { AttentionMaps, Parameters, Prototypes, MeanLogits };
std::string_view name(PayloadKind kind);

inline constexpr int kServer = -1;

struct Message {
  std::size_t round = 0;
  int sender = kServer;
  int receiver = kServer;
  PayloadKind kind = PayloadKind::Parameters;
  std::size_t payload_size = 0;  // number of doubles
};

class MessageLog {
 public:
  void append(const Message& m) { entries_.push_back(m); }
  std::span<const Message> entries() const noexcept { return entries_; }
  bool empty() const noexcept { return entries_.empty(); }
  std::size_t count(PayloadKind kind) const;
  // True when every entry carries `kind` (vacuously true for an empty log).
  bool only(PayloadKind kind) const;

 private:
  std::vector<Message> entries_;
};

enum class Strategy {
  FedEvPrompt,  // KD with uncertainty-ranked buffer
  KdRandom,     // KD with randomly selected buffer maps
  LocalBt,
  LocalG,
  FedAvg,  // b- and t-prompts (+ head) averaged
  FedAvgPers,
  FedProx,
  FedProto,
  FedDistill,
  FedAvgB,
  FedAvgBtKd,
  FedAvgG,
  FedAvgGKd,
};

// Accepts the canonical names plus the aliases kd_uncertainty and fedavg_bt.
Strategy parse_strategy(std::string_view name);
std::string_view name(Strategy strategy);
std::vector<Strategy> all_strategies();

struct Hyperparameters {
  std::size_t rounds = 5;
  std::size_t epochs = 15;
  std::size_t batch_size = 32;
  double lambda_kd = 1e-6;
  double mu1 = 2.5e-4;  // b-prompts
  double mu2 = 5e-4;    // t-prompts and head
  double weight_decay = 1e-2;
  std::size_t buffer_maps = 5;
  optim::Kind optimizer = optim::Kind::AdamW;
  double fedprox_mu = 0.01;
  double fedproto_beta = 1.0;
  double feddistill_gamma = 0.1;
  bool aggregate_head = true;
  std::size_t threads = 1;

  void validate() const;
};

struct RoundMetrics {
  std::size_t round = 0;
  int client = 0;
  double balanced_accuracy = 0.0;
  double mean_vacuity = 0.0;
  double loss_eps = 0.0;
  double loss_kd = 0.0;
};

enum class PromptVariant { BT, G };

struct ClientState {
  int id = 0;
  std::vector<data::Sample> train;
  std::vector<data::Sample> test;
  vit::PromptSet prompts;
  vit::EvidenceHead head;
  evidential::ClassPrior prior;
  optim::Optimizer optimizer{optim::Kind::AdamW, 0.0};
  std::mt19937_64 rng;
  std::vector<RoundMetrics> history;
};

struct ShareSet {
  bool b_prompts = false;
  bool t_prompts = false;
  bool head = false;
  bool any() const { return b_prompts || t_prompts || head; }
};

struct FedAvgOptions {
  ShareSet share;
  PromptVariant variant = PromptVariant::BT;
  bool personalize = false;
  bool kd = false;
  double prox_mu = 0.0;
};

// Batch-mean extra losses; exposed so their contracts can be tested directly.
// Rows whose class has no prototype contribute nothing.
Tensor prototype_alignment(Tape& tape, const Tensor& features, std::span<const std::size_t> labels,
                           const std::vector<std::optional<std::vector<double>>>& prototypes, double beta);
// gamma * MSE between per-class batch means of `outputs` and the targets.
Tensor mean_output_distillation(Tape& tape, const Tensor& outputs, std::span<const std::size_t> labels,
                                const std::vector<std::optional<std::vector<double>>>& targets, double gamma);
// (mu/2) * ||params - anchor||^2
Tensor proximal_term(Tape& tape, std::span<const Tensor> params, std::span<const std::vector<double>> anchor, double mu);

// sum_c w_c theta_c / sum_c w_c, evaluated as theta_0 + sum_c w_c (theta_c - theta_0) / sum w
// so identical inputs come back bit-exact.
std::vector<double> weighted_average(std::span<const std::vector<double>> thetas, std::span<const double> weights);

// Mean per-class recall over classes present in `labels`.
double balanced_accuracy(std::span<const std::size_t> predictions, std::span<const std::size_t> labels, std::size_t num_classes);

struct RunResult {
  std::string strategy;
  std::uint64_t seed = 0;
  std::vector<RoundMetrics> rows;
  MessageLog log;
  std::vector<double> final_accuracy;  // per client
  std::size_t buffer_version = 0;
  std::size_t buffer_size = 0;
};

// Called after each round's buffer commit with the committed buffer.
using BufferHook = std::function<void(std::size_t round, const distill::AttentionBuffer& buffer)>;

class Federation {
 public:
  Federation(vit::FrozenBackbone backbone, std::vector<data::Split> splits, std::size_t num_classes, Hyperparameters hp,
             std::uint64_t seed);

  RunResult run(Strategy strategy, const BufferHook& hook = {});

  // Strategy drivers; each runs the full round plan on fresh client state.
  void run_fedevprompt(bool random_selection, const BufferHook& hook = {});
  // One round of local training against buffer version round-1, then
  // selection, publication and commit.
  void run_round_fedevprompt(std::size_t round, bool random_selection);
  void run_local(PromptVariant variant);
  void run_fedavg(const FedAvgOptions& options, const BufferHook& hook = {});
  void run_fedprox(double mu);
  void run_fedproto();
  void run_feddistill();

  // Balanced accuracy of a client on its test split.
  double evaluate(const ClientState& client) const;

  void reset(PromptVariant variant);

  std::span<ClientState> clients() noexcept { return clients_; }
  std::span<const ClientState> clients() const noexcept { return clients_; }
  const distill::AttentionBuffer& buffer() const noexcept { return buffer_; }
  const MessageLog& log() const noexcept { return log_; }
  const Hyperparameters& hyperparameters() const noexcept { return hp_; }
  const vit::FrozenBackbone& backbone() const noexcept { return backbone_; }
  std::size_t completed_rounds() const noexcept { return completed_rounds_; }

 private:
  struct Extras;
  struct EpochStats {
    double loss_eps = 0.0;
    double loss_kd = 0.0;
  };
  struct Inference {
    std::vector<std::vector<double>> evidence;
    std::vector<std::vector<double>> features;
    std::vector<std::vector<double>> maps;
  };

  EpochStats train_client(ClientState& client, std::size_t round_index, const Extras& extras) const;
  Inference infer(const ClientState& client, std::span<const data::Sample> samples, bool want_maps) const;
  void train_all(std::size_t round_index, const std::function<Extras(const ClientState&)>& extras,
                 std::vector<EpochStats>& stats);
  void publish_maps(std::size_t round, bool random_selection);
  void record_round(std::size_t round, const std::vector<EpochStats>& stats);
  std::vector<Tensor> shared_params(const ClientState& client, const ShareSet& share, PromptVariant variant) const;
  void aggregate(std::size_t round, const ShareSet& share, PromptVariant variant);

  vit::FrozenBackbone backbone_;
  std::vector<data::Split> splits_;
  std::size_t num_classes_;
  Hyperparameters hp_;
  std::uint64_t seed_;
  std::vector<ClientState> clients_;
  distill::AttentionBuffer buffer_;
  MessageLog log_;
  std::size_t completed_rounds_ = 0;
};

}  // namespace fedsim::federation
