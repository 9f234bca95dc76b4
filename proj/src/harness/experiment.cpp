#include "fedsim/harness/experiment.hpp"

#include <fmt/format.h>

#include <cmath>
#include <fstream>
#include <ostream>

#include "fedsim/distill.hpp"
#include "fedsim/errors.hpp"
#include "fedsim/pretrain.hpp"

namespace fedsim::harness {

namespace fs = std::filesystem;
using federation::Strategy;

namespace {

bool publishes_maps(Strategy s) {
  return s == Strategy::FedEvPrompt || s == Strategy::KdRandom || s == Strategy::FedAvgBtKd || s == Strategy::FedAvgGKd;
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

std::string cell_name(const std::string& strategy, std::uint64_t seed) { return fmt::format("{}_seed{}", strategy, seed); }

}  // namespace

std::pair<double, double> mean_std(const std::vector<double>& xs) {
  if (xs.empty()) return {0.0, 0.0};
  double m = 0.0;
  for (double x : xs) m += x;
  m /= static_cast<double>(xs.size());
  double v = 0.0;
  for (double x : xs) v += (x - m) * (x - m);
  return {m, std::sqrt(v / static_cast<double>(xs.size()))};
}

vit::FrozenBackbone make_backbone(const ExperimentConfig& config) {
  switch (config.backbone) {
    case BackboneInit::Random:
      return vit::FrozenBackbone::random(config.model, config.backbone_seed);
    case BackboneInit::Pretext: {
      pretrain::Options opts;
      opts.steps = config.pretext_steps;
      opts.seed = config.backbone_seed;
      return pretrain::pretrain_backbone(config.model, opts);
    }
    case BackboneInit::File:
      if (config.backbone_path.empty()) throw ConfigError("backbone.path", "file backbone needs a weights path");
      return vit::FrozenBackbone::load(config.backbone_path, config.model);
  }
  throw ConfigError("backbone.init", "unhandled backbone kind");
}

std::vector<data::Split> make_splits(const ExperimentConfig& config, std::uint64_t seed) {
  data::FederationDataset ds;
  if (config.source == DataSource::External) {
    if (config.data_path.empty()) throw ConfigError("data.path", "external data source needs a data path");
    try {
      ds = data::load_external(config.data_path, config.model.image_size, config.model.channels, config.model.num_classes);
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception& e) {
      throw ConfigError("data.path", e.what());
    }
  } else {
    if (config.model.channels != 1) throw ConfigError("model.channels", "synthetic data is single-channel");
    ds = data::generate_synthetic(config.skew, config.model.image_size, seed);
  }
  std::vector<data::Split> splits;
  for (std::size_t c = 0; c < ds.clients.size(); ++c)
    splits.push_back(data::split(ds.clients[c], config.train_fraction, seed * 1000 + c));
  return splits;
}

federation::RunResult run_cell(const ExperimentConfig& config, const vit::FrozenBackbone& backbone, Strategy strategy,
                               std::uint64_t seed, const federation::BufferHook& hook) {
  auto hp = config.training;
  hp.threads = thread_cap();
  federation::Federation fed(backbone, make_splits(config, seed), config.model.num_classes, hp, seed);
  return fed.run(strategy, hook);
}

std::string results_csv(const ExperimentConfig& config, const federation::RunResult& result) {
  std::string out;
  out += fmt::format("# strategy = {}\n# seed = {}\n", result.strategy, result.seed);
  const auto ini = to_ini(config);
  std::size_t start = 0;
  while (start < ini.size()) {
    const auto nl = ini.find('\n', start);
    const auto line = ini.substr(start, nl - start);
    if (!line.empty()) out += "# " + line + "\n";
    start = nl + 1;
  }
  out += kCsvHeader;
  out += '\n';
  std::size_t last_round = 0;
  for (const auto& r : result.rows) {
    out += fmt::format("{},{},{},{},{:.6f},{:.6f},{:.6f},{:.6f}\n", result.strategy, result.seed, r.round, r.client,
                       r.balanced_accuracy, r.mean_vacuity, r.loss_eps, r.loss_kd);
    last_round = std::max(last_round, r.round);
  }
  std::vector<double> acc, vac, eps, kd;
  for (const auto& r : result.rows) {
    if (r.round != last_round) continue;
    acc.push_back(r.balanced_accuracy);
    vac.push_back(r.mean_vacuity);
    eps.push_back(r.loss_eps);
    kd.push_back(r.loss_kd);
  }
  const auto [m, s] = mean_std(acc);
  out += fmt::format("{},{},final,avg,{:.6f}±{:.6f},{:.6f},{:.6f},{:.6f}\n", result.strategy, result.seed, m, s,
                     mean_std(vac).first, mean_std(eps).first, mean_std(kd).first);
  return out;
}

std::string messages_csv(const federation::RunResult& result) {
  std::string out = "round,sender,receiver,kind,payload_size\n";
  auto who = [](int id) { return id == federation::kServer ? std::string("server") : std::to_string(id); };
  for (const auto& m : result.log.entries())
    out += fmt::format("{},{},{},{},{}\n", m.round, who(m.sender), who(m.receiver), federation::name(m.kind), m.payload_size);
  return out;
}

namespace {

struct CellRun {
  federation::RunResult result;
  CellFiles files;
};

CellRun run_and_write(const ExperimentConfig& config, const vit::FrozenBackbone& backbone, const std::string& strategy_name,
                      std::uint64_t seed, std::ostream& log) {
  const auto strategy = federation::parse_strategy(strategy_name);
  const auto cell = cell_name(std::string(federation::name(strategy)), seed);
  CellRun out;
  federation::BufferHook hook;
  if (config.dump_buffers && publishes_maps(strategy)) {
    hook = [&](std::size_t round, const distill::AttentionBuffer& buffer) {
      const auto dir = config.out / "buffers" / cell / fmt::format("round{}", round);
      fs::create_directories(dir);
      distill::dump(buffer, dir, round);
      out.files.buffer_dirs.push_back(dir);
    };
  }
  log << fmt::format("[{}] running\n", cell) << std::flush;
  out.result = run_cell(config, backbone, strategy, seed, hook);
  out.files.results = config.out / fmt::format("results_{}.csv", cell);
  out.files.messages = config.out / fmt::format("messages_{}.csv", cell);
  write_file(out.files.results, results_csv(config, out.result));
  write_file(out.files.messages, messages_csv(out.result));
  const auto [m, s] = mean_std(out.result.final_accuracy);
  log << fmt::format("[{}] balanced accuracy {:.4f} ± {:.4f}\n", cell, m, s) << std::flush;
  return out;
}

}  // namespace

std::vector<CellFiles> run_experiment(const ExperimentConfig& config, std::ostream& log) {
  config.validate();
  fs::create_directories(config.out);
  write_file(config.out / "config.ini", to_ini(config));
  const auto backbone = make_backbone(config);
  std::vector<CellFiles> files;
  for (const auto& strategy : config.strategies)
    for (auto seed : config.seeds) files.push_back(run_and_write(config, backbone, strategy, seed, log).files);
  return files;
}

CompareRow summarize(const std::string& strategy, const std::vector<federation::RunResult>& seeds) {
  CompareRow row;
  row.strategy = strategy;
  if (seeds.empty()) return row;
  row.per_client.assign(seeds.front().final_accuracy.size(), 0.0);
  for (const auto& r : seeds) {
    if (r.final_accuracy.size() != row.per_client.size()) throw DimensionError("summarize: client counts differ across seeds");
    for (std::size_t c = 0; c < row.per_client.size(); ++c) row.per_client[c] += r.final_accuracy[c];
  }
  for (auto& v : row.per_client) v /= static_cast<double>(seeds.size());
  std::tie(row.mean, row.std) = mean_std(row.per_client);
  return row;
}

std::string format_table(const std::vector<CompareRow>& rows) {
  std::size_t width = 8;
  std::size_t clients = 0;
  for (const auto& r : rows) {
    width = std::max(width, r.strategy.size());
    clients = std::max(clients, r.per_client.size());
  }
  std::string out = fmt::format("{:<{}}", "strategy", width);
  for (std::size_t c = 0; c < clients; ++c) out += fmt::format("  {:>8}", fmt::format("client{}", c));
  out += fmt::format("  {:>17}\n", "avg");
  for (const auto& r : rows) {
    out += fmt::format("{:<{}}", r.strategy, width);
    for (std::size_t c = 0; c < clients; ++c)
      out += c < r.per_client.size() ? fmt::format("  {:>8.4f}", r.per_client[c]) : fmt::format("  {:>8}", "-");
    out += fmt::format("  {:>8.4f} ± {:<6.4f}\n", r.mean, r.std);
  }
  return out;
}

std::string format_csv(const std::vector<CompareRow>& rows) {
  std::size_t clients = 0;
  for (const auto& r : rows) clients = std::max(clients, r.per_client.size());
  std::string out = "strategy";
  for (std::size_t c = 0; c < clients; ++c) out += fmt::format(",client{}", c);
  out += ",mean,std\n";
  for (const auto& r : rows) {
    out += r.strategy;
    for (std::size_t c = 0; c < clients; ++c) out += c < r.per_client.size() ? fmt::format(",{:.6f}", r.per_client[c]) : ",";
    out += fmt::format(",{:.6f},{:.6f}\n", r.mean, r.std);
  }
  return out;
}

std::vector<CompareRow> compare(const ExperimentConfig& config, std::ostream& log) {
  config.validate();
  fs::create_directories(config.out);
  write_file(config.out / "config.ini", to_ini(config));
  const auto backbone = make_backbone(config);
  std::vector<CompareRow> rows;
  for (const auto& strategy : config.strategies) {
    std::vector<federation::RunResult> results;
    for (auto seed : config.seeds) results.push_back(run_and_write(config, backbone, strategy, seed, log).result);
    rows.push_back(summarize(std::string(federation::name(federation::parse_strategy(strategy))), results));
  }
  write_file(config.out / "compare.txt", format_table(rows));
  write_file(config.out / "compare.csv", format_csv(rows));
  return rows;
}

}  // namespace fedsim::harness
