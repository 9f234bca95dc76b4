#pragma once

// Running configured experiments: data and backbone construction, one
// (strategy, seed) cell at a time, results CSVs, and the compare table.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "fedsim/federation.hpp"
#include "fedsim/harness/config.hpp"

namespace fedsim::harness {

inline constexpr const char* kCsvHeader = "strategy,seed,round,client,balanced_accuracy,mean_vacuity,loss_eps,loss_kd";

vit::FrozenBackbone make_backbone(const ExperimentConfig& config);

// Synthetic data is regenerated from the seed; external data is loaded once
// per call and split with the seed.
std::vector<data::Split> make_splits(const ExperimentConfig& config, std::uint64_t seed);

federation::RunResult run_cell(const ExperimentConfig& config, const vit::FrozenBackbone& backbone,
                               federation::Strategy strategy, std::uint64_t seed,
                               const federation::BufferHook& hook = {});

// Resolved config as '#' comment lines, the header, one row per (round,
// client), then a "final,avg" row holding mean±std across clients.
std::string results_csv(const ExperimentConfig& config, const federation::RunResult& result);

// round,sender,receiver,kind,payload_size
std::string messages_csv(const federation::RunResult& result);

struct CellFiles {
  std::filesystem::path results;
  std::filesystem::path messages;
  std::vector<std::filesystem::path> buffer_dirs;
};

// Runs every configured strategy x seed, writing results, message logs,
// buffer dumps (only for strategies that publish maps) and config.ini into
// config.out. Progress goes to `log`.
std::vector<CellFiles> run_experiment(const ExperimentConfig& config, std::ostream& log);

struct CompareRow {
  std::string strategy;
  std::vector<double> per_client;  // mean over seeds
  double mean = 0.0;
  double std = 0.0;                // population std across clients
};

CompareRow summarize(const std::string& strategy, const std::vector<federation::RunResult>& seeds);
std::string format_table(const std::vector<CompareRow>& rows);
std::string format_csv(const std::vector<CompareRow>& rows);

// Runs all cells, writes their files plus compare.csv and compare.txt.
std::vector<CompareRow> compare(const ExperimentConfig& config, std::ostream& log);

// Mean and population standard deviation.
std::pair<double, double> mean_std(const std::vector<double>& xs);

}  // namespace fedsim::harness
