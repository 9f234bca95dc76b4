#include <CLI11.hpp>
#include <fmt/format.h>

#include <cstdio>
#include <iostream>

#include "fedsim/errors.hpp"
#include "fedsim/harness/config.hpp"
#include "fedsim/harness/experiment.hpp"
#include "fedsim/harness/gradcheck.hpp"

using namespace fedsim;

namespace {

struct CommonFlags {
  std::string config_path;
  std::string preset;
  std::vector<std::string> strategies;
  std::vector<std::uint64_t> seeds;
  std::string out;
};

void add_common(CLI::App* cmd, CommonFlags& f, bool with_strategy) {
  cmd->add_option("--config", f.config_path, "experiment config file ([section] key = value)");
  cmd->add_option("--preset", f.preset, "desk or paper")->check(CLI::IsMember({"desk", "paper"}));
  if (with_strategy) cmd->add_option("--strategy", f.strategies, "strategy name (repeatable)");
  cmd->add_option("--seed", f.seeds, "seed (repeatable)");
  cmd->add_option("--out", f.out, "output directory");
}

// preset, then the config file, then command-line flags
harness::ExperimentConfig resolve(const CommonFlags& f) {
  harness::IniValues file;
  if (!f.config_path.empty()) file = harness::read_ini(f.config_path);
  std::string preset_name = "desk";
  if (auto it = file.find("experiment.preset"); it != file.end()) preset_name = it->second;
  if (!f.preset.empty()) preset_name = f.preset;
  auto config = harness::preset(preset_name);
  harness::apply(config, file);
  config.preset = preset_name;
  if (!f.strategies.empty()) {
    harness::IniValues v{{"experiment.strategies", fmt::format("{}", fmt::join(f.strategies, ","))}};
    harness::apply(config, v);
  }
  if (!f.seeds.empty()) config.seeds = f.seeds;
  if (!f.out.empty()) config.out = f.out;
  config.validate();
  return config;
}

}  // namespace

int main(int argc, char** argv) {
  fedsim::harness::tune_allocator();
  CLI::App app{"Federated evidential prompt-tuning simulator"};
  app.require_subcommand(1);

  CommonFlags run_flags, compare_flags, gen_flags;
  auto* run = app.add_subcommand("run", "train one strategy and write results");
  add_common(run, run_flags, true);
  auto* cmp = app.add_subcommand("compare", "run several strategies and tabulate per-client balanced accuracy");
  add_common(cmp, compare_flags, true);
  auto* gen = app.add_subcommand("gen-data", "write the synthetic federation as .bin files");
  add_common(gen, gen_flags, false);
  auto* grad = app.add_subcommand("gradcheck", "finite-difference check of every op and loss");
  std::size_t grad_seeds = 20;
  std::vector<std::string> grad_cases;
  grad->add_option("--seeds", grad_seeds, "seeds per case")->check(CLI::PositiveNumber);
  grad->add_option("--case", grad_cases, "restrict to the named case (repeatable)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (run->parsed()) {
      const auto config = resolve(run_flags);
      const auto files = harness::run_experiment(config, std::cerr);
      for (const auto& f : files) std::cout << f.results.string() << '\n';
    } else if (cmp->parsed()) {
      const auto config = resolve(compare_flags);
      const auto rows = harness::compare(config, std::cerr);
      std::cout << harness::format_table(rows) << '\n' << harness::format_csv(rows);
    } else if (gen->parsed()) {
      const auto config = resolve(gen_flags);
      if (config.source != harness::DataSource::Synthetic)
        throw ConfigError("data.source", "gen-data only writes synthetic federations");
      const auto seed = config.seeds.front();
      const auto ds = data::generate_synthetic(config.skew, config.model.image_size, seed);
      data::write_federation(ds, config.out);
      std::cout << fmt::format("wrote {} clients to {}\n", ds.clients.size(), config.out.string());
    } else if (grad->parsed()) {
      harness::gradcheck::Options opts;
      opts.seeds = grad_seeds;
      auto cases = harness::gradcheck::standard_cases();
      if (!grad_cases.empty()) {
        std::vector<harness::gradcheck::Case> chosen;
        for (const auto& name : grad_cases) {
          auto it = std::find_if(cases.begin(), cases.end(), [&](const auto& c) { return c.name == name; });
          if (it == cases.end()) throw ConfigError("--case", fmt::format("unknown gradcheck case '{}'", name));
          chosen.push_back(*it);
        }
        cases = std::move(chosen);
      }
      const auto reports = harness::gradcheck::run_suite(cases, opts);
      std::cout << harness::gradcheck::format_report(reports, opts);
      for (const auto& r : reports)
        if (!r.passed) return 1;
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
