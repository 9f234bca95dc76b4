#pragma once

// Experiment configuration: presets, the plain-text `key = value` file format
// with [section] headers, and the resolved form written next to every result.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "fedsim/data.hpp"
#include "fedsim/federation.hpp"
#include "fedsim/vit.hpp"

namespace fedsim::harness {

enum class DataSource { Synthetic, External };
enum class BackboneInit { Random, Pretext, File };

struct ExperimentConfig {
  std::string preset = "desk";
  std::vector<std::string> strategies{"fedevprompt"};
  std::vector<std::uint64_t> seeds{1};
  std::filesystem::path out = "results";
  bool dump_buffers = true;

  vit::ViTConfig model = vit::ViTConfig::desk();
  federation::Hyperparameters training;

  DataSource source = DataSource::Synthetic;
  std::filesystem::path data_path;
  data::SkewSpec skew = data::SkewSpec::desk_default();
  double train_fraction = 0.75;

  BackboneInit backbone = BackboneInit::Pretext;
  std::filesystem::path backbone_path;
  std::uint64_t backbone_seed = 0;
  std::size_t pretext_steps = 600;

  // Throws ConfigError naming the offending `section.key`.
  void validate() const;
};

// "desk" or "paper"; anything else is a ConfigError on experiment.preset.
ExperimentConfig preset(std::string_view name);

using IniValues = std::map<std::string, std::string>;  // "section.key" -> raw value

// Errors carry the source name and line number.
IniValues parse_ini(std::string_view text, std::string_view source = "<config>");
IniValues read_ini(const std::filesystem::path& path);

// Applies every key in `values` on top of `config`; unknown keys are errors.
void apply(ExperimentConfig& config, const IniValues& values);

// Round-trips through parse_ini + apply. Worker thread count is a runtime
// setting and is left out.
std::string to_ini(const ExperimentConfig& config);

std::string_view name(DataSource source);
std::string_view name(BackboneInit init);

// FEDSIM_THREADS when set to a positive integer, else the hardware concurrency (at least 1).
std::size_t thread_cap();

// Keeps freed tensor storage in the heap instead of returning it to the OS. No-op off glibc.
void tune_allocator();

}  // namespace fedsim::harness
