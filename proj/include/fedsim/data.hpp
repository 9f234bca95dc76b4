#pragma once

// Synthetic heterogeneous federations, stratified splits, and the on-disk
// `.bin` sample format for user-provided data.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace fedsim::data {

struct Sample {
  std::vector<double> pixels;  // [size * size * channels], values in [0, 1]
  std::size_t label = 0;
  std::size_t id = 0;          // unique within its client
};

struct FederationDataset {
  std::size_t image_size = 0;
  std::size_t channels = 1;
  std::size_t num_classes = 2;
  std::vector<std::vector<Sample>> clients;
};

struct SkewSpec {
  std::vector<std::size_t> client_sizes;
  std::vector<std::vector<double>> proportions;  // per client, per class
  double separability = 1.0;

  // Six clients, binary, sizes and class ratios shaped like a multi-site
  // dermoscopy federation (one large site, several small ones, skew in both directions).
  static SkewSpec desk_default();
  std::size_t num_clients() const { return client_sizes.size(); }
  std::size_t num_classes() const { return proportions.empty() ? 0 : proportions.front().size(); }
  // Throws ConfigError for ragged or infeasible proportions.
  void validate() const;
};

// Per-class sample counts for n samples: largest-remainder rounding of n * p.
std::vector<std::size_t> apportion(std::size_t n, std::span<const double> proportions);

FederationDataset generate_synthetic(const SkewSpec& spec, std::size_t image_size, std::uint64_t seed);

// Pretext images for backbone warm-up: one textured blob at a uniformly random
// angle around the center, labelled with its angular sector.
std::vector<Sample> generate_pretext(std::size_t n, std::size_t image_size, std::size_t sectors, std::uint64_t seed);

struct Split {
  std::vector<Sample> train;
  std::vector<Sample> test;
};

// Stratified per class; a class with a single sample stays in train.
Split split(const std::vector<Sample>& samples, double train_fraction, std::uint64_t seed);

std::vector<std::size_t> class_counts(std::span<const Sample> samples, std::size_t num_classes);

// Reads `root/client<i>/class<k>/*.bin`, resizing to image_size when needed.
FederationDataset load_external(const std::filesystem::path& root, std::size_t image_size, std::size_t channels,
                                std::size_t num_classes);

// Header "width height channels\n" followed by little-endian doubles.
void write_bin(const std::filesystem::path& path, std::span<const double> pixels, std::size_t width, std::size_t height,
               std::size_t channels);

void write_federation(const FederationDataset& dataset, const std::filesystem::path& root);

}  // namespace fedsim::data
