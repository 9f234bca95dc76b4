#include "fedsim/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <numbers>
#include <numeric>
#include <random>
#include <regex>
#include <sstream>

#include <fmt/format.h>

#include "fedsim/errors.hpp"
#include "fedsim/image.hpp"

namespace fedsim::data {
namespace {

std::uint64_t mix(std::uint64_t seed, std::uint64_t stream) {
  // splitmix64 finalizer over a combined word
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

struct ClassPattern {
  double cy, cx;     // blob center in pixels
  double frequency;  // texture cycles across the image
};

std::vector<ClassPattern> class_patterns(std::size_t num_classes, std::size_t size) {
  std::vector<ClassPattern> p;
  const double s = static_cast<double>(size);
  for (std::size_t k = 0; k < num_classes; ++k) {
    const double angle = 2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(num_classes) + std::numbers::pi / 4.0;
    p.push_back({0.5 * s - 0.5 + 0.22 * s * std::sin(angle), 0.5 * s - 0.5 + 0.22 * s * std::cos(angle),
                 1.0 + static_cast<double>(k)});
  }
  return p;
}

std::vector<double> render(const ClassPattern& pattern, std::size_t size, double noise_sd, double offset,
                           std::mt19937_64& rng) {
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> phase_dist(0.0, 2.0 * std::numbers::pi);
  const double s = static_cast<double>(size);
  const double jitter = 0.08 * s;
  const double cy = pattern.cy + jitter * gauss(rng);
  const double cx = pattern.cx + jitter * gauss(rng);
  const double radius = 0.16 * s;
  const double phase = phase_dist(rng);
  const double amplitude = 0.35 + 0.1 * gauss(rng);
  std::vector<double> img(size * size);
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) {
      const double dy = static_cast<double>(y) - cy, dx = static_cast<double>(x) - cx;
      const double blob = std::exp(-(dy * dy + dx * dx) / (2.0 * radius * radius));
      const double texture = 0.75 + 0.25 * std::sin(2.0 * std::numbers::pi * pattern.frequency *
                                                         (static_cast<double>(x) + static_cast<double>(y)) / s + phase);
      const double v = 0.35 + offset + amplitude * blob * texture + noise_sd * gauss(rng);
      img[y * size + x] = std::clamp(v, 0.0, 1.0);
    }
  return img;
}

}  // namespace

SkewSpec SkewSpec::desk_default() {
  SkewSpec s;
  s.client_sizes = {3000, 600, 900, 600, 450, 450};
  s.proportions = {{0.65, 0.35}, {0.2, 0.8}, {0.8, 0.2}, {0.35, 0.65}, {0.5, 0.5}, {0.7, 0.3}};
  s.separability = 1.0;
  return s;
}

void SkewSpec::validate() const {
  if (client_sizes.empty()) throw ConfigError("client_sizes", "need at least one client");
  if (proportions.size() != client_sizes.size())
    throw ConfigError("proportions", fmt::format("{} proportion rows for {} clients", proportions.size(), client_sizes.size()));
  const std::size_t K = proportions.front().size();
  if (K < 2) throw ConfigError("proportions", "need at least two classes");
  for (std::size_t c = 0; c < proportions.size(); ++c) {
    if (proportions[c].size() != K) throw ConfigError("proportions", fmt::format("client {} lists {} classes, expected {}", c, proportions[c].size(), K));
    double sum = 0.0;
    for (double p : proportions[c]) {
      if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("proportions", fmt::format("client {} has infeasible proportion {}", c, p));
      sum += p;
    }
    if (std::abs(sum - 1.0) > 1e-9) throw ConfigError("proportions", fmt::format("client {} proportions sum to {}", c, sum));
    if (client_sizes[c] == 0) throw ConfigError("client_sizes", fmt::format("client {} has no samples", c));
  }
  if (!(separability > 0.0)) throw ConfigError("separability", "must be positive");
}

std::vector<std::size_t> apportion(std::size_t n, std::span<const double> proportions) {
  std::vector<std::size_t> counts(proportions.size());
  std::vector<std::pair<double, std::size_t>> remainders;
  std::size_t assigned = 0;
  for (std::size_t k = 0; k < proportions.size(); ++k) {
    const double exact = static_cast<double>(n) * proportions[k];
    counts[k] = static_cast<std::size_t>(std::floor(exact));
    assigned += counts[k];
    remainders.emplace_back(exact - std::floor(exact), k);
  }
  std::stable_sort(remainders.begin(), remainders.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t i = 0; assigned < n && i < remainders.size(); ++i, ++assigned) ++counts[remainders[i].second];
  return counts;
}

FederationDataset generate_synthetic(const SkewSpec& spec, std::size_t image_size, std::uint64_t seed) {
  spec.validate();
  FederationDataset ds;
  ds.image_size = image_size;
  ds.channels = 1;
  ds.num_classes = spec.num_classes();
  const auto patterns = class_patterns(ds.num_classes, image_size);
  const double noise_sd = 0.25 / spec.separability;
  for (std::size_t c = 0; c < spec.num_clients(); ++c) {
    std::mt19937_64 rng(mix(seed, c));
    // site-level acquisition shift
    std::uniform_real_distribution<double> site(-0.05, 0.05);
    const double offset = site(rng);
    const auto counts = apportion(spec.client_sizes[c], spec.proportions[c]);
    std::vector<std::size_t> labels;
    for (std::size_t k = 0; k < counts.size(); ++k) labels.insert(labels.end(), counts[k], k);
    std::shuffle(labels.begin(), labels.end(), rng);
    std::vector<Sample> samples;
    samples.reserve(labels.size());
    for (std::size_t i = 0; i < labels.size(); ++i)
      samples.push_back({render(patterns[labels[i]], image_size, noise_sd, offset, rng), labels[i], i});
    ds.clients.push_back(std::move(samples));
  }
  return ds;
}

std::vector<Sample> generate_pretext(std::size_t n, std::size_t image_size, std::size_t sectors, std::uint64_t seed) {
  if (sectors < 2) throw UsageError("pretext task needs at least two sectors");
  std::mt19937_64 rng(mix(seed, 0x70726574ULL));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double s = static_cast<double>(image_size);
  std::vector<Sample> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double angle = 2.0 * std::numbers::pi * unit(rng);
    const double dist = (0.1 + 0.2 * unit(rng)) * s;
    const ClassPattern p{0.5 * s - 0.5 + dist * std::sin(angle), 0.5 * s - 0.5 + dist * std::cos(angle), 0.5 + 3.5 * unit(rng)};
    const double offset = 0.1 * unit(rng) - 0.05;
    auto label = static_cast<std::size_t>(angle / (2.0 * std::numbers::pi) * static_cast<double>(sectors));
    out.push_back({render(p, image_size, 0.2, offset, rng), std::min(label, sectors - 1), i});
  }
  return out;
}

Split split(const std::vector<Sample>& samples, double train_fraction, std::uint64_t seed) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw UsageError("train fraction must lie in (0, 1)");
  std::map<std::size_t, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < samples.size(); ++i) by_class[samples[i].label].push_back(i);

  // Test quota per class by largest remainder, so the overall test share
  // rounds like the total while each class stays within one sample.
  const double test_fraction = 1.0 - train_fraction;
  std::vector<std::size_t> classes;
  std::vector<double> exact;
  for (const auto& [k, idx] : by_class) {
    classes.push_back(k);
    exact.push_back(idx.size() >= 2 ? test_fraction * static_cast<double>(idx.size()) : 0.0);
  }
  const auto target = static_cast<std::size_t>(std::llround(std::accumulate(exact.begin(), exact.end(), 0.0)));
  std::vector<std::size_t> quota(exact.size());
  std::vector<std::pair<double, std::size_t>> rem;
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < exact.size(); ++i) {
    quota[i] = static_cast<std::size_t>(std::floor(exact[i]));
    assigned += quota[i];
    rem.emplace_back(exact[i] - std::floor(exact[i]), i);
  }
  std::stable_sort(rem.begin(), rem.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t i = 0; assigned < target && i < rem.size(); ++i) {
    if (rem[i].first <= 0.0) continue;
    ++quota[rem[i].second];
    ++assigned;
  }

  std::mt19937_64 rng(seed);
  std::vector<bool> is_test(samples.size(), false);
  for (std::size_t ci = 0; ci < classes.size(); ++ci) {
    auto idx = by_class[classes[ci]];
    std::shuffle(idx.begin(), idx.end(), rng);
    for (std::size_t j = 0; j < quota[ci]; ++j) is_test[idx[j]] = true;
  }
  Split out;
  for (std::size_t i = 0; i < samples.size(); ++i) (is_test[i] ? out.test : out.train).push_back(samples[i]);
  return out;
}

std::vector<std::size_t> class_counts(std::span<const Sample> samples, std::size_t num_classes) {
  std::vector<std::size_t> counts(num_classes, 0);
  for (const auto& s : samples) {
    if (s.label >= num_classes) throw UsageError(fmt::format("label {} outside 0..{}", s.label, num_classes - 1));
    ++counts[s.label];
  }
  return counts;
}

namespace {

std::vector<double> read_bin(const std::filesystem::path& path, std::size_t channels, std::size_t image_size) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  std::string header;
  if (!std::getline(is, header)) throw std::runtime_error(path.string() + ": missing header line");
  std::istringstream hs(header);
  long long w = 0, h = 0, c = 0;
  std::string extra;
  if (!(hs >> w >> h >> c) || (hs >> extra) || w <= 0 || h <= 0 || c <= 0)
    throw std::runtime_error(path.string() + ": malformed header '" + header + "', expected 'width height channels'");
  if (static_cast<std::size_t>(c) != channels)
    throw std::runtime_error(fmt::format("{}: {} channels, configured {}", path.string(), c, channels));
  const std::size_t n = static_cast<std::size_t>(w * h * c);
  std::vector<double> px(n);
  for (std::size_t i = 0; i < n; ++i) {
    unsigned char bytes[8];
    if (!is.read(reinterpret_cast<char*>(bytes), 8))
      throw std::runtime_error(fmt::format("{}: truncated, expected {} pixel values", path.string(), n));
    std::uint64_t bits = 0;
    for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(bytes[b]) << (8 * b);
    std::memcpy(&px[i], &bits, sizeof(double));
    if (!(px[i] >= 0.0 && px[i] <= 1.0))
      throw std::runtime_error(fmt::format("{}: pixel {} has value {} outside [0, 1]", path.string(), i, px[i]));
  }
  return image::resize_bilinear(px, static_cast<std::size_t>(h), static_cast<std::size_t>(w), channels, image_size, image_size);
}

std::size_t parse_index(const std::string& name, const std::string& prefix) {
  const std::regex re(prefix + "([0-9]+)");
  std::smatch m;
  if (!std::regex_match(name, m, re)) return static_cast<std::size_t>(-1);
  return static_cast<std::size_t>(std::stoull(m[1].str()));
}

}  // namespace

FederationDataset load_external(const std::filesystem::path& root, std::size_t image_size, std::size_t channels,
                                std::size_t num_classes) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(root)) throw std::runtime_error("data path is not a directory: " + root.string());
  std::map<std::size_t, fs::path> client_dirs;
  for (const auto& entry : fs::directory_iterator(root)) {
    if (!entry.is_directory()) continue;
    const std::size_t idx = parse_index(entry.path().filename().string(), "client");
    if (idx != static_cast<std::size_t>(-1)) client_dirs[idx] = entry.path();
  }
  if (client_dirs.empty()) throw std::runtime_error("no client<i> directories under " + root.string());

  FederationDataset ds;
  ds.image_size = image_size;
  ds.channels = channels;
  ds.num_classes = num_classes;
  for (const auto& [ci, cdir] : client_dirs) {
    std::vector<std::pair<std::size_t, fs::path>> files;
    for (const auto& entry : fs::directory_iterator(cdir)) {
      if (!entry.is_directory()) continue;
      const std::string name = entry.path().filename().string();
      const std::size_t k = parse_index(name, "class");
      if (k == static_cast<std::size_t>(-1) || k >= num_classes)
        throw std::runtime_error(fmt::format("{}: unknown class directory '{}' (expected class0..class{})", cdir.string(), name,
                                             num_classes - 1));
      for (const auto& f : fs::directory_iterator(entry.path()))
        if (f.is_regular_file() && f.path().extension() == ".bin") files.emplace_back(k, f.path());
    }
    if (files.empty()) throw std::runtime_error(fmt::format("client '{}' has no samples ({})", cdir.filename().string(), cdir.string()));
    std::sort(files.begin(), files.end());
    std::vector<Sample> samples;
    for (std::size_t i = 0; i < files.size(); ++i)
      samples.push_back({read_bin(files[i].second, channels, image_size), files[i].first, i});
    ds.clients.push_back(std::move(samples));
  }
  return ds;
}

void write_bin(const std::filesystem::path& path, std::span<const double> pixels, std::size_t width, std::size_t height,
               std::size_t channels) {
  if (pixels.size() != width * height * channels) throw DimensionError("write_bin: pixel count does not match geometry");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << width << ' ' << height << ' ' << channels << '\n';
  for (double v : pixels) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, sizeof bits);
    char bytes[8];
    for (int b = 0; b < 8; ++b) bytes[b] = static_cast<char>((bits >> (8 * b)) & 0xffu);
    os.write(bytes, 8);
  }
}

void write_federation(const FederationDataset& dataset, const std::filesystem::path& root) {
  for (std::size_t c = 0; c < dataset.clients.size(); ++c)
    for (const Sample& s : dataset.clients[c]) {
      const auto dir = root / fmt::format("client{}", c) / fmt::format("class{}", s.label);
      std::filesystem::create_directories(dir);
      write_bin(dir / fmt::format("{:06}.bin", s.id), s.pixels, dataset.image_size, dataset.image_size, dataset.channels);
    }
}

}  // namespace fedsim::data
