#include "fedsim/distill.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include <fmt/format.h>

#include "fedsim/errors.hpp"

namespace fedsim::distill {
namespace {

std::map<std::size_t, std::vector<RolloutMap>> by_class(std::vector<RolloutMap> candidates) {
  std::map<std::size_t, std::vector<RolloutMap>> groups;
  for (auto& m : candidates) {
    if (m.class_id < 0) throw UsageError("rollout map without a class label");
    groups[static_cast<std::size_t>(m.class_id)].push_back(std::move(m));
  }
  return groups;
}

}  // namespace

std::vector<RolloutMap> select_for_sharing(int client, std::vector<RolloutMap> candidates, std::size_t per_class) {
  std::vector<RolloutMap> out;
  for (auto& [cls, maps] : by_class(std::move(candidates))) {
    std::sort(maps.begin(), maps.end(), [](const RolloutMap& a, const RolloutMap& b) {
      return a.uncertainty != b.uncertainty ? a.uncertainty < b.uncertainty : a.sample_id < b.sample_id;
    });
    maps.resize(std::min(per_class, maps.size()));
    for (auto& m : maps) {
      m.client_id = client;
      out.push_back(std::move(m));
    }
  }
  return out;
}

std::vector<RolloutMap> random_selection(int client, std::vector<RolloutMap> candidates, std::size_t per_class,
                                         std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<RolloutMap> out;
  for (auto& [cls, maps] : by_class(std::move(candidates))) {
    std::sort(maps.begin(), maps.end(), [](const RolloutMap& a, const RolloutMap& b) { return a.sample_id < b.sample_id; });
    const std::size_t take = std::min(per_class, maps.size());
    // partial Fisher-Yates
    for (std::size_t i = 0; i < take; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, maps.size() - 1);
      std::swap(maps[i], maps[pick(rng)]);
    }
    maps.resize(take);
    for (auto& m : maps) {
      m.client_id = client;
      out.push_back(std::move(m));
    }
  }
  return out;
}

AttentionBuffer::AttentionBuffer(std::size_t num_clients, std::size_t num_classes, std::size_t per_class)
    : num_clients_(num_clients), num_classes_(num_classes), per_class_(per_class) {
  if (per_class == 0) throw UsageError("buffer needs at least one map per class");
}

void AttentionBuffer::open_publication(std::size_t round) {
  if (publishing_) throw ProtocolError("publication window already open");
  if (round != version_ + 1)
    throw ProtocolError(fmt::format("publication for round {} but buffer is at version {}", round, version_));
  publishing_ = true;
}

void AttentionBuffer::publish(int client, std::vector<RolloutMap> maps) {
  if (!publishing_) throw ProtocolError("publish outside the round barrier");
  if (client < 0 || static_cast<std::size_t>(client) >= num_clients_) throw UsageError(fmt::format("unknown client {}", client));
  std::map<std::size_t, std::vector<RolloutMap>> grouped;
  for (auto& m : maps) {
    if (m.class_id < 0 || static_cast<std::size_t>(m.class_id) >= num_classes_)
      throw UsageError(fmt::format("map with class {} outside 0..{}", m.class_id, num_classes_ - 1));
    m.client_id = client;
    grouped[static_cast<std::size_t>(m.class_id)].push_back(std::move(m));
  }
  for (auto& [cls, group] : grouped) {
    if (group.size() > per_class_)
      throw UsageError(fmt::format("client {} published {} maps for class {}, limit {}", client, group.size(), cls, per_class_));
    entries_[{client, cls}] = std::move(group);
  }
}

void AttentionBuffer::commit() {
  if (!publishing_) throw ProtocolError("commit without an open publication window");
  publishing_ = false;
  ++version_;
}

std::size_t AttentionBuffer::size() const {
  std::size_t n = 0;
  for (const auto& [key, maps] : entries_) n += maps.size();
  return n;
}

std::span<const RolloutMap> AttentionBuffer::entries(int client, std::size_t cls) const {
  const auto it = entries_.find({client, cls});
  if (it == entries_.end()) return {};
  return it->second;
}

std::vector<const RolloutMap*> AttentionBuffer::foreign(int client, std::size_t cls) const {
  std::vector<const RolloutMap*> out;
  for (const auto& [key, maps] : entries_) {
    if (key.first == client || key.second != cls) continue;
    for (const auto& m : maps) out.push_back(&m);
  }
  return out;
}

double kd_loss(std::span<const double> map, const AttentionBuffer& buffer, int client, std::size_t cls) {
  double total = 0.0;
  for (const RolloutMap* other : buffer.foreign(client, cls)) {
    if (other->grid.size() != map.size())
      throw DimensionError(fmt::format("kd_loss: map has {} entries, buffer map {}", map.size(), other->grid.size()));
    for (std::size_t i = 0; i < map.size(); ++i) total += (map[i] - other->grid[i]) * (map[i] - other->grid[i]);
  }
  return total / static_cast<double>(buffer.per_class());
}

Tensor kd_loss(Tape& tape, const Tensor& maps, std::span<const std::size_t> labels, const AttentionBuffer& buffer,
               int client) {
  if (maps.rank() != 2 || maps.dim(0) != labels.size())
    throw DimensionError("kd_loss: maps " + to_string(maps.shape()) + " vs " + std::to_string(labels.size()) + " labels");
  const std::size_t B = maps.dim(0), P = maps.dim(1);
  const auto mv = maps.data();
  const double inv_m = 1.0 / static_cast<double>(buffer.per_class());
  const double inv_b = 1.0 / static_cast<double>(B);
  // d/d(map) = (2/M) * (n_foreign * map - sum of foreign maps)
  auto grad = std::make_shared<std::vector<double>>(B * P, 0.0);
  double total = 0.0;
  std::map<std::size_t, std::pair<std::vector<const RolloutMap*>, std::vector<double>>> cache;
  for (std::size_t b = 0; b < B; ++b) {
    auto [it, fresh] = cache.try_emplace(labels[b]);
    auto& [others, others_sum] = it->second;
    if (fresh) {
      others = buffer.foreign(client, labels[b]);
      others_sum.assign(P, 0.0);
      for (const RolloutMap* o : others) {
        if (o->grid.size() != P) throw DimensionError("kd_loss: buffer map size differs from model map size");
        for (std::size_t i = 0; i < P; ++i) others_sum[i] += o->grid[i];
      }
    }
    const double* a = mv.data() + b * P;
    double s = 0.0;
    for (const RolloutMap* o : others)
      for (std::size_t i = 0; i < P; ++i) s += (a[i] - o->grid[i]) * (a[i] - o->grid[i]);
    total += s * inv_m;
    const double n = static_cast<double>(others.size());
    for (std::size_t i = 0; i < P; ++i) (*grad)[b * P + i] = 2.0 * inv_m * (n * a[i] - others_sum[i]);
  }
  return tape.record({}, {total * inv_b}, {maps}, [m = Tensor(maps), grad, inv_b](std::span<const double> g) mutable {
    auto gm = m.grad_buffer();
    for (std::size_t i = 0; i < gm.size(); ++i) gm[i] += g[0] * inv_b * (*grad)[i];
  });
}

double combined_loss(double l_eps, double l_kd, double lambda) {
  if (lambda < 0.0) throw UsageError("KD weight must be non-negative");
  return l_eps + lambda * l_kd;
}

Tensor combined_loss(Tape& tape, const Tensor& l_eps, const Tensor& l_kd, double lambda) {
  if (lambda < 0.0) throw UsageError("KD weight must be non-negative");
  return ops::add(tape, l_eps, ops::scale(tape, l_kd, lambda));
}

void dump(const AttentionBuffer& buffer, const std::filesystem::path& dir, std::size_t round) {
  std::filesystem::create_directories(dir);
  std::ofstream manifest(dir / fmt::format("round{}_manifest.txt", round));
  manifest << "# client class slot uncertainty\n";
  for (std::size_t c = 0; c < buffer.num_clients(); ++c)
    for (std::size_t k = 0; k < buffer.num_classes(); ++k) {
      const auto maps = buffer.entries(static_cast<int>(c), k);
      for (std::size_t m = 0; m < maps.size(); ++m) {
        const RolloutMap& map = maps[m];
        std::ofstream os(dir / fmt::format("round{}_c{}_k{}_m{}.pgm", round, c, k, m), std::ios::binary);
        os << "P5\n" << map.width << ' ' << map.height << "\n65535\n";
        for (double v : map.grid) {
          const auto q = static_cast<unsigned>(std::lround(std::clamp(v, 0.0, 1.0) * 65535.0));
          const char be[2] = {static_cast<char>(q >> 8), static_cast<char>(q & 0xffu)};
          os.write(be, 2);
        }
        manifest << fmt::format("{} {} {} {:.17g}\n", c, k, m, map.uncertainty);
      }
    }
}

}  // namespace fedsim::distill
