#pragma once

// Uncertainty-aware attention buffer and the knowledge-distillation loss over
// rollout maps.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <utility>
#include <vector>

#include "fedsim/tensor.hpp"
#include "fedsim/vit.hpp"

namespace fedsim::distill {

using vit::RolloutMap;

// For every class present in `candidates`, keeps the min(M, n) maps with the
// lowest uncertainty; ties go to the smaller sample_id. Output is grouped by
// class, ascending, and each map is tagged with `client`.
std::vector<RolloutMap> select_for_sharing(int client, std::vector<RolloutMap> candidates, std::size_t per_class);

// Ablation: per class, a seeded uniform draw of min(M, n) maps without replacement.
std::vector<RolloutMap> random_selection(int client, std::vector<RolloutMap> candidates, std::size_t per_class,
                                         std::uint64_t seed);

// Federation-shared store of at most C x K x M rollout maps. Written only
// between open_publication() and commit(); read-only otherwise.
class AttentionBuffer {
 public:
  AttentionBuffer(std::size_t num_clients, std::size_t num_classes, std::size_t per_class);

  // Starts the publication window for `round`; the buffer must be at version round - 1.
  void open_publication(std::size_t round);
  // Replaces all of `client`'s entries for every class present in `maps`.
  void publish(int client, std::vector<RolloutMap> maps);
  void commit();

  bool publishing() const noexcept { return publishing_; }
  std::size_t version() const noexcept { return version_; }
  std::size_t size() const;
  std::size_t capacity() const noexcept { return num_clients_ * num_classes_ * per_class_; }
  std::size_t per_class() const noexcept { return per_class_; }
  std::size_t num_clients() const noexcept { return num_clients_; }
  std::size_t num_classes() const noexcept { return num_classes_; }

  std::span<const RolloutMap> entries(int client, std::size_t cls) const;
  // Maps of class `cls` from every client except `client`.
  std::vector<const RolloutMap*> foreign(int client, std::size_t cls) const;

 private:
  std::size_t num_clients_, num_classes_, per_class_;
  std::map<std::pair<int, std::size_t>, std::vector<RolloutMap>> entries_;
  std::size_t version_ = 0;
  bool publishing_ = false;
};

// (1/M) * sum over foreign maps of ||map - foreign||^2 for one sample of class `cls`.
double kd_loss(std::span<const double> map, const AttentionBuffer& buffer, int client, std::size_t cls);

// Batch mean of the per-sample KD loss; `maps` is [B, H*W]. Buffer maps are constants.
Tensor kd_loss(Tape& tape, const Tensor& maps, std::span<const std::size_t> labels, const AttentionBuffer& buffer,
               int client);

// L_G = L_eps + lambda * L_KD
double combined_loss(double l_eps, double l_kd, double lambda);
Tensor combined_loss(Tape& tape, const Tensor& l_eps, const Tensor& l_kd, double lambda);

// Writes round<r>_c<c>_k<k>_m<m>.pgm (16-bit) per entry and a manifest listing
// "client class slot uncertainty" per line.
void dump(const AttentionBuffer& buffer, const std::filesystem::path& dir, std::size_t round);

}  // namespace fedsim::distill
