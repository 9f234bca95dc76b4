#pragma once

// Frozen vision transformer with prefix-tuned key/value prompts, a ReLU
// evidence head, and attention-rollout saliency maps.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fedsim/tensor.hpp"

namespace fedsim::vit {

struct ViTConfig {
  std::size_t image_size = 16;
  std::size_t patch_size = 4;
  std::size_t channels = 1;
  std::size_t embed_dim = 32;
  std::size_t num_heads = 2;
  std::size_t num_layers = 4;
  std::size_t mlp_dim = 64;
  std::size_t prompt_len = 8;
  std::size_t split_layer = 1;  // layers [0, split) carry b-prompts
  std::size_t num_classes = 2;

  static ViTConfig desk();
  static ViTConfig paper();

  // Throws ConfigError naming the first invalid field.
  void validate() const;
  std::size_t grid() const { return image_size / patch_size; }
  std::size_t num_patches() const { return grid() * grid(); }
  std::size_t tokens() const { return 1 + num_patches(); }
  std::size_t head_dim() const { return embed_dim / num_heads; }
  std::size_t pixels() const { return image_size * image_size * channels; }
};

struct BlockWeights {
  Tensor ln1_gamma, ln1_beta;
  Tensor qkv_weight, qkv_bias;  // [D, 3D], [3D]
  Tensor out_weight, out_bias;  // [D, D], [D]
  Tensor ln2_gamma, ln2_beta;
  Tensor fc1_weight, fc1_bias;  // [D, mlp], [mlp]
  Tensor fc2_weight, fc2_bias;  // [mlp, D], [D]
};

// All tensors are constants (requires_grad = false). Copies share storage, so
// one backbone can back any number of clients.
class FrozenBackbone {
 public:
  static FrozenBackbone random(const ViTConfig& config, std::uint64_t seed);
  // Reads the weights-file format written by save(); names and shapes must
  // match `config`.
  static FrozenBackbone load(const std::filesystem::path& path, const ViTConfig& config);
  void save(const std::filesystem::path& path) const;
  // Rebuilds a backbone from tensors named and shaped as named_parameters()
  // lists them. Tensors are used as given, so trainable inputs stay trainable.
  static FrozenBackbone from_named(const ViTConfig& config, const std::vector<std::pair<std::string, Tensor>>& params);

  const ViTConfig& config() const { return config_; }
  std::vector<std::pair<std::string, Tensor>> named_parameters() const;

  // Token embeddings [B*T, D] (class token first per sample) for images [B, pixels].
  Tensor embed(const Tensor& images) const;

  const BlockWeights& block(std::size_t i) const { return blocks_.at(i); }
  const Tensor& final_gamma() const { return final_gamma_; }
  const Tensor& final_beta() const { return final_beta_; }

 private:
  explicit FrozenBackbone(ViTConfig config);
  ViTConfig config_;
  Tensor patch_weight_, patch_bias_;  // [patch^2 * C, D], [D]
  Tensor class_token_;                // [D]
  Tensor position_;                   // [T, D]
  std::vector<BlockWeights> blocks_;
  Tensor final_gamma_, final_beta_;
};

// Per-layer key/value prefixes, each [prompt_len, D]. Layers below
// split_layer are b-prompts, the rest t-prompts.
struct PromptSet {
  std::vector<Tensor> keys;
  std::vector<Tensor> values;
  std::size_t split_layer = 0;

  // uniform(-0.03, 0.03) entries.
  static PromptSet init(const ViTConfig& config, std::uint64_t seed);
  PromptSet clone() const;
  std::size_t num_layers() const { return keys.size(); }
  std::size_t prompt_len() const { return keys.empty() ? 0 : keys[0].dim(0); }
};

struct EvidenceHead {
  Tensor weight;  // [D, K]
  Tensor bias;    // [K]

  static EvidenceHead init(const ViTConfig& config, std::uint64_t seed);
  EvidenceHead clone() const;
};

struct ForwardResult {
  Tensor evidence;                 // [B, K], non-negative
  Tensor features;                 // [B, D], normalized class-token output
  std::vector<Tensor> attentions;  // per layer [B, heads, T, T + prompt_len]
};

// `prompts` may be null for the plain backbone. `images` is [B, pixels].
ForwardResult forward(Tape& tape, const FrozenBackbone& backbone, const PromptSet* prompts, const EvidenceHead& head,
                      const Tensor& images);

// Residual-fused rollout over token columns: [B, T, T].
Tensor rollout_matrix(Tape& tape, std::span<const Tensor> attentions, std::size_t prompt_len);

// Differentiable rollout maps [B, image_size^2], class-token row over patches,
// bilinearly upsampled and max-normalized.
Tensor rollout_maps(Tape& tape, std::span<const Tensor> attentions, const ViTConfig& config);

struct RolloutMap {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> grid;
  int client_id = -1;
  int class_id = -1;
  double uncertainty = 1.0;
  std::size_t sample_id = 0;
};

// Rollout of one sample's attentions, each [heads, T, T + prompt_len].
RolloutMap attention_rollout(std::span<const Tensor> attentions, const ViTConfig& config);

struct ParamGroup {
  std::string name;
  std::vector<Tensor> params;
};

struct TrainableGroups {
  ParamGroup b_group;  // b-prompts
  ParamGroup t_group;  // t-prompts and the evidence head
};

TrainableGroups trainable_params(const PromptSet& prompts, const EvidenceHead& head);

std::size_t parameter_count(std::span<const Tensor> params);

}  // namespace fedsim::vit
