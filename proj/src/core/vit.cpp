#include "fedsim/vit.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <sstream>

#include "fedsim/errors.hpp"
#include "fedsim/image.hpp"

namespace fedsim::vit {
namespace {

Tensor normal(Shape shape, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> v(numel(shape));
  for (double& x : v) x = dist(rng);
  return Tensor::from_data(std::move(shape), std::move(v));
}

Tensor uniform(Shape shape, double bound, std::mt19937_64& rng, bool requires_grad) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<double> v(numel(shape));
  for (double& x : v) x = dist(rng);
  return Tensor::from_data(std::move(shape), std::move(v), requires_grad);
}

Tensor clone_tensor(const Tensor& t) {
  const auto v = t.data();
  return Tensor::from_data(t.shape(), {v.begin(), v.end()}, t.requires_grad());
}

Tensor identity_half(std::size_t n) {
  std::vector<double> v(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) v[i * n + i] = 0.5;
  return Tensor::from_data({n, n}, std::move(v));
}

}  // namespace

ViTConfig ViTConfig::desk() { return ViTConfig{}; }

ViTConfig ViTConfig::paper() {
  ViTConfig c;
  c.image_size = 224;
  c.patch_size = 16;
  c.channels = 3;
  c.embed_dim = 384;
  c.num_heads = 6;
  c.num_layers = 12;
  c.mlp_dim = 1536;
  c.prompt_len = 50;
  c.split_layer = 3;
  c.num_classes = 2;
  return c;
}

void ViTConfig::validate() const {
  if (image_size == 0) throw ConfigError("image_size", "must be positive");
  if (patch_size == 0 || image_size % patch_size != 0) throw ConfigError("patch_size", "must divide image_size");
  if (channels == 0) throw ConfigError("channels", "must be positive");
  if (num_heads == 0 || embed_dim == 0 || embed_dim % num_heads != 0)
    throw ConfigError("num_heads", "embed_dim must be a positive multiple of num_heads");
  if (num_layers < 2) throw ConfigError("num_layers", "need at least two attention layers");
  if (split_layer < 1 || split_layer >= num_layers) throw ConfigError("split_layer", "must satisfy 1 <= l < num_layers");
  if (mlp_dim == 0) throw ConfigError("mlp_dim", "must be positive");
  if (num_classes < 2) throw ConfigError("num_classes", "need at least two classes");
}

FrozenBackbone::FrozenBackbone(ViTConfig config) : config_(config) { config_.validate(); }

FrozenBackbone FrozenBackbone::random(const ViTConfig& config, std::uint64_t seed) {
  FrozenBackbone b(config);
  std::mt19937_64 rng(seed);
  const std::size_t D = config.embed_dim, P = config.patch_size * config.patch_size * config.channels;
  const auto inv_sqrt = [](std::size_t n) { return 1.0 / std::sqrt(static_cast<double>(n)); };
  b.patch_weight_ = normal({P, D}, inv_sqrt(P), rng);
  b.patch_bias_ = Tensor::zeros({D});
  b.class_token_ = normal({D}, 1.0, rng);
  b.position_ = normal({config.tokens(), D}, 1.0, rng);
  for (std::size_t i = 0; i < config.num_layers; ++i) {
    BlockWeights w;
    w.ln1_gamma = Tensor::full({D}, 1.0);
    w.ln1_beta = Tensor::zeros({D});
    w.qkv_weight = normal({D, 3 * D}, inv_sqrt(D), rng);
    w.qkv_bias = Tensor::zeros({3 * D});
    w.out_weight = normal({D, D}, inv_sqrt(D), rng);
    w.out_bias = Tensor::zeros({D});
    w.ln2_gamma = Tensor::full({D}, 1.0);
    w.ln2_beta = Tensor::zeros({D});
    w.fc1_weight = normal({D, config.mlp_dim}, inv_sqrt(D), rng);
    w.fc1_bias = Tensor::zeros({config.mlp_dim});
    w.fc2_weight = normal({config.mlp_dim, D}, inv_sqrt(config.mlp_dim), rng);
    w.fc2_bias = Tensor::zeros({D});
    b.blocks_.push_back(std::move(w));
  }
  b.final_gamma_ = Tensor::full({D}, 1.0);
  b.final_beta_ = Tensor::zeros({D});
  return b;
}

std::vector<std::pair<std::string, Tensor>> FrozenBackbone::named_parameters() const {
  std::vector<std::pair<std::string, Tensor>> out{
      {"patch_embed.weight", patch_weight_}, {"patch_embed.bias", patch_bias_}, {"cls_token", class_token_}, {"pos_embed", position_}};
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    const auto& w = blocks_[i];
    const std::string p = "blocks." + std::to_string(i) + ".";
    out.insert(out.end(), {{p + "norm1.weight", w.ln1_gamma}, {p + "norm1.bias", w.ln1_beta},
                           {p + "attn.qkv.weight", w.qkv_weight}, {p + "attn.qkv.bias", w.qkv_bias},
                           {p + "attn.proj.weight", w.out_weight}, {p + "attn.proj.bias", w.out_bias},
                           {p + "norm2.weight", w.ln2_gamma}, {p + "norm2.bias", w.ln2_beta},
                           {p + "mlp.fc1.weight", w.fc1_weight}, {p + "mlp.fc1.bias", w.fc1_bias},
                           {p + "mlp.fc2.weight", w.fc2_weight}, {p + "mlp.fc2.bias", w.fc2_bias}});
  }
  out.emplace_back("norm.weight", final_gamma_);
  out.emplace_back("norm.bias", final_beta_);
  return out;
}

void FrozenBackbone::save(const std::filesystem::path& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write backbone weights: " + path.string());
  const auto params = named_parameters();
  for (const auto& [name, t] : params) {
    os << name;
    for (std::size_t d : t.shape()) os << ' ' << d;
    os << '\n';
  }
  os << '\n';
  for (const auto& [name, t] : params) {
    for (double v : t.data()) {
      std::uint64_t bits;
      std::memcpy(&bits, &v, sizeof bits);
      char bytes[8];
      for (int i = 0; i < 8; ++i) bytes[i] = static_cast<char>((bits >> (8 * i)) & 0xffu);
      os.write(bytes, 8);
    }
  }
}

FrozenBackbone FrozenBackbone::from_named(const ViTConfig& config, const std::vector<std::pair<std::string, Tensor>>& params) {
  FrozenBackbone b = random(config, 0);
  const auto expected = b.named_parameters();
  if (params.size() != expected.size())
    throw DimensionError("backbone expects " + std::to_string(expected.size()) + " tensors, got " + std::to_string(params.size()));
  std::vector<Tensor> t;
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].first != expected[i].first || params[i].second.shape() != expected[i].second.shape())
      throw DimensionError("backbone tensor " + std::to_string(i + 1) + " is '" + params[i].first + " " +
                           to_string(params[i].second.shape()) + "', expected '" + expected[i].first + " " +
                           to_string(expected[i].second.shape()) + "'");
    t.push_back(params[i].second);
  }
  std::size_t i = 0;
  b.patch_weight_ = t[i++];
  b.patch_bias_ = t[i++];
  b.class_token_ = t[i++];
  b.position_ = t[i++];
  for (auto& w : b.blocks_)
    for (Tensor* f : {&w.ln1_gamma, &w.ln1_beta, &w.qkv_weight, &w.qkv_bias, &w.out_weight, &w.out_bias, &w.ln2_gamma,
                      &w.ln2_beta, &w.fc1_weight, &w.fc1_bias, &w.fc2_weight, &w.fc2_bias})
      *f = t[i++];
  b.final_gamma_ = t[i++];
  b.final_beta_ = t[i++];
  return b;
}

FrozenBackbone FrozenBackbone::load(const std::filesystem::path& path, const ViTConfig& config) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open backbone weights: " + path.string());
  auto params = random(config, 0).named_parameters();
  std::vector<std::pair<std::string, Shape>> header;
  std::string line;
  while (std::getline(is, line) && !line.empty()) {
    std::istringstream ls(line);
    std::string name;
    ls >> name;
    Shape shape;
    for (std::size_t d; ls >> d;) shape.push_back(d);
    header.emplace_back(name, shape);
  }
  if (header.size() != params.size())
    throw std::runtime_error(path.string() + ": expected " + std::to_string(params.size()) + " tensors, header lists " +
                             std::to_string(header.size()));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& [name, t] = params[i];
    if (header[i].first != name || header[i].second != t.shape())
      throw std::runtime_error(path.string() + ": header entry " + std::to_string(i + 1) + " is '" + header[i].first + " " +
                               to_string(header[i].second) + "', expected '" + name + " " + to_string(t.shape()) + "'");
    for (double& v : t.mutable_data()) {
      unsigned char bytes[8];
      if (!is.read(reinterpret_cast<char*>(bytes), 8)) throw std::runtime_error(path.string() + ": truncated at tensor " + name);
      std::uint64_t bits = 0;
      for (int k = 0; k < 8; ++k) bits |= static_cast<std::uint64_t>(bytes[k]) << (8 * k);
      std::memcpy(&v, &bits, sizeof v);
      if (!std::isfinite(v)) throw std::runtime_error(path.string() + ": non-finite weight in " + name);
    }
  }
  return from_named(config, params);
}

Tensor FrozenBackbone::embed(const Tensor& images) const {
  const std::size_t S = config_.image_size, p = config_.patch_size, C = config_.channels, g = config_.grid();
  const std::size_t D = config_.embed_dim, T = config_.tokens(), pl = p * p * C;
  if (images.rank() != 2 || images.dim(1) != config_.pixels())
    throw DimensionError("embed: images " + to_string(images.shape()) + " do not match " + std::to_string(config_.pixels()) + " pixels");
  const std::size_t B = images.dim(0);
  const auto px = images.data();
  std::vector<double> patches(B * g * g * pl);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t py = 0; py < g; ++py)
      for (std::size_t pxi = 0; pxi < g; ++pxi) {
        double* dst = patches.data() + ((b * g + py) * g + pxi) * pl;
        for (std::size_t dy = 0; dy < p; ++dy)
          for (std::size_t dx = 0; dx < p; ++dx)
            for (std::size_t c = 0; c < C; ++c)
              *dst++ = px[b * config_.pixels() + ((py * p + dy) * S + pxi * p + dx) * C + c];
      }
  Tape scratch;
  const Tensor emb = ops::linear(scratch, Tensor::from_data({B * g * g, pl}, std::move(patches)), patch_weight_, patch_bias_);
  const auto ev = emb.data();
  const auto cls = class_token_.data();
  const auto pos = position_.data();
  std::vector<double> tokens(B * T * D);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t d = 0; d < D; ++d)
        tokens[(b * T + t) * D + d] = (t == 0 ? cls[d] : ev[(b * g * g + t - 1) * D + d]) + pos[t * D + d];
  return Tensor::from_data({B * T, D}, std::move(tokens));
}

PromptSet PromptSet::init(const ViTConfig& config, std::uint64_t seed) {
  PromptSet s;
  s.split_layer = config.split_layer;
  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i < config.num_layers; ++i) {
    s.keys.push_back(uniform({config.prompt_len, config.embed_dim}, 0.03, rng, true));
    s.values.push_back(uniform({config.prompt_len, config.embed_dim}, 0.03, rng, true));
  }
  return s;
}

PromptSet PromptSet::clone() const {
  PromptSet s;
  s.split_layer = split_layer;
  for (const auto& k : keys) s.keys.push_back(clone_tensor(k));
  for (const auto& v : values) s.values.push_back(clone_tensor(v));
  return s;
}

EvidenceHead EvidenceHead::init(const ViTConfig& config, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const double bound = 1.0 / std::sqrt(static_cast<double>(config.embed_dim));
  return {uniform({config.embed_dim, config.num_classes}, bound, rng, true),
          Tensor::full({config.num_classes}, 1.0, true)};
}

EvidenceHead EvidenceHead::clone() const { return {clone_tensor(weight), clone_tensor(bias)}; }

ForwardResult forward(Tape& tape, const FrozenBackbone& backbone, const PromptSet* prompts, const EvidenceHead& head,
                      const Tensor& images) {
  const ViTConfig& cfg = backbone.config();
  const std::size_t B = images.dim(0), T = cfg.tokens(), D = cfg.embed_dim, H = cfg.num_heads;
  if (prompts != nullptr && prompts->num_layers() != cfg.num_layers)
    throw DimensionError("forward: prompt set has " + std::to_string(prompts->num_layers()) + " layers, backbone " +
                         std::to_string(cfg.num_layers));
  const double scale = 1.0 / std::sqrt(static_cast<double>(cfg.head_dim()));

  ForwardResult result;
  Tensor h = backbone.embed(images);
  for (std::size_t layer = 0; layer < cfg.num_layers; ++layer) {
    const BlockWeights& w = backbone.block(layer);
    const Tensor x = ops::layernorm(tape, h, w.ln1_gamma, w.ln1_beta);
    const Tensor qkv = ops::linear(tape, x, w.qkv_weight, w.qkv_bias);
    const Tensor q = ops::slice(tape, qkv, 1, 0, D);
    const Tensor k = ops::slice(tape, qkv, 1, D, 2 * D);
    const Tensor v = ops::slice(tape, qkv, 1, 2 * D, 3 * D);
    Tensor pk, pv;
    if (prompts != nullptr) {
      pk = prompts->keys[layer];
      pv = prompts->values[layer];
      if (pk.rank() != 2 || pk.dim(1) != D || pv.shape() != pk.shape())
        throw DimensionError("forward: prompt shape mismatch at layer " + std::to_string(layer));
      if (pk.dim(0) == 0) pk = pv = Tensor();
    }
    // keys and values per sample are [prompt; tokens]
    const Tensor attn = ops::attention_probs(tape, q, k, pk, B, H, scale);
    result.attentions.push_back(attn);
    const Tensor ctx = ops::attention_mix(tape, attn, v, pv);
    h = ops::add(tape, h, ops::linear(tape, ctx, w.out_weight, w.out_bias));
    const Tensor y = ops::layernorm(tape, h, w.ln2_gamma, w.ln2_beta);
    const Tensor mlp = ops::linear(tape, ops::gelu(tape, ops::linear(tape, y, w.fc1_weight, w.fc1_bias)), w.fc2_weight, w.fc2_bias);
    h = ops::add(tape, h, mlp);
  }
  const Tensor cls = ops::reshape(tape, ops::slice(tape, ops::reshape(tape, h, {B, T, D}), 1, 0, 1), {B, D});
  result.features = ops::layernorm(tape, cls, backbone.final_gamma(), backbone.final_beta());
  result.evidence = ops::relu(tape, ops::linear(tape, result.features, head.weight, head.bias));
  return result;
}

Tensor rollout_matrix(Tape& tape, std::span<const Tensor> attentions, std::size_t prompt_len) {
  if (attentions.empty()) throw UsageError("attention rollout needs at least one attention layer");
  Tensor rollout;
  for (const Tensor& layer : attentions) {
    if (layer.rank() != 4) throw DimensionError("rollout: expected [B, heads, T, T+L], got " + to_string(layer.shape()));
    const std::size_t T = layer.dim(2);
    if (layer.dim(3) != T + prompt_len)
      throw DimensionError("rollout: key length " + std::to_string(layer.dim(3)) + " != T + prompt_len");
    Tensor a = ops::mean(tape, layer, 1);
    a = ops::slice(tape, a, 2, prompt_len, prompt_len + T);
    a = ops::div(tape, a, ops::sum(tape, a, -1, true));
    a = ops::add(tape, ops::scale(tape, a, 0.5), identity_half(T));
    a = ops::div(tape, a, ops::sum(tape, a, -1, true));
    rollout = rollout.defined() ? ops::bmm(tape, a, rollout) : a;
  }
  return rollout;
}

Tensor rollout_maps(Tape& tape, std::span<const Tensor> attentions, const ViTConfig& config) {
  const Tensor r = rollout_matrix(tape, attentions, config.prompt_len);
  const std::size_t B = r.dim(0), T = r.dim(1), P = T - 1;
  if (P != config.num_patches()) throw DimensionError("rollout: token count does not match the patch grid");
  Tensor cls = ops::slice(tape, ops::slice(tape, r, 1, 0, 1), 2, 1, T);
  cls = ops::reshape(tape, cls, {B, P});
  const std::size_t S = config.image_size, g = config.grid();
  const Tensor up = Tensor::from_data({P, S * S}, image::bilinear_operator(g, g, S, S));
  return ops::normalize_max(tape, ops::matmul(tape, cls, up));
}

RolloutMap attention_rollout(std::span<const Tensor> attentions, const ViTConfig& config) {
  Tape tape;
  std::vector<Tensor> batched;
  for (const Tensor& a : attentions) {
    if (a.rank() != 3) throw DimensionError("attention_rollout: expected [heads, T, T+L], got " + to_string(a.shape()));
    const auto v = a.data();
    batched.push_back(Tensor::from_data({1, a.dim(0), a.dim(1), a.dim(2)}, {v.begin(), v.end()}));
  }
  const Tensor maps = rollout_maps(tape, batched, config);
  RolloutMap m;
  m.height = m.width = config.image_size;
  m.grid.assign(maps.data().begin(), maps.data().end());
  return m;
}

TrainableGroups trainable_params(const PromptSet& prompts, const EvidenceHead& head) {
  TrainableGroups g{{"b_prompts", {}}, {"t_prompts", {}}};
  for (std::size_t i = 0; i < prompts.num_layers(); ++i) {
    auto& group = i < prompts.split_layer ? g.b_group : g.t_group;
    group.params.push_back(prompts.keys[i]);
    group.params.push_back(prompts.values[i]);
  }
  g.t_group.params.push_back(head.weight);
  g.t_group.params.push_back(head.bias);
  return g;
}

std::size_t parameter_count(std::span<const Tensor> params) {
  std::size_t n = 0;
  for (const auto& p : params) n += p.size();
  return n;
}

}  // namespace fedsim::vit
