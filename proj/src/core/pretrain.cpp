#include "fedsim/pretrain.hpp"

#include <algorithm>
#include <numeric>
#include <random>

#include "fedsim/data.hpp"
#include "fedsim/errors.hpp"
#include "fedsim/evidential.hpp"
#include "fedsim/optim.hpp"

namespace fedsim::pretrain {

vit::FrozenBackbone pretrain_backbone(const vit::ViTConfig& config, const Options& options) {
  if (options.steps == 0) return vit::FrozenBackbone::random(config, options.seed);
  if (options.batch_size == 0 || options.pool < options.batch_size) throw UsageError("pretraining pool must hold at least one batch");
  const auto base = vit::FrozenBackbone::random(config, options.seed);
  auto named = base.named_parameters();
  std::vector<Tensor> trainable;
  for (auto& [name, t] : named) {
    if (name.rfind("blocks.", 0) != 0 && name.rfind("norm.", 0) != 0) continue;
    t = Tensor::from_data(t.shape(), {t.data().begin(), t.data().end()}, true);
    trainable.push_back(t);
  }
  const auto backbone = vit::FrozenBackbone::from_named(config, named);

  vit::ViTConfig head_cfg = config;
  head_cfg.num_classes = options.sectors;
  const auto head = vit::EvidenceHead::init(head_cfg, options.seed + 1);
  trainable.push_back(head.weight);
  trainable.push_back(head.bias);
  optim::Optimizer opt(optim::Kind::AdamW, 0.0);
  opt.add_group("backbone", trainable, options.lr);

  const auto pool = data::generate_pretext(options.pool, config.image_size, options.sectors, options.seed);
  if (config.channels != 1) throw ConfigError("channels", "backbone pretraining supports single-channel images only");
  const std::vector<double> prior(options.sectors, 1.0);
  std::mt19937_64 rng(options.seed ^ 0x5eedULL);
  std::vector<std::size_t> order(pool.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::size_t cursor = order.size();
  std::vector<double> pixels;
  std::vector<std::size_t> labels;
  for (std::size_t step = 0; step < options.steps; ++step) {
    pixels.clear();
    labels.clear();
    for (std::size_t b = 0; b < options.batch_size; ++b) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      const auto& s = pool[order[cursor++]];
      pixels.insert(pixels.end(), s.pixels.begin(), s.pixels.end());
      labels.push_back(s.label);
    }
    Tape tape;
    const auto fwd = vit::forward(tape, backbone, nullptr, head,
                                  Tensor::from_data({options.batch_size, config.pixels()}, pixels));
    const double epoch = 10.0 * static_cast<double>(step) / static_cast<double>(options.steps);
    tape.backward(evidential::evidential_loss(tape, fwd.evidence, labels, prior, epoch));
    opt.step();
    opt.zero_grad();
  }

  for (auto& [name, t] : named) t = t.detach();
  return vit::FrozenBackbone::from_named(config, named);
}

}  // namespace fedsim::pretrain
