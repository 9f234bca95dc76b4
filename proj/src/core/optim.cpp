#include "fedsim/optim.hpp"

#include <cmath>

#include "fedsim/errors.hpp"

namespace fedsim::optim {

Kind parse_kind(std::string_view name) {
  if (name == "adamw") return Kind::AdamW;
  if (name == "sgd") return Kind::Sgd;
  throw ConfigError("optimizer", "unknown optimizer '" + std::string(name) + "' (adamw|sgd)");
}

std::string_view name(Kind kind) { return kind == Kind::AdamW ? "adamw" : "sgd"; }

Optimizer::Optimizer(Kind kind, double weight_decay) : kind_(kind), weight_decay_(weight_decay) {
  if (weight_decay < 0.0) throw UsageError("weight decay must be non-negative");
}

void Optimizer::add_group(std::string name, std::vector<Tensor> params, double lr) {
  if (!(lr > 0.0)) throw UsageError("learning rate must be positive for group " + name);
  std::vector<std::vector<double>> m, v;
  for (const auto& p : params) {
    if (!p.requires_grad()) throw UsageError("group " + name + " holds a frozen tensor");
    m.emplace_back(p.size(), 0.0);
    v.emplace_back(p.size(), 0.0);
  }
  groups_.push_back({std::move(name), std::move(params), lr});
  first_.push_back(std::move(m));
  second_.push_back(std::move(v));
}

void Optimizer::step() {
  ++steps_;
  const double t = static_cast<double>(steps_);
  const double bc1 = 1.0 - std::pow(beta1_, t), bc2 = 1.0 - std::pow(beta2_, t);
  for (std::size_t gi = 0; gi < groups_.size(); ++gi) {
    auto& group = groups_[gi];
    for (std::size_t pi = 0; pi < group.params.size(); ++pi) {
      Tensor& p = group.params[pi];
      const auto g = p.grad();
      auto w = p.mutable_data();
      auto& m = first_[gi][pi];
      auto& v = second_[gi][pi];
      for (std::size_t i = 0; i < w.size(); ++i) {
        const double gi_ = g.empty() ? 0.0 : g[i];
        double update = gi_;
        if (kind_ == Kind::AdamW) {
          m[i] = beta1_ * m[i] + (1.0 - beta1_) * gi_;
          v[i] = beta2_ * v[i] + (1.0 - beta2_) * gi_ * gi_;
          update = (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps_);
        }
        w[i] -= group.lr * (update + weight_decay_ * w[i]);
      }
    }
  }
}

void Optimizer::zero_grad() {
  for (auto& group : groups_)
    for (auto& p : group.params) p.zero_grad();
}

}  // namespace fedsim::optim
