#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "fedsim/tensor.hpp"

namespace fedsim::optim {

enum class Kind { AdamW, Sgd };

Kind parse_kind(std::string_view name);
std::string_view name(Kind kind);

struct ParamGroup {
  std::string name;
  std::vector<Tensor> params;
  double lr = 0.0;
};

// First-order optimizer over named parameter groups with decoupled weight
// decay: theta <- theta - lr * (update + weight_decay * theta).
class Optimizer {
 public:
  Optimizer(Kind kind, double weight_decay);

  void add_group(std::string name, std::vector<Tensor> params, double lr);
  // Parameters without an accumulated gradient still receive weight decay.
  void step();
  void zero_grad();

  Kind kind() const noexcept { return kind_; }
  double weight_decay() const noexcept { return weight_decay_; }
  std::span<const ParamGroup> groups() const noexcept { return groups_; }
  std::size_t steps() const noexcept { return steps_; }

 private:
  Kind kind_;
  double weight_decay_;
  double beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8;
  std::vector<ParamGroup> groups_;
  std::vector<std::vector<std::vector<double>>> first_, second_;
  std::size_t steps_ = 0;
};

}  // namespace fedsim::optim
