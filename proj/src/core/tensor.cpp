#include "fedsim/tensor.hpp"

#include <algorithm>
#include <cstdint>
#include <cmath>
#include <functional>
#include <numeric>

#include "fedsim/errors.hpp"

namespace fedsim {

std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string to_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i > 0) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

namespace {

// x * 0 is 0 for finite x and NaN otherwise; four lanes keep the adds independent.
bool all_finite(std::span<const double> v) {
  double acc[4] = {0.0, 0.0, 0.0, 0.0};
  std::size_t i = 0;
  for (; i + 4 <= v.size(); i += 4)
    for (std::size_t l = 0; l < 4; ++l) acc[l] += v[i + l] * 0.0;
  for (; i < v.size(); ++i) acc[0] += v[i] * 0.0;
  return (acc[0] + acc[1] + acc[2] + acc[3]) == 0.0;
}

}  // namespace

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const std::size_t n = numel(shape);
  return from_data(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::from_data(Shape shape, std::vector<double> values, bool requires_grad) {
  if (numel(shape) != values.size())
    throw DimensionError("tensor shape " + to_string(shape) + " does not match " +
                         std::to_string(values.size()) + " values");
  if (!all_finite(values)) throw NumericError("tensor initialized with non-finite values");
  auto d = std::make_shared<detail::TensorData>();
  d->shape = std::move(shape);
  d->value = std::move(values);
  d->requires_grad = requires_grad;
  return Tensor(std::move(d));
}

Tensor Tensor::scalar(double value) { return from_data({}, {value}); }

const Shape& Tensor::shape() const {
  if (!d_) throw UsageError("undefined tensor");
  return d_->shape;
}

std::size_t Tensor::size() const { return data().size(); }

std::size_t Tensor::dim(int axis) const {
  const auto r = static_cast<int>(rank());
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) throw DimensionError("axis " + std::to_string(axis) + " out of range for " + to_string(shape()));
  return shape()[static_cast<std::size_t>(a)];
}

std::span<const double> Tensor::data() const {
  if (!d_) throw UsageError("undefined tensor");
  return d_->value;
}

std::span<double> Tensor::mutable_data() {
  if (!d_) throw UsageError("undefined tensor");
  return d_->value;
}

double Tensor::item() const {
  if (size() != 1) throw UsageError("item() on tensor of shape " + to_string(shape()));
  return d_->value[0];
}

bool Tensor::requires_grad() const { return d_ && d_->requires_grad; }

bool Tensor::has_grad() const { return d_ && !d_->grad.empty(); }

std::span<const double> Tensor::grad() const {
  if (!d_) throw UsageError("undefined tensor");
  return d_->grad;
}

std::span<double> Tensor::grad_buffer() const {
  if (!d_) throw UsageError("undefined tensor");
  if (d_->grad.empty()) d_->grad.assign(d_->value.size(), 0.0);
  return d_->grad;
}

void Tensor::zero_grad() {
  if (d_) d_->grad.clear();
}

Tensor Tensor::detach() const { return from_data(shape(), d_->value, false); }

Tensor Tape::record(Shape shape, std::vector<double> value, std::initializer_list<Tensor> inputs,
                    BackwardFn backward) {
  return record(std::move(shape), std::move(value), std::span<const Tensor>(inputs.begin(), inputs.size()),
                std::move(backward));
}

Tensor Tape::record(Shape shape, std::vector<double> value, std::span<const Tensor> inputs,
                    BackwardFn backward) {
  if (consumed_) throw UsageError("tape already replayed; start a fresh forward pass");
  if (!all_finite(value)) throw NumericError("op produced non-finite values for shape " + to_string(shape));
  const bool needs_grad = recording_ && std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.requires_grad(); });
  if (numel(shape) != value.size())
    throw DimensionError("op output shape " + to_string(shape) + " does not match " + std::to_string(value.size()) + " values");
  auto d = std::make_shared<detail::TensorData>();
  d->shape = std::move(shape);
  d->value = std::move(value);
  d->requires_grad = needs_grad;
  Tensor out(std::move(d));
  if (needs_grad) entries_.push_back({out, std::move(backward)});
  return out;
}

void Tape::backward(const Tensor& loss) {
  if (consumed_) throw UsageError("backward called twice on the same tape");
  if (!loss.defined() || loss.size() != 1) throw UsageError("backward requires a scalar loss");
  if (!loss.requires_grad()) throw UsageError("loss does not depend on any trainable tensor");
  const auto it = std::find_if(entries_.rbegin(), entries_.rend(),
                               [&](const Entry& e) { return e.output.same_storage(loss); });
  if (it == entries_.rend()) throw UsageError("loss was not produced on this tape");
  consumed_ = true;

  Tensor root = loss;
  root.grad_buffer()[0] += 1.0;
  for (auto e = it; e != entries_.rend(); ++e) {
    if (!e->output.has_grad()) continue;
    const auto g = e->output.grad();
    if (!all_finite(g)) throw NumericError("non-finite gradient reached an op output of shape " + to_string(e->output.shape()));
    e->backward(g);
  }
  entries_.clear();
}

}  // namespace fedsim
