#pragma once

// Reverse-mode automatic differentiation over dense row-major double tensors.
//
// A Tensor is a shared handle: copies alias the same value/grad storage.
// Values are immutable once an op has produced them; only leaves (parameters,
// inputs) may be edited in place through mutable_data(). Ops are recorded on an
// explicit Tape (define-by-run); a tape is rebuilt for every forward pass and
// can be replayed backward exactly once.

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace fedsim {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

namespace detail {
struct TensorData {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until a gradient is accumulated
  bool requires_grad = false;
};
}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value);

  bool defined() const noexcept { return d_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t size() const;
  // Dimension `axis`; negative values count from the back.
  std::size_t dim(int axis) const;

  std::span<const double> data() const;
  std::span<double> mutable_data();
  double item() const;

  bool requires_grad() const;
  bool has_grad() const;
  // Empty span when no gradient has been accumulated.
  std::span<const double> grad() const;
  // Gradient storage, allocated as zeros on first use.
  std::span<double> grad_buffer() const;
  void zero_grad();

  // Constant copy of the current value, cut from any tape.
  Tensor detach() const;
  bool same_storage(const Tensor& other) const noexcept { return d_ == other.d_; }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorData> d) : d_(std::move(d)) {}
  std::shared_ptr<detail::TensorData> d_;

  friend class Tape;
};

using BackwardFn = std::function<void(std::span<const double> grad_out)>;

class Tape {
 public:
  Tape() = default;
  // A non-recording tape evaluates ops without keeping a graph (inference).
  static Tape inference() {
    Tape t;
    t.recording_ = false;
    return t;
  }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = default;
  Tape& operator=(Tape&&) = default;

  // Registers an op output. The result requires grad iff any input does; when
  // none does the output is a constant and `backward` is dropped. Throws
  // NumericError if `value` holds NaN/Inf.
  Tensor record(Shape shape, std::vector<double> value, std::initializer_list<Tensor> inputs,
                BackwardFn backward);
  Tensor record(Shape shape, std::vector<double> value, std::span<const Tensor> inputs,
                BackwardFn backward);

  // Accumulates d(loss)/d(leaf) into every requires-grad leaf reachable from
  // `loss`. Throws UsageError for a non-scalar loss, a loss not produced on
  // this tape, or a second call.
  void backward(const Tensor& loss);

  std::size_t size() const noexcept { return entries_.size(); }
  bool recording() const noexcept { return recording_; }
  bool consumed() const noexcept { return consumed_; }

 private:
  struct Entry {
    Tensor output;
    BackwardFn backward;
  };
  std::vector<Entry> entries_;
  bool consumed_ = false;
  bool recording_ = true;
};

namespace ops {

Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b);
// x[n,in] * w[in,out] (+ bias[out]); bias may be undefined.
Tensor linear(Tape& tape, const Tensor& x, const Tensor& w, const Tensor& bias);
// Batched a[B,m,k] * b[B,k,n].
Tensor bmm(Tape& tape, const Tensor& a, const Tensor& b);
// Batched a[B,m,k] * b[B,n,k]^T.
Tensor bmm_nt(Tape& tape, const Tensor& a, const Tensor& b);

// Multi-head attention over token rows. q is [B*T, D], k is [B*S, D]; the
// optional prefix [L, D] is shared by all samples and placed before each
// sample's keys. Returns softmax(scale * q k^T) per head as [B, heads, T, L+S].
Tensor attention_probs(Tape& tape, const Tensor& q, const Tensor& k, const Tensor& prefix, std::size_t batch,
                       std::size_t heads, double scale);
// probs [B, heads, T, L+S] times the matching values ([L, D] prefix, [B*S, D]
// rows), heads concatenated back into [B*T, D].
Tensor attention_mix(Tape& tape, const Tensor& probs, const Tensor& v, const Tensor& prefix);

Tensor softmax(Tape& tape, const Tensor& x, int axis);
Tensor relu(Tape& tape, const Tensor& x);
Tensor gelu(Tape& tape, const Tensor& x);
// Normalizes over the last axis, then applies gamma/beta (either may be undefined).
Tensor layernorm(Tape& tape, const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-6);

// Elementwise with numpy broadcasting.
Tensor add(Tape& tape, const Tensor& a, const Tensor& b);
Tensor sub(Tape& tape, const Tensor& a, const Tensor& b);
Tensor mul(Tape& tape, const Tensor& a, const Tensor& b);
Tensor div(Tape& tape, const Tensor& a, const Tensor& b);
Tensor scale(Tape& tape, const Tensor& x, double factor);

Tensor sum(Tape& tape, const Tensor& x);
Tensor sum(Tape& tape, const Tensor& x, int axis, bool keepdim = false);
Tensor mean(Tape& tape, const Tensor& x);
Tensor mean(Tape& tape, const Tensor& x, int axis, bool keepdim = false);

Tensor concat(Tape& tape, std::span<const Tensor> parts, int axis);
Tensor concat(Tape& tape, std::initializer_list<Tensor> parts, int axis);
Tensor slice(Tape& tape, const Tensor& x, int axis, std::size_t begin, std::size_t end);
// Swaps the last two axes.
Tensor transpose(Tape& tape, const Tensor& x);
Tensor permute(Tape& tape, const Tensor& x, std::span<const std::size_t> axes);
Tensor permute(Tape& tape, const Tensor& x, std::initializer_list<std::size_t> axes);
Tensor reshape(Tape& tape, const Tensor& x, Shape shape);
Tensor expand(Tape& tape, const Tensor& x, Shape shape);

// mean((a - b)^2) over all entries; shapes must match.
Tensor mse(Tape& tape, const Tensor& a, const Tensor& b);
// Divides each last-axis row by its maximum; rows with max <= 0 pass through.
Tensor normalize_max(Tape& tape, const Tensor& x);

}  // namespace ops

}  // namespace fedsim
