#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "fedsim/errors.hpp"
#include "fedsim/kernels/kernels.hpp"
#include "fedsim/tensor.hpp"

namespace fedsim::ops {
namespace {

std::size_t norm_axis(int axis, std::size_t rank) {
  const int r = static_cast<int>(rank);
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) throw DimensionError("axis " + std::to_string(axis) + " out of range for rank " + std::to_string(rank));
  return static_cast<std::size_t>(a);
}

std::size_t prod(const Shape& s, std::size_t begin, std::size_t end) {
  std::size_t p = 1;
  for (std::size_t i = begin; i < end; ++i) p *= s[i];
  return p;
}

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank)
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " + to_string(t.shape()));
}

// Offsets of each output element into a and b under numpy broadcasting.
struct BroadcastPlan {
  Shape out;
  bool same = false;
  std::vector<std::size_t> ia, ib;
};

std::vector<std::size_t> strides_in(const Shape& src, const Shape& out) {
  // strides of `src` aligned to the trailing dims of `out`; zero where broadcast
  std::vector<std::size_t> st(out.size(), 0);
  std::size_t stride = 1;
  for (std::size_t i = 0; i < src.size(); ++i) {
    const std::size_t si = src.size() - 1 - i;
    const std::size_t oi = out.size() - 1 - i;
    st[oi] = src[si] == 1 ? 0 : stride;
    stride *= src[si];
  }
  return st;
}

std::vector<std::size_t> offsets(const Shape& out, const std::vector<std::size_t>& st) {
  const std::size_t n = numel(out);
  std::vector<std::size_t> off(n);
  std::vector<std::size_t> idx(out.size(), 0);
  std::size_t cur = 0;
  for (std::size_t o = 0; o < n; ++o) {
    off[o] = cur;
    for (std::size_t d = out.size(); d-- > 0;) {
      ++idx[d];
      cur += st[d];
      if (idx[d] < out[d]) break;
      cur -= st[d] * idx[d];
      idx[d] = 0;
    }
  }
  return off;
}

Shape broadcast_shape(const Shape& a, const Shape& b) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r);
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    const std::size_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da != db && da != 1 && db != 1)
      throw DimensionError("shapes " + to_string(a) + " and " + to_string(b) + " do not broadcast");
    out[i] = da == 1 ? db : da;
  }
  return out;
}

BroadcastPlan plan_broadcast(const Shape& a, const Shape& b) {
  BroadcastPlan p;
  if (a == b) {
    p.out = a;
    p.same = true;
    return p;
  }
  p.out = broadcast_shape(a, b);
  p.ia = offsets(p.out, strides_in(a, p.out));
  p.ib = offsets(p.out, strides_in(b, p.out));
  return p;
}

template <typename F, typename DA, typename DB>
Tensor binary(Tape& tape, const Tensor& a, const Tensor& b, F f, DA dfa, DB dfb) {
  auto plan = std::make_shared<BroadcastPlan>(plan_broadcast(a.shape(), b.shape()));
  const std::size_t n = numel(plan->out);
  const auto av = a.data();
  const auto bv = b.data();
  std::vector<double> out(n);
  if (plan->same) {
    for (std::size_t i = 0; i < n; ++i) out[i] = f(av[i], bv[i]);
  } else {
    for (std::size_t i = 0; i < n; ++i) out[i] = f(av[plan->ia[i]], bv[plan->ib[i]]);
  }
  return tape.record(plan->out, std::move(out), {a, b}, [a, b, plan, dfa, dfb](std::span<const double> g) mutable {
    const auto av = a.data();
    const auto bv = b.data();
    const std::size_t n = g.size();
    if (a.requires_grad()) {
      auto ga = a.grad_buffer();
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t ja = plan->same ? i : plan->ia[i];
        const std::size_t jb = plan->same ? i : plan->ib[i];
        ga[ja] += g[i] * dfa(av[ja], bv[jb]);
      }
    }
    if (b.requires_grad()) {
      auto gb = b.grad_buffer();
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t ja = plan->same ? i : plan->ia[i];
        const std::size_t jb = plan->same ? i : plan->ib[i];
        gb[jb] += g[i] * dfb(av[ja], bv[jb]);
      }
    }
  });
}

template <typename F, typename D>
Tensor unary(Tape& tape, const Tensor& x, F f, D df) {
  const auto xv = x.data();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
  return tape.record(x.shape(), std::move(out), {x}, [x, df](std::span<const double> g) mutable {
    const auto xv = x.data();
    auto gx = x.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * df(xv[i]);
  });
}

}  // namespace

Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) throw DimensionError("matmul: inner dimensions differ: " + to_string(a.shape()) + " x " + to_string(b.shape()));
  std::vector<double> out(m * n);
  kernels::active().gemm_nn(m, n, k, a.data().data(), k, b.data().data(), n, out.data(), n, false);
  return tape.record({m, n}, std::move(out), {a, b}, [a, b, m, n, k](std::span<const double> g) mutable {
    const auto& K = kernels::active();
    if (a.requires_grad()) K.gemm_nt(m, k, n, g.data(), n, b.data().data(), n, a.grad_buffer().data(), k, true);
    if (b.requires_grad()) K.gemm_tn(k, n, m, a.data().data(), k, g.data(), n, b.grad_buffer().data(), n, true);
  });
}

Tensor linear(Tape& tape, const Tensor& x, const Tensor& w, const Tensor& bias) {
  require_rank(x, 2, "linear");
  require_rank(w, 2, "linear");
  const std::size_t m = x.dim(0), k = x.dim(1), n = w.dim(1);
  if (w.dim(0) != k) throw DimensionError("linear: input width " + std::to_string(k) + " vs weight " + to_string(w.shape()));
  if (bias.defined() && bias.size() != n) throw DimensionError("linear: bias " + to_string(bias.shape()) + " vs width " + std::to_string(n));
  std::vector<double> out(m * n);
  if (bias.defined()) {
    const auto bv = bias.data();
    for (std::size_t i = 0; i < m; ++i) std::copy(bv.begin(), bv.end(), out.begin() + static_cast<std::ptrdiff_t>(i * n));
  }
  kernels::active().gemm_nn(m, n, k, x.data().data(), k, w.data().data(), n, out.data(), n, bias.defined());
  const std::initializer_list<Tensor> inputs = {x, w, bias};
  return tape.record({m, n}, std::move(out), inputs, [x, w, bias, m, n, k](std::span<const double> g) mutable {
    const auto& K = kernels::active();
    if (x.requires_grad()) K.gemm_nt(m, k, n, g.data(), n, w.data().data(), n, x.grad_buffer().data(), k, true);
    if (w.requires_grad()) K.gemm_tn(k, n, m, x.data().data(), k, g.data(), n, w.grad_buffer().data(), n, true);
    if (bias.requires_grad()) {
      auto gb = bias.grad_buffer();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
    }
  });
}

Tensor bmm(Tape& tape, const Tensor& a, const Tensor& b) {
  require_rank(a, 3, "bmm");
  require_rank(b, 3, "bmm");
  const std::size_t B = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
  if (b.dim(0) != B || b.dim(1) != k) throw DimensionError("bmm: " + to_string(a.shape()) + " x " + to_string(b.shape()));
  std::vector<double> out(B * m * n);
  const auto& K = kernels::active();
  for (std::size_t i = 0; i < B; ++i)
    K.gemm_nn(m, n, k, a.data().data() + i * m * k, k, b.data().data() + i * k * n, n, out.data() + i * m * n, n, false);
  return tape.record({B, m, n}, std::move(out), {a, b}, [a, b, B, m, n, k](std::span<const double> g) mutable {
    const auto& K = kernels::active();
    if (a.requires_grad()) {
      double* ga = a.grad_buffer().data();
      for (std::size_t i = 0; i < B; ++i)
        K.gemm_nt(m, k, n, g.data() + i * m * n, n, b.data().data() + i * k * n, n, ga + i * m * k, k, true);
    }
    if (b.requires_grad()) {
      double* gb = b.grad_buffer().data();
      for (std::size_t i = 0; i < B; ++i)
        K.gemm_tn(k, n, m, a.data().data() + i * m * k, k, g.data() + i * m * n, n, gb + i * k * n, n, true);
    }
  });
}

Tensor bmm_nt(Tape& tape, const Tensor& a, const Tensor& b) {
  require_rank(a, 3, "bmm_nt");
  require_rank(b, 3, "bmm_nt");
  const std::size_t B = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(1);
  if (b.dim(0) != B || b.dim(2) != k) throw DimensionError("bmm_nt: " + to_string(a.shape()) + " x " + to_string(b.shape()) + "^T");
  std::vector<double> out(B * m * n);
  const auto& K = kernels::active();
  for (std::size_t i = 0; i < B; ++i)
    K.gemm_nt(m, n, k, a.data().data() + i * m * k, k, b.data().data() + i * n * k, k, out.data() + i * m * n, n, false);
  return tape.record({B, m, n}, std::move(out), {a, b}, [a, b, B, m, n, k](std::span<const double> g) mutable {
    const auto& K = kernels::active();
    if (a.requires_grad()) {
      double* ga = a.grad_buffer().data();
      for (std::size_t i = 0; i < B; ++i)
        K.gemm_nn(m, k, n, g.data() + i * m * n, n, b.data().data() + i * n * k, k, ga + i * m * k, k, true);
    }
    if (b.requires_grad()) {
      double* gb = b.grad_buffer().data();
      for (std::size_t i = 0; i < B; ++i)
        K.gemm_tn(n, k, m, g.data() + i * m * n, n, a.data().data() + i * m * k, k, gb + i * n * k, k, true);
    }
  });
}

Tensor attention_probs(Tape& tape, const Tensor& q, const Tensor& k, const Tensor& prefix, std::size_t batch,
                       std::size_t heads, double scale) {
  require_rank(q, 2, "attention_probs");
  require_rank(k, 2, "attention_probs");
  const std::size_t D = q.dim(1);
  if (batch == 0 || heads == 0 || D % heads != 0 || q.dim(0) % batch != 0 || k.dim(0) % batch != 0 || k.dim(1) != D)
    throw DimensionError("attention_probs: q " + to_string(q.shape()) + ", k " + to_string(k.shape()) + ", batch " +
                         std::to_string(batch) + ", heads " + std::to_string(heads));
  const std::size_t L = prefix.defined() ? prefix.dim(0) : 0;
  if (prefix.defined() && (prefix.rank() != 2 || prefix.dim(1) != D))
    throw DimensionError("attention_probs: prefix " + to_string(prefix.shape()) + " vs width " + std::to_string(D));
  const std::size_t T = q.dim(0) / batch, S = k.dim(0) / batch, N = L + S, dh = D / heads;
  const auto& K = kernels::active();
  const double* qv = q.data().data();
  const double* kv = k.data().data();
  const double* pv = L > 0 ? prefix.data().data() : nullptr;
  std::vector<double> out(batch * heads * T * N);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t h = 0; h < heads; ++h) {
      double* p = out.data() + (b * heads + h) * T * N;
      const double* qbh = qv + b * T * D + h * dh;
      if (L > 0) K.gemm_nt(T, L, dh, qbh, D, pv + h * dh, D, p, N, false);
      K.gemm_nt(T, S, dh, qbh, D, kv + b * S * D + h * dh, D, p + L, N, false);
      for (std::size_t t = 0; t < T; ++t) {
        double* row = p + t * N;
        double mx = -INFINITY;
        for (std::size_t j = 0; j < N; ++j) mx = std::max(mx, row[j] *= scale);
        double z = 0.0;
        for (std::size_t j = 0; j < N; ++j) z += (row[j] = std::exp(row[j] - mx));
        const double inv = 1.0 / z;
        for (std::size_t j = 0; j < N; ++j) row[j] *= inv;
      }
    }
  auto probs = std::make_shared<std::vector<double>>(out);
  const std::initializer_list<Tensor> inputs = {q, k, prefix};
  return tape.record({batch, heads, T, N}, std::move(out), inputs,
                     [q, k, prefix, probs, batch, heads, T, S, L, N, D, dh, scale](std::span<const double> g) mutable {
    const auto& K = kernels::active();
    const double* qv = q.data().data();
    const double* kv = k.data().data();
    const double* pv = L > 0 ? prefix.data().data() : nullptr;
    double* gq = q.requires_grad() ? q.grad_buffer().data() : nullptr;
    double* gk = k.requires_grad() ? k.grad_buffer().data() : nullptr;
    double* gp = L > 0 && prefix.requires_grad() ? prefix.grad_buffer().data() : nullptr;
    std::vector<double> dz(T * N);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t h = 0; h < heads; ++h) {
        const std::size_t off = (b * heads + h) * T * N;
        const double* p = probs->data() + off;
        const double* gp_bh = g.data() + off;
        for (std::size_t t = 0; t < T; ++t) {
          double dotp = 0.0;
          for (std::size_t j = 0; j < N; ++j) dotp += gp_bh[t * N + j] * p[t * N + j];
          for (std::size_t j = 0; j < N; ++j) dz[t * N + j] = scale * p[t * N + j] * (gp_bh[t * N + j] - dotp);
        }
        const double* qbh = qv + b * T * D + h * dh;
        if (gq != nullptr) {
          double* gq_bh = gq + b * T * D + h * dh;
          if (L > 0) K.gemm_nn(T, dh, L, dz.data(), N, pv + h * dh, D, gq_bh, D, true);
          K.gemm_nn(T, dh, S, dz.data() + L, N, kv + b * S * D + h * dh, D, gq_bh, D, true);
        }
        if (gk != nullptr) K.gemm_tn(S, dh, T, dz.data() + L, N, qbh, D, gk + b * S * D + h * dh, D, true);
        if (gp != nullptr) K.gemm_tn(L, dh, T, dz.data(), N, qbh, D, gp + h * dh, D, true);
      }
  });
}

Tensor attention_mix(Tape& tape, const Tensor& probs, const Tensor& v, const Tensor& prefix) {
  require_rank(probs, 4, "attention_mix");
  require_rank(v, 2, "attention_mix");
  const std::size_t batch = probs.dim(0), heads = probs.dim(1), T = probs.dim(2), N = probs.dim(3), D = v.dim(1);
  const std::size_t L = prefix.defined() ? prefix.dim(0) : 0;
  if (N < L || D % heads != 0 || v.dim(0) != batch * (N - L) || (prefix.defined() && (prefix.rank() != 2 || prefix.dim(1) != D)))
    throw DimensionError("attention_mix: probs " + to_string(probs.shape()) + ", v " + to_string(v.shape()) +
                         (prefix.defined() ? ", prefix " + to_string(prefix.shape()) : std::string()));
  const std::size_t S = N - L, dh = D / heads;
  const auto& K = kernels::active();
  const double* pr = probs.data().data();
  const double* vv = v.data().data();
  const double* pv = L > 0 ? prefix.data().data() : nullptr;
  std::vector<double> out(batch * T * D, 0.0);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t h = 0; h < heads; ++h) {
      const double* p = pr + (b * heads + h) * T * N;
      double* o = out.data() + b * T * D + h * dh;
      if (L > 0) K.gemm_nn(T, dh, L, p, N, pv + h * dh, D, o, D, true);
      K.gemm_nn(T, dh, S, p + L, N, vv + b * S * D + h * dh, D, o, D, true);
    }
  const std::initializer_list<Tensor> inputs = {probs, v, prefix};
  return tape.record({batch * T, D}, std::move(out), inputs,
                     [probs, v, prefix, batch, heads, T, S, L, N, D, dh](std::span<const double> g) mutable {
    const auto& K = kernels::active();
    const double* pr = probs.data().data();
    const double* vv = v.data().data();
    const double* pv = L > 0 ? prefix.data().data() : nullptr;
    double* gpr = probs.requires_grad() ? probs.grad_buffer().data() : nullptr;
    double* gv = v.requires_grad() ? v.grad_buffer().data() : nullptr;
    double* gpf = L > 0 && prefix.requires_grad() ? prefix.grad_buffer().data() : nullptr;
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t h = 0; h < heads; ++h) {
        const std::size_t off = (b * heads + h) * T * N;
        const double* gbh = g.data() + b * T * D + h * dh;
        if (gpr != nullptr) {
          if (L > 0) K.gemm_nt(T, L, dh, gbh, D, pv + h * dh, D, gpr + off, N, true);
          K.gemm_nt(T, S, dh, gbh, D, vv + b * S * D + h * dh, D, gpr + off + L, N, true);
        }
        if (gv != nullptr) K.gemm_tn(S, dh, T, pr + off + L, N, gbh, D, gv + b * S * D + h * dh, D, true);
        if (gpf != nullptr) K.gemm_tn(L, dh, T, pr + off, N, gbh, D, gpf + h * dh, D, true);
      }
  });
}

Tensor softmax(Tape& tape, const Tensor& x, int axis) {
  const std::size_t ax = norm_axis(axis, x.rank());
  const Shape& s = x.shape();
  const std::size_t outer = prod(s, 0, ax), n = s[ax], inner = prod(s, ax + 1, s.size());
  const auto xv = x.data();
  std::vector<double> y(xv.size());
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      double mx = -INFINITY;
      for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, xv[base + j * inner]);
      double z = 0.0;
      for (std::size_t j = 0; j < n; ++j) z += (y[base + j * inner] = std::exp(xv[base + j * inner] - mx));
      for (std::size_t j = 0; j < n; ++j) y[base + j * inner] /= z;
    }
  auto yv = std::make_shared<std::vector<double>>(y);
  return tape.record(s, std::move(y), {x}, [x, yv, outer, n, inner](std::span<const double> g) mutable {
    auto gx = x.grad_buffer();
    const auto& y = *yv;
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * n * inner + in;
        double dotp = 0.0;
        for (std::size_t j = 0; j < n; ++j) dotp += g[base + j * inner] * y[base + j * inner];
        for (std::size_t j = 0; j < n; ++j) {
          const std::size_t i = base + j * inner;
          gx[i] += y[i] * (g[i] - dotp);
        }
      }
  });
}

Tensor relu(Tape& tape, const Tensor& x) {
  return unary(tape, x, [](double v) { return v > 0.0 ? v : 0.0; }, [](double v) { return v > 0.0 ? 1.0 : 0.0; });
}

namespace {

// Standard normal CDF as a cubic Hermite spline on a 1/128 grid over [-8, 8],
// built from exact values and densities at the knots (|error| < 1e-11). gelu
// and its derivative both come from this one spline, so they stay consistent.
class NormalCdfSpline {
 public:
  static constexpr double kLimit = 8.0;
  static constexpr double kStep = 1.0 / 128.0;

  NormalCdfSpline() {
    const auto n = static_cast<std::size_t>(2.0 * kLimit / kStep) + 1;
    cdf_.resize(n);
    pdf_.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      const double x = -kLimit + static_cast<double>(i) * kStep;
      cdf_[i] = 0.5 * std::erfc(-x * std::numbers::sqrt2 / 2.0);
      pdf_[i] = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
    }
  }

  // Phi(x) and Phi'(x) of the spline.
  void eval(double x, double& value, double& slope) const {
    if (x <= -kLimit) {
      value = slope = 0.0;
      return;
    }
    if (x >= kLimit) {
      value = 1.0;
      slope = 0.0;
      return;
    }
    const double u = (x + kLimit) / kStep;
    const auto i = std::min(static_cast<std::size_t>(u), cdf_.size() - 2);
    const double t = u - static_cast<double>(i);
    const double p0 = cdf_[i], p1 = cdf_[i + 1];
    const double m0 = pdf_[i] * kStep, m1 = pdf_[i + 1] * kStep;
    const double t2 = t * t, t3 = t2 * t;
    value = (2 * t3 - 3 * t2 + 1) * p0 + (t3 - 2 * t2 + t) * m0 + (-2 * t3 + 3 * t2) * p1 + (t3 - t2) * m1;
    slope = ((6 * t2 - 6 * t) * p0 + (3 * t2 - 4 * t + 1) * m0 + (-6 * t2 + 6 * t) * p1 + (3 * t2 - 2 * t) * m1) / kStep;
  }

 private:
  std::vector<double> cdf_, pdf_;
};

const NormalCdfSpline& normal_cdf() {
  static const NormalCdfSpline spline;
  return spline;
}

}  // namespace

Tensor gelu(Tape& tape, const Tensor& x) {
  // x * Phi(x); the derivative is kept from the forward pass
  const auto& cdf = normal_cdf();
  const auto xv = x.data();
  const bool keep = tape.recording() && x.requires_grad();
  std::vector<double> out(xv.size());
  auto deriv = std::make_shared<std::vector<double>>(keep ? xv.size() : 0);
  for (std::size_t i = 0; i < xv.size(); ++i) {
    double phi = 0.0, dphi = 0.0;
    cdf.eval(xv[i], phi, dphi);
    out[i] = xv[i] * phi;
    if (keep) (*deriv)[i] = phi + xv[i] * dphi;
  }
  return tape.record(x.shape(), std::move(out), {x}, [x, deriv](std::span<const double> g) mutable {
    auto gx = x.grad_buffer();
    const auto& d = *deriv;
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * d[i];
  });
}

Tensor layernorm(Tape& tape, const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  if (x.rank() < 1) throw DimensionError("layernorm on a scalar");
  const std::size_t n = x.dim(-1);
  const std::size_t rows = x.size() / n;
  if (gamma.defined() && gamma.size() != n) throw DimensionError("layernorm: gamma " + to_string(gamma.shape()));
  if (beta.defined() && beta.size() != n) throw DimensionError("layernorm: beta " + to_string(beta.shape()));
  const auto xv = x.data();
  auto xhat = std::make_shared<std::vector<double>>(xv.size());
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  std::vector<double> gam(n, 1.0), bet(n, 0.0);
  if (gamma.defined()) std::copy(gamma.data().begin(), gamma.data().end(), gam.begin());
  if (beta.defined()) std::copy(beta.data().begin(), beta.data().end(), bet.begin());
  std::vector<double> y(xv.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = xv.data() + r * n;
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += xr[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<double>(n);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    double* hr = xhat->data() + r * n;
    double* yr = y.data() + r * n;
    for (std::size_t j = 0; j < n; ++j) {
      hr[j] = (xr[j] - mu) * is;
      yr[j] = hr[j] * gam[j] + bet[j];
    }
  }
  const std::initializer_list<Tensor> inputs = {x, gamma, beta};
  return tape.record(x.shape(), std::move(y), inputs, [x, gamma, beta, xhat, inv_std, n, rows](std::span<const double> g) mutable {
    const auto& h = *xhat;
    if (gamma.requires_grad()) {
      auto gg = gamma.grad_buffer();
      for (std::size_t i = 0; i < h.size(); ++i) gg[i % n] += g[i] * h[i];
    }
    if (beta.requires_grad()) {
      auto gb = beta.grad_buffer();
      for (std::size_t i = 0; i < h.size(); ++i) gb[i % n] += g[i];
    }
    if (!x.requires_grad()) return;
    auto gx = x.grad_buffer();
    const double inv_n = 1.0 / static_cast<double>(n);
    std::vector<double> gh(n), gam(n, 1.0);
    if (gamma.defined()) std::copy(gamma.data().begin(), gamma.data().end(), gam.begin());
    for (std::size_t r = 0; r < rows; ++r) {
      double sum_gh = 0.0, sum_gh_h = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        gh[j] = g[r * n + j] * gam[j];
        sum_gh += gh[j];
        sum_gh_h += gh[j] * h[r * n + j];
      }
      const double is = (*inv_std)[r];
      for (std::size_t j = 0; j < n; ++j)
        gx[r * n + j] += is * (gh[j] - inv_n * sum_gh - h[r * n + j] * inv_n * sum_gh_h);
    }
  });
}

Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
  return binary(tape, a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
                [](double, double) { return 1.0; });
}

Tensor sub(Tape& tape, const Tensor& a, const Tensor& b) {
  return binary(tape, a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
                [](double, double) { return -1.0; });
}

Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
  return binary(tape, a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
                [](double x, double) { return x; });
}

Tensor div(Tape& tape, const Tensor& a, const Tensor& b) {
  return binary(
      tape, a, b, [](double x, double y) { return x / y; }, [](double, double y) { return 1.0 / y; },
      [](double x, double y) { return -x / (y * y); });
}

Tensor scale(Tape& tape, const Tensor& x, double factor) {
  return unary(tape, x, [factor](double v) { return v * factor; }, [factor](double) { return factor; });
}

Tensor sum(Tape& tape, const Tensor& x) {
  const auto xv = x.data();
  const double s = std::accumulate(xv.begin(), xv.end(), 0.0);
  return tape.record({}, {s}, {x}, [x](std::span<const double> g) mutable {
    for (double& v : x.grad_buffer()) v += g[0];
  });
}

Tensor sum(Tape& tape, const Tensor& x, int axis, bool keepdim) {
  const std::size_t ax = norm_axis(axis, x.rank());
  const Shape& s = x.shape();
  const std::size_t outer = prod(s, 0, ax), n = s[ax], inner = prod(s, ax + 1, s.size());
  Shape out_shape = s;
  if (keepdim) out_shape[ax] = 1;
  else out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(ax));
  const auto xv = x.data();
  std::vector<double> y(outer * inner, 0.0);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t in = 0; in < inner; ++in) y[o * inner + in] += xv[(o * n + j) * inner + in];
  return tape.record(out_shape, std::move(y), {x}, [x, outer, n, inner](std::span<const double> g) mutable {
    auto gx = x.grad_buffer();
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t j = 0; j < n; ++j)
        for (std::size_t in = 0; in < inner; ++in) gx[(o * n + j) * inner + in] += g[o * inner + in];
  });
}

Tensor mean(Tape& tape, const Tensor& x) { return scale(tape, sum(tape, x), 1.0 / static_cast<double>(x.size())); }

Tensor mean(Tape& tape, const Tensor& x, int axis, bool keepdim) {
  const double n = static_cast<double>(x.dim(axis));
  return scale(tape, sum(tape, x, axis, keepdim), 1.0 / n);
}

Tensor concat(Tape& tape, std::span<const Tensor> parts, int axis) {
  if (parts.empty()) throw DimensionError("concat of zero tensors");
  const Shape& s0 = parts[0].shape();
  const std::size_t ax = norm_axis(axis, s0.size());
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    if (s.size() != s0.size()) throw DimensionError("concat: rank mismatch " + to_string(s) + " vs " + to_string(s0));
    for (std::size_t d = 0; d < s.size(); ++d)
      if (d != ax && s[d] != s0[d]) throw DimensionError("concat: shape mismatch " + to_string(s) + " vs " + to_string(s0));
    widths.push_back(s[ax]);
    total += s[ax];
  }
  const std::size_t outer = prod(s0, 0, ax), inner = prod(s0, ax + 1, s0.size());
  Shape out_shape = s0;
  out_shape[ax] = total;
  std::vector<double> y(outer * total * inner);
  std::size_t offset = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const auto v = parts[p].data();
    const std::size_t chunk = widths[p] * inner;
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(v.begin() + static_cast<std::ptrdiff_t>(o * chunk), chunk,
                  y.begin() + static_cast<std::ptrdiff_t>(o * total * inner + offset * inner));
    offset += widths[p];
  }
  std::vector<Tensor> held(parts.begin(), parts.end());
  return tape.record(out_shape, std::move(y), parts, [held, widths, outer, total, inner](std::span<const double> g) mutable {
    std::size_t offset = 0;
    for (std::size_t p = 0; p < held.size(); ++p) {
      const std::size_t chunk = widths[p] * inner;
      if (held[p].requires_grad()) {
        auto gp = held[p].grad_buffer();
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t i = 0; i < chunk; ++i) gp[o * chunk + i] += g[o * total * inner + offset * inner + i];
      }
      offset += widths[p];
    }
  });
}

Tensor concat(Tape& tape, std::initializer_list<Tensor> parts, int axis) {
  return concat(tape, std::span<const Tensor>(parts.begin(), parts.size()), axis);
}

Tensor slice(Tape& tape, const Tensor& x, int axis, std::size_t begin, std::size_t end) {
  const std::size_t ax = norm_axis(axis, x.rank());
  const Shape& s = x.shape();
  if (begin > end || end > s[ax])
    throw DimensionError("slice [" + std::to_string(begin) + "," + std::to_string(end) + ") out of range for " + to_string(s));
  const std::size_t outer = prod(s, 0, ax), n = s[ax], inner = prod(s, ax + 1, s.size());
  const std::size_t w = end - begin;
  Shape out_shape = s;
  out_shape[ax] = w;
  const auto xv = x.data();
  std::vector<double> y(outer * w * inner);
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>((o * n + begin) * inner), w * inner,
                y.begin() + static_cast<std::ptrdiff_t>(o * w * inner));
  return tape.record(out_shape, std::move(y), {x}, [x, outer, n, inner, begin, w](std::span<const double> g) mutable {
    auto gx = x.grad_buffer();
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t i = 0; i < w * inner; ++i) gx[(o * n + begin) * inner + i] += g[o * w * inner + i];
  });
}

Tensor permute(Tape& tape, const Tensor& x, std::span<const std::size_t> axes) {
  const Shape& s = x.shape();
  if (axes.size() != s.size()) throw DimensionError("permute: " + std::to_string(axes.size()) + " axes for " + to_string(s));
  std::vector<bool> seen(s.size(), false);
  Shape out_shape(s.size());
  std::vector<std::size_t> in_strides(s.size());
  {
    std::size_t st = 1;
    for (std::size_t d = s.size(); d-- > 0;) {
      in_strides[d] = st;
      st *= s[d];
    }
  }
  std::vector<std::size_t> st(s.size());
  for (std::size_t i = 0; i < axes.size(); ++i) {
    if (axes[i] >= s.size() || seen[axes[i]]) throw DimensionError("permute: invalid axis list");
    seen[axes[i]] = true;
    out_shape[i] = s[axes[i]];
    st[i] = in_strides[axes[i]];
  }
  auto src = std::make_shared<std::vector<std::size_t>>(offsets(out_shape, st));
  const auto xv = x.data();
  std::vector<double> y(xv.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = xv[(*src)[i]];
  return tape.record(out_shape, std::move(y), {x}, [x, src](std::span<const double> g) mutable {
    auto gx = x.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) gx[(*src)[i]] += g[i];
  });
}

Tensor permute(Tape& tape, const Tensor& x, std::initializer_list<std::size_t> axes) {
  return permute(tape, x, std::span<const std::size_t>(axes.begin(), axes.size()));
}

Tensor transpose(Tape& tape, const Tensor& x) {
  if (x.rank() < 2) throw DimensionError("transpose needs rank >= 2, got " + to_string(x.shape()));
  std::vector<std::size_t> axes(x.rank());
  std::iota(axes.begin(), axes.end(), std::size_t{0});
  std::swap(axes[axes.size() - 1], axes[axes.size() - 2]);
  return permute(tape, x, axes);
}

Tensor reshape(Tape& tape, const Tensor& x, Shape shape) {
  if (numel(shape) != x.size()) throw DimensionError("reshape " + to_string(x.shape()) + " -> " + to_string(shape));
  const auto xv = x.data();
  return tape.record(std::move(shape), std::vector<double>(xv.begin(), xv.end()), {x}, [x](std::span<const double> g) mutable {
    auto gx = x.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

Tensor expand(Tape& tape, const Tensor& x, Shape shape) {
  if (broadcast_shape(x.shape(), shape) != shape)
    throw DimensionError("expand " + to_string(x.shape()) + " -> " + to_string(shape));
  auto src = std::make_shared<std::vector<std::size_t>>(offsets(shape, strides_in(x.shape(), shape)));
  const auto xv = x.data();
  std::vector<double> y(src->size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = xv[(*src)[i]];
  return tape.record(std::move(shape), std::move(y), {x}, [x, src](std::span<const double> g) mutable {
    auto gx = x.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) gx[(*src)[i]] += g[i];
  });
}

Tensor mse(Tape& tape, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw DimensionError("mse: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  const auto av = a.data();
  const auto bv = b.data();
  const double inv_n = 1.0 / static_cast<double>(av.size());
  double s = 0.0;
  for (std::size_t i = 0; i < av.size(); ++i) s += (av[i] - bv[i]) * (av[i] - bv[i]);
  return tape.record({}, {s * inv_n}, {a, b}, [a, b, inv_n](std::span<const double> g) mutable {
    const auto av = a.data();
    const auto bv = b.data();
    const double c = 2.0 * inv_n * g[0];
    if (a.requires_grad()) {
      auto ga = a.grad_buffer();
      for (std::size_t i = 0; i < av.size(); ++i) ga[i] += c * (av[i] - bv[i]);
    }
    if (b.requires_grad()) {
      auto gb = b.grad_buffer();
      for (std::size_t i = 0; i < av.size(); ++i) gb[i] -= c * (av[i] - bv[i]);
    }
  });
}

Tensor normalize_max(Tape& tape, const Tensor& x) {
  if (x.rank() < 1) throw DimensionError("normalize_max on a scalar");
  const std::size_t n = x.dim(-1);
  const std::size_t rows = n == 0 ? 0 : x.size() / n;
  const auto xv = x.data();
  auto argmax = std::make_shared<std::vector<std::size_t>>(rows);
  auto maxv = std::make_shared<std::vector<double>>(rows);
  std::vector<double> y(xv.begin(), xv.end());
  for (std::size_t r = 0; r < rows; ++r) {
    const auto first = xv.begin() + static_cast<std::ptrdiff_t>(r * n);
    const auto it = std::max_element(first, first + static_cast<std::ptrdiff_t>(n));
    (*argmax)[r] = static_cast<std::size_t>(it - first);
    (*maxv)[r] = *it;
    if (*it > 0.0)
      for (std::size_t j = 0; j < n; ++j) y[r * n + j] /= *it;
  }
  return tape.record(x.shape(), std::move(y), {x}, [x, argmax, maxv, n, rows](std::span<const double> g) mutable {
    const auto xv = x.data();
    auto gx = x.grad_buffer();
    for (std::size_t r = 0; r < rows; ++r) {
      const double m = (*maxv)[r];
      if (m <= 0.0) {
        for (std::size_t j = 0; j < n; ++j) gx[r * n + j] += g[r * n + j];
        continue;
      }
      double gdotx = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        gx[r * n + j] += g[r * n + j] / m;
        gdotx += g[r * n + j] * xv[r * n + j];
      }
      gx[r * n + (*argmax)[r]] -= gdotx / (m * m);
    }
  });
}

}  // namespace fedsim::ops
