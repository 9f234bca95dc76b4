#include "fedsim/image.hpp"

#include <algorithm>
#include <cmath>

#include "fedsim/errors.hpp"

namespace fedsim::image {
namespace {

struct Tap {
  std::size_t lo, hi;
  double w_hi;
};

Tap tap(std::size_t dst, std::size_t in, std::size_t out) {
  double src = (static_cast<double>(dst) + 0.5) * static_cast<double>(in) / static_cast<double>(out) - 0.5;
  src = std::clamp(src, 0.0, static_cast<double>(in - 1));
  const auto lo = static_cast<std::size_t>(std::floor(src));
  const std::size_t hi = std::min(lo + 1, in - 1);
  return {lo, hi, src - static_cast<double>(lo)};
}

}  // namespace

std::vector<double> bilinear_operator(std::size_t in_h, std::size_t in_w, std::size_t out_h, std::size_t out_w) {
  if (in_h == 0 || in_w == 0 || out_h == 0 || out_w == 0) throw DimensionError("bilinear_operator: empty grid");
  const std::size_t n_out = out_h * out_w;
  std::vector<double> m(in_h * in_w * n_out, 0.0);
  for (std::size_t y = 0; y < out_h; ++y) {
    const Tap ty = tap(y, in_h, out_h);
    for (std::size_t x = 0; x < out_w; ++x) {
      const Tap tx = tap(x, in_w, out_w);
      const std::size_t o = y * out_w + x;
      m[(ty.lo * in_w + tx.lo) * n_out + o] += (1.0 - ty.w_hi) * (1.0 - tx.w_hi);
      m[(ty.lo * in_w + tx.hi) * n_out + o] += (1.0 - ty.w_hi) * tx.w_hi;
      m[(ty.hi * in_w + tx.lo) * n_out + o] += ty.w_hi * (1.0 - tx.w_hi);
      m[(ty.hi * in_w + tx.hi) * n_out + o] += ty.w_hi * tx.w_hi;
    }
  }
  return m;
}

std::vector<double> resize_bilinear(std::span<const double> pixels, std::size_t h, std::size_t w, std::size_t channels,
                                    std::size_t out_h, std::size_t out_w) {
  if (pixels.size() != h * w * channels) throw DimensionError("resize_bilinear: pixel count does not match geometry");
  if (h == out_h && w == out_w) return {pixels.begin(), pixels.end()};
  std::vector<double> out(out_h * out_w * channels, 0.0);
  for (std::size_t y = 0; y < out_h; ++y) {
    const Tap ty = tap(y, h, out_h);
    for (std::size_t x = 0; x < out_w; ++x) {
      const Tap tx = tap(x, w, out_w);
      for (std::size_t c = 0; c < channels; ++c) {
        auto px = [&](std::size_t yy, std::size_t xx) { return pixels[(yy * w + xx) * channels + c]; };
        out[(y * out_w + x) * channels + c] = (1.0 - ty.w_hi) * ((1.0 - tx.w_hi) * px(ty.lo, tx.lo) + tx.w_hi * px(ty.lo, tx.hi)) +
                                              ty.w_hi * ((1.0 - tx.w_hi) * px(ty.hi, tx.lo) + tx.w_hi * px(ty.hi, tx.hi));
      }
    }
  }
  return out;
}

}  // namespace fedsim::image
