#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace fedsim::image {

// Linear operator of bilinear resampling (half-pixel centers, edge clamped),
// as a row-major [in_h*in_w x out_h*out_w] matrix so that out = in * M.
std::vector<double> bilinear_operator(std::size_t in_h, std::size_t in_w, std::size_t out_h, std::size_t out_w);

// Resizes an interleaved [h*w*channels] image.
std::vector<double> resize_bilinear(std::span<const double> pixels, std::size_t h, std::size_t w, std::size_t channels,
                                    std::size_t out_h, std::size_t out_w);

}  // namespace fedsim::image
