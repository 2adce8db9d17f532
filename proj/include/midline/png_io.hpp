#pragma once

#include <string>

#include "midline/tensor.hpp"

namespace midline::io {

/// 16-bit grayscale PNG. Intensities in [0,1] map to the full 16-bit
/// range; values outside are clamped on write.
void write_png16(const std::string& path, const ad::Tensor<double>& img);
ad::Tensor<double> read_png16(const std::string& path);

}  // namespace midline::io
