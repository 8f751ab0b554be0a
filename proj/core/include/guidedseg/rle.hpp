#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "guidedseg/model.hpp"

namespace guidedseg {

/// Row-major runs [value, run, value, run, ...] starting with the value of
/// pixel (0, 0). Adjacent runs alternate values; runs sum to width * height.
std::vector<std::uint32_t> encode_rle(const model::BinaryMask& mask);

/// Throws Error(kFormat) when values are not 0/1, a run is empty, or the
/// runs do not cover height * width pixels.
model::BinaryMask decode_rle(std::span<const std::uint32_t> rle, int height,
                             int width);

}  // namespace guidedseg
