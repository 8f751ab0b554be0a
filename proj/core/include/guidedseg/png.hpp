#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "guidedseg/tensor.hpp"

namespace guidedseg::io {

/// 8-bit interleaved pixels, 1 (gray) or 3 (RGB) channels.
struct Image8 {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<std::uint8_t> pixels;

  friend bool operator==(const Image8&, const Image8&) = default;
};

std::vector<std::uint8_t> encode_png(const Image8& image);

/// Decodes to RGB, or to gray when `channels` is 1. Alpha is composited on
/// black. Throws Error(kFormat) on malformed data.
Image8 decode_png(std::span<const std::uint8_t> bytes, int channels);

/// True when the encoded image stores no color information.
bool png_is_gray(std::span<const std::uint8_t> bytes);

/// [3, H, W] tensor with values q / 255.
autodiff::Tensor image_to_tensor(const Image8& rgb);
/// Inverse of image_to_tensor; values are clamped to [0, 1] and rounded.
Image8 tensor_to_image(const autodiff::Tensor& image);

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path);
void write_bytes(const std::filesystem::path& path,
                 std::span<const std::uint8_t> bytes);

}  // namespace guidedseg::io
