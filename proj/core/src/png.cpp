#include "guidedseg/png.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>

#include "guidedseg/errors.hpp"

namespace guidedseg::io {

namespace {

[[noreturn]] void format_error(const std::string& what) {
  throw Error(ErrorCode::kFormat, what);
}

png_uint_32 format_for(int channels) {
  if (channels == 1) return PNG_FORMAT_GRAY;
  if (channels == 3) return PNG_FORMAT_RGB;
  throw Error(ErrorCode::kInvalidShape,
              "png images have 1 or 3 channels, got " + std::to_string(channels));
}

void begin_read(png_image& image, std::span<const std::uint8_t> bytes) {
  std::memset(&image, 0, sizeof image);
  image.version = PNG_IMAGE_VERSION;
  if (bytes.empty() || !png_image_begin_read_from_memory(&image, bytes.data(), bytes.size())) {
    std::string msg = bytes.empty() ? "empty png data" : image.message;
    png_image_free(&image);
    format_error("png decode: " + msg);
  }
}

}  // namespace

std::vector<std::uint8_t> encode_png(const Image8& image) {
  const png_uint_32 format = format_for(image.channels);
  if (image.width < 1 || image.height < 1 ||
      image.pixels.size() != static_cast<std::size_t>(image.width) * image.height * image.channels) {
    throw Error(ErrorCode::kInvalidShape, "png encode: pixel buffer does not match size");
  }
  png_image png;
  std::memset(&png, 0, sizeof png);
  png.version = PNG_IMAGE_VERSION;
  png.width = static_cast<png_uint_32>(image.width);
  png.height = static_cast<png_uint_32>(image.height);
  png.format = format;

  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&png, nullptr, &size, 0, image.pixels.data(), 0, nullptr)) {
    format_error(std::string("png encode: ") + png.message);
  }
  std::vector<std::uint8_t> out(size);
  if (!png_image_write_to_memory(&png, out.data(), &size, 0, image.pixels.data(), 0, nullptr)) {
    format_error(std::string("png encode: ") + png.message);
  }
  out.resize(size);
  return out;
}

Image8 decode_png(std::span<const std::uint8_t> bytes, int channels) {
  const png_uint_32 format = format_for(channels);
  png_image png;
  begin_read(png, bytes);
  png.format = format;
  Image8 out;
  out.width = static_cast<int>(png.width);
  out.height = static_cast<int>(png.height);
  out.channels = channels;
  out.pixels.resize(PNG_IMAGE_SIZE(png));
  png_color black{0, 0, 0};
  if (!png_image_finish_read(&png, &black, out.pixels.data(), 0, nullptr)) {
    std::string msg = png.message;
    png_image_free(&png);
    format_error("png decode: " + msg);
  }
  return out;
}

bool png_is_gray(std::span<const std::uint8_t> bytes) {
  png_image png;
  begin_read(png, bytes);
  const bool gray = (png.format & PNG_FORMAT_FLAG_COLOR) == 0;
  png_image_free(&png);
  return gray;
}

autodiff::Tensor image_to_tensor(const Image8& rgb) {
  if (rgb.channels != 3) {
    throw Error(ErrorCode::kInvalidShape, "expected an RGB image");
  }
  const std::size_t plane = static_cast<std::size_t>(rgb.width) * rgb.height;
  std::vector<float> v(3 * plane);
  for (std::size_t i = 0; i < plane; ++i)
    for (int c = 0; c < 3; ++c) v[c * plane + i] = static_cast<float>(rgb.pixels[3 * i + c]) / 255.0f;
  return autodiff::Tensor({3, rgb.height, rgb.width}, std::move(v));
}

Image8 tensor_to_image(const autodiff::Tensor& image) {
  if (image.rank() != 3 || image.dim(0) != 3) {
    throw Error(ErrorCode::kInvalidShape, "expected a [3, H, W] image, got " + autodiff::to_string(image.shape()));
  }
  Image8 out{image.dim(2), image.dim(1), 3, {}};
  const std::size_t plane = static_cast<std::size_t>(out.width) * out.height;
  out.pixels.resize(3 * plane);
  const auto d = image.data();
  for (std::size_t i = 0; i < plane; ++i)
    for (int c = 0; c < 3; ++c) {
      const float v = std::clamp(d[c * plane + i], 0.0f, 1.0f);
      out.pixels[3 * i + c] = static_cast<std::uint8_t>(std::lround(v * 255.0f));
    }
  return out;
}

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kNotFound, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::kFormat, "cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorCode::kFormat, "failed writing " + path.string());
}

}  // namespace guidedseg::io
