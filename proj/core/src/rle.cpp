#include "guidedseg/rle.hpp"

#include <string>

#include "guidedseg/errors.hpp"

namespace guidedseg {

std::vector<std::uint32_t> encode_rle(const model::BinaryMask& mask) {
  std::vector<std::uint32_t> out;
  if (mask.data.empty()) return out;
  std::uint8_t value = mask.data[0] ? 1 : 0;
  std::uint32_t run = 0;
  for (std::uint8_t v : mask.data) {
    const std::uint8_t b = v ? 1 : 0;
    if (b != value) {
      out.push_back(value);
      out.push_back(run);
      value = b;
      run = 0;
    }
    ++run;
  }
  out.push_back(value);
  out.push_back(run);
  return out;
}

model::BinaryMask decode_rle(std::span<const std::uint32_t> rle, int height, int width) {
  if (height < 1 || width < 1) throw Error(ErrorCode::kFormat, "rle: mask size must be positive");
  if (rle.size() % 2 != 0) throw Error(ErrorCode::kFormat, "rle: odd number of entries");
  model::BinaryMask mask{height, width, {}};
  const std::size_t total = static_cast<std::size_t>(height) * width;
  mask.data.reserve(total);
  for (std::size_t i = 0; i < rle.size(); i += 2) {
    const std::uint32_t value = rle[i], run = rle[i + 1];
    if (value > 1) throw Error(ErrorCode::kFormat, "rle: value " + std::to_string(value) + " is not 0 or 1");
    if (run == 0) throw Error(ErrorCode::kFormat, "rle: empty run at entry " + std::to_string(i + 1));
    if (run > total - mask.data.size()) throw Error(ErrorCode::kFormat, "rle: runs exceed the mask size");
    mask.data.insert(mask.data.end(), run, static_cast<std::uint8_t>(value));
  }
  if (mask.data.size() != total) {
    throw Error(ErrorCode::kFormat, "rle: runs cover " + std::to_string(mask.data.size()) + " of " +
                                        std::to_string(total) + " pixels");
  }
  return mask;
}

}  // namespace guidedseg
