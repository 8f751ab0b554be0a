#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "guidedseg/tensor.hpp"

namespace guidedseg::autodiff {

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

/// On-disk layout:
///   "GNCK" | version byte (1) | u32 LE manifest length | UTF-8 JSON manifest
///   | raw little-endian float32 payloads in manifest order.
///
/// The manifest is {"config": ..., "metadata": ..., "tensors": [{name, shape,
/// dtype: "f32"}, ...]}.
struct Checkpoint {
  nlohmann::json config = nlohmann::json::object();
  nlohmann::json metadata = nlohmann::json::object();
  std::vector<NamedTensor> tensors;
};

inline constexpr std::uint8_t kCheckpointVersion = 1;

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& checkpoint);
Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes);

void write_checkpoint(const std::filesystem::path& path,
                      const Checkpoint& checkpoint);
Checkpoint read_checkpoint(const std::filesystem::path& path);

}  // namespace guidedseg::autodiff
