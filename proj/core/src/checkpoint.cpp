#include "guidedseg/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "guidedseg/errors.hpp"

namespace guidedseg::autodiff {

namespace {

constexpr char kMagic[4] = {'G', 'N', 'C', 'K'};

void put_u32_le(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32_le(const std::uint8_t* p) {
  return std::uint32_t(p[0]) | (std::uint32_t(p[1]) << 8) |
         (std::uint32_t(p[2]) << 16) | (std::uint32_t(p[3]) << 24);
}

void put_f32_le(std::vector<std::uint8_t>& out, float f) {
  put_u32_le(out, std::bit_cast<std::uint32_t>(f));
}

[[noreturn]] void format_error(const std::string& what) {
  throw Error(ErrorCode::kFormat, "checkpoint: " + what);
}

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& checkpoint) {
  nlohmann::json manifest;
  manifest["config"] = checkpoint.config;
  manifest["metadata"] = checkpoint.metadata;
  nlohmann::json tensors = nlohmann::json::array();
  for (const auto& [name, tensor] : checkpoint.tensors) {
    tensors.push_back({{"name", name}, {"shape", tensor.shape()}, {"dtype", "f32"}});
  }
  manifest["tensors"] = std::move(tensors);
  const std::string text = manifest.dump();

  std::vector<std::uint8_t> out(std::begin(kMagic), std::end(kMagic));
  out.push_back(kCheckpointVersion);
  put_u32_le(out, static_cast<std::uint32_t>(text.size()));
  out.insert(out.end(), text.begin(), text.end());
  for (const auto& named : checkpoint.tensors) {
    for (float v : named.tensor.data()) put_f32_le(out, v);
  }
  return out;
}

Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 9 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    format_error("missing GNCK magic");
  }
  if (bytes[4] != kCheckpointVersion) {
    format_error("unsupported version " + std::to_string(bytes[4]));
  }
  const std::uint32_t length = get_u32_le(bytes.data() + 5);
  if (bytes.size() < 9 + std::size_t(length)) format_error("truncated manifest");
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(bytes.begin() + 9,
                                     bytes.begin() + 9 + length);
  } catch (const nlohmann::json::exception& e) {
    format_error(std::string("manifest is not valid JSON: ") + e.what());
  }
  if (!manifest.is_object() || !manifest.contains("tensors") ||
      !manifest["tensors"].is_array()) {
    format_error("manifest lacks a tensors array");
  }
  Checkpoint checkpoint;
  checkpoint.config = manifest.value("config", nlohmann::json::object());
  checkpoint.metadata = manifest.value("metadata", nlohmann::json::object());

  std::size_t offset = 9 + std::size_t(length);
  for (const auto& entry : manifest["tensors"]) {
    if (entry.value("dtype", "") != "f32") format_error("unsupported dtype");
    Shape shape;
    try {
      shape = entry.at("shape").get<Shape>();
    } catch (const nlohmann::json::exception&) {
      format_error("tensor entry without a shape");
    }
    const std::size_t n = numel_of(shape);
    if (offset + 4 * n > bytes.size()) format_error("truncated payload");
    std::vector<float> values(n);
    for (std::size_t i = 0; i < n; ++i) {
      values[i] = std::bit_cast<float>(get_u32_le(bytes.data() + offset + 4 * i));
    }
    offset += 4 * n;
    checkpoint.tensors.push_back(
        {entry.value("name", ""), Tensor(std::move(shape), std::move(values))});
  }
  if (offset != bytes.size()) format_error("trailing bytes after payload");
  return checkpoint;
}

void write_checkpoint(const std::filesystem::path& path,
                      const Checkpoint& checkpoint) {
  const auto bytes = encode_checkpoint(checkpoint);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) format_error("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) format_error("failed writing " + path.string());
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw Error(ErrorCode::kNotFound, "checkpoint " + path.string() + " not found");
  }
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  try {
    return decode_checkpoint(bytes);
  } catch (const Error& e) {
    throw Error(e.code(), std::string(e.what()) + " (" + path.string() + ")");
  }
}

}  // namespace guidedseg::autodiff
