#pragma once

#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

namespace guidedseg::model {

enum class Fusion { kLate, kEarly };
enum class Locality { kGlobalPool, kIdentity };
enum class Head { kFeatureFusion, kParamRegression, kPrototype };

struct LayerSpec {
  int channels = 0;
  int kernel = 3;
  int stride = 1;

  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

/// Architecture of a guided network. A checkpoint stores this verbatim, so
/// it fully determines which parameter groups exist.
struct GuidanceConfig {
  Fusion fusion = Fusion::kLate;
  Locality locality = Locality::kGlobalPool;
  Head head = Head::kFeatureFusion;
  // false selects the unguided foreground-background segmentor.
  bool guided = true;
  std::vector<LayerSpec> encoder = {{16, 3, 2}, {32, 3, 2}, {32, 3, 1}};
  int decoder_width = 32;
  int image_channels = 3;
  float temperature = 1.0f;

  int feature_stride() const;
  int feature_channels() const;

  /// Throws Error(kConfiguration) on inconsistent settings.
  void validate() const;

  friend bool operator==(const GuidanceConfig&, const GuidanceConfig&) = default;
};

std::string_view to_string(Fusion v);
std::string_view to_string(Locality v);
std::string_view to_string(Head v);
Fusion parse_fusion(std::string_view text);
Locality parse_locality(std::string_view text);
Head parse_head(std::string_view text);

nlohmann::json to_json(const GuidanceConfig& config);
GuidanceConfig config_from_json(const nlohmann::json& j);

}  // namespace guidedseg::model
