#include "guidedseg/config.hpp"

#include "guidedseg/errors.hpp"

namespace guidedseg::model {

int GuidanceConfig::feature_stride() const {
  int stride = 1;
  for (const auto& layer : encoder) stride *= layer.stride;
  return stride;
}

int GuidanceConfig::feature_channels() const {
  return encoder.empty() ? 0 : encoder.back().channels;
}

void GuidanceConfig::validate() const {
  auto fail = [](const std::string& what) {
    throw Error(ErrorCode::kConfiguration, what);
  };
  if (encoder.empty()) fail("encoder needs at least one layer");
  for (const auto& layer : encoder) {
    if (layer.channels < 1 || layer.kernel < 1 || layer.kernel % 2 == 0 ||
        layer.stride < 1) {
      fail("encoder layers need positive channels, odd kernels, stride >= 1");
    }
  }
  if (decoder_width < 1) fail("decoder width must be positive");
  if (image_channels < 1) fail("image channels must be positive");
  if (!(temperature > 0.0f)) fail("prototype temperature must be > 0");
  if (!guided) return;
  if (fusion == Fusion::kEarly) {
    if (head != Head::kFeatureFusion) fail("early fusion supports the feature-fusion head only");
    if (locality != Locality::kGlobalPool) fail("early fusion pools globally");
  }
  if (locality == Locality::kIdentity && head != Head::kFeatureFusion) {
    fail("identity locality requires the feature-fusion head");
  }
}

std::string_view to_string(Fusion v) {
  return v == Fusion::kLate ? "late" : "early";
}

std::string_view to_string(Locality v) {
  return v == Locality::kGlobalPool ? "global" : "identity";
}

std::string_view to_string(Head v) {
  switch (v) {
    case Head::kFeatureFusion: return "fusion";
    case Head::kParamRegression: return "regress";
    case Head::kPrototype: return "proto";
  }
  return "fusion";
}

Fusion parse_fusion(std::string_view text) {
  if (text == "late") return Fusion::kLate;
  if (text == "early") return Fusion::kEarly;
  throw Error(ErrorCode::kConfiguration, "unknown fusion '" + std::string(text) + "'");
}

Locality parse_locality(std::string_view text) {
  if (text == "global") return Locality::kGlobalPool;
  if (text == "identity") return Locality::kIdentity;
  throw Error(ErrorCode::kConfiguration, "unknown locality '" + std::string(text) + "'");
}

Head parse_head(std::string_view text) {
  if (text == "fusion") return Head::kFeatureFusion;
  if (text == "regress") return Head::kParamRegression;
  if (text == "proto") return Head::kPrototype;
  throw Error(ErrorCode::kConfiguration, "unknown head '" + std::string(text) + "'");
}

nlohmann::json to_json(const GuidanceConfig& config) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : config.encoder) {
    layers.push_back({{"channels", l.channels}, {"kernel", l.kernel}, {"stride", l.stride}});
  }
  return {
      {"fusion", to_string(config.fusion)},
      {"locality", to_string(config.locality)},
      {"head", to_string(config.head)},
      {"guided", config.guided},
      {"encoder", layers},
      {"feature_stride", config.feature_stride()},
      {"decoder_width", config.decoder_width},
      {"image_channels", config.image_channels},
      {"temperature", config.temperature},
  };
}

GuidanceConfig config_from_json(const nlohmann::json& j) {
  GuidanceConfig config;
  try {
    config.fusion = parse_fusion(j.at("fusion").get<std::string>());
    config.locality = parse_locality(j.at("locality").get<std::string>());
    config.head = parse_head(j.at("head").get<std::string>());
    config.guided = j.value("guided", true);
    config.encoder.clear();
    for (const auto& l : j.at("encoder")) {
      config.encoder.push_back({l.at("channels").get<int>(), l.at("kernel").get<int>(),
                                l.at("stride").get<int>()});
    }
    config.decoder_width = j.value("decoder_width", 32);
    config.image_channels = j.value("image_channels", 3);
    config.temperature = j.value("temperature", 1.0f);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kConfiguration, std::string("malformed guidance config: ") + e.what());
  }
  if (j.contains("feature_stride") &&
      j["feature_stride"].get<int>() != config.feature_stride()) {
    throw Error(ErrorCode::kConfiguration,
                "feature_stride does not match the product of encoder strides");
  }
  config.validate();
  return config;
}

}  // namespace guidedseg::model
