#include "guidedseg/model.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "guidedseg/errors.hpp"

namespace guidedseg::model {

using autodiff::Checkpoint;
using autodiff::NamedTensor;
namespace ops = autodiff;

namespace {

bool needs_decoder(const GuidanceConfig& config) {
  return !config.guided || config.head == Head::kFeatureFusion;
}

int guide_channels(const GuidanceConfig& config) {
  if (!config.guided || config.head != Head::kFeatureFusion) return 0;
  const int c = config.feature_channels();
  return config.fusion == Fusion::kLate ? 2 * c : c;
}

struct ParamLayout {
  std::string name;
  autodiff::Shape shape;
  int fan_in = 0;   // 0 marks a bias
  int fan_out = 0;
};

std::vector<ParamLayout> layout_for(const GuidanceConfig& config) {
  std::vector<ParamLayout> out;
  auto add_encoder = [&](const std::string& prefix, int in_channels) {
    int cin = in_channels;
    for (std::size_t i = 0; i < config.encoder.size(); ++i) {
      const auto& l = config.encoder[i];
      const std::string base = prefix + "." + std::to_string(i);
      out.push_back({base + ".weight", {l.channels, cin, l.kernel, l.kernel},
                     cin * l.kernel * l.kernel, l.channels * l.kernel * l.kernel});
      out.push_back({base + ".bias", {l.channels}});
      cin = l.channels;
    }
  };
  add_encoder("encoder", config.image_channels);
  if (config.guided && config.fusion == Fusion::kEarly) {
    add_encoder("early_encoder", config.image_channels + 2);
  }
  const int c = config.feature_channels();
  const int w = config.decoder_width;
  if (needs_decoder(config)) {
    const int g = guide_channels(config);
    const int fan_in = (c + g) * 9;
    out.push_back({"decoder.0.weight", {w, c, 3, 3}, fan_in, w * 9});
    if (g > 0) out.push_back({"decoder.0.guide_weight", {w, g, 3, 3}, fan_in, w * 9});
    out.push_back({"decoder.0.bias", {w}});
    out.push_back({"decoder.1.weight", {w, w, 3, 3}, w * 9, w * 9});
    out.push_back({"decoder.1.bias", {w}});
    out.push_back({"decoder.2.weight", {2, w, 1, 1}, w, 2});
    out.push_back({"decoder.2.bias", {2}});
  }
  if (config.guided && config.head == Head::kParamRegression) {
    const int in = 2 * c + 2;
    out.push_back({"regressor.hidden.weight", {2 * c, in}, in, 2 * c});
    out.push_back({"regressor.hidden.bias", {2 * c}});
    out.push_back({"regressor.out.weight", {2 * c + 2, 2 * c}, 2 * c, 2 * c + 2});
    out.push_back({"regressor.out.bias", {2 * c + 2}});
  }
  return out;
}

Tensor run_encoder(const std::string& prefix, Tensor x, const ModelParams& params,
                   Tape* tape) {
  const auto& layers = params.config().encoder;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const std::string base = prefix + "." + std::to_string(i);
    x = ops::conv2d(x, params.at(base + ".weight"), params.at(base + ".bias"),
                    layers[i].stride, layers[i].kernel / 2, tape);
    x = ops::relu(x, tape);
  }
  return x;
}

void check_image(const Tensor& image, const GuidanceConfig& config) {
  if (!image.defined() || image.rank() != 3 || image.dim(0) != config.image_channels) {
    throw Error(ErrorCode::kInvalidShape,
                "image must be [" + std::to_string(config.image_channels) + ", H, W]");
  }
  const int stride = config.feature_stride();
  if (image.dim(1) % stride != 0 || image.dim(2) % stride != 0) {
    throw Error(ErrorCode::kContractViolation,
                "image size " + std::to_string(image.dim(1)) + "x" +
                    std::to_string(image.dim(2)) + " is not a multiple of the feature stride " +
                    std::to_string(stride) + "; pad before calling");
  }
}

Tensor decode_tail(const Tensor& first_preactivation, const ModelParams& params,
                   int image_h, int image_w, Tape* tape) {
  Tensor x = ops::relu(first_preactivation, tape);
  x = ops::conv2d(x, params.at("decoder.1.weight"), params.at("decoder.1.bias"), 1, 1, tape);
  x = ops::relu(x, tape);
  x = ops::conv2d(x, params.at("decoder.2.weight"), params.at("decoder.2.bias"), 1, 0, tape);
  return ops::bilinear_resize(x, image_h, image_w, tape);
}

}  // namespace

// ---------------------------------------------------------------------------
// ModelParams

ModelParams ModelParams::initialize(const GuidanceConfig& config, std::uint64_t seed) {
  config.validate();
  ModelParams params;
  params.config_ = config;
  std::mt19937_64 rng(seed);
  for (const auto& entry : layout_for(config)) {
    Tensor t(entry.shape, 0.0f);
    if (entry.fan_in > 0) {
      const float bound =
          std::sqrt(6.0f / static_cast<float>(entry.fan_in + entry.fan_out));
      std::uniform_real_distribution<float> dist(-bound, bound);
      for (float& v : t.data()) v = dist(rng);
    }
    params.params_.push_back({entry.name, t});
  }
  return params;
}

ModelParams ModelParams::from_checkpoint(const Checkpoint& checkpoint) {
  ModelParams params;
  params.config_ = config_from_json(checkpoint.config);
  for (const auto& entry : layout_for(params.config_)) {
    auto it = std::find_if(checkpoint.tensors.begin(), checkpoint.tensors.end(),
                           [&](const NamedTensor& n) { return n.name == entry.name; });
    if (it == checkpoint.tensors.end()) {
      throw Error(ErrorCode::kFormat, "checkpoint lacks parameter " + entry.name);
    }
    if (it->tensor.shape() != entry.shape) {
      throw Error(ErrorCode::kFormat, "parameter " + entry.name + " has shape " +
                                          autodiff::to_string(it->tensor.shape()) +
                                          ", expected " + autodiff::to_string(entry.shape));
    }
    params.params_.push_back({entry.name, it->tensor.detach()});
  }
  if (checkpoint.tensors.size() != params.params_.size()) {
    throw Error(ErrorCode::kFormat, "checkpoint has parameters the config does not use");
  }
  return params;
}

Checkpoint ModelParams::to_checkpoint(nlohmann::json metadata) const {
  Checkpoint checkpoint;
  checkpoint.config = to_json(config_);
  checkpoint.metadata = std::move(metadata);
  for (const auto& [name, tensor] : params_) {
    checkpoint.tensors.push_back({name, tensor.detach()});
  }
  return checkpoint;
}

bool ModelParams::contains(std::string_view name) const {
  return std::any_of(params_.begin(), params_.end(),
                     [&](const NamedTensor& n) { return n.name == name; });
}

const Tensor& ModelParams::at(std::string_view name) const {
  for (const auto& n : params_) {
    if (n.name == name) return n.tensor;
  }
  throw Error(ErrorCode::kConfiguration,
              "model has no parameter '" + std::string(name) + "'");
}

std::vector<Tensor> ModelParams::tensors() const {
  std::vector<Tensor> out;
  out.reserve(params_.size());
  for (const auto& n : params_) out.push_back(n.tensor);
  return out;
}

void ModelParams::set_requires_grad(bool value) {
  for (auto& n : params_) n.tensor.set_requires_grad(value);
}

ModelParams ModelParams::clone() const {
  ModelParams copy;
  copy.config_ = config_;
  for (const auto& n : params_) copy.params_.push_back({n.name, n.tensor.clone()});
  return copy;
}

bool ModelParams::all_finite() const {
  for (const auto& n : params_) {
    for (float v : n.tensor.data()) {
      if (!std::isfinite(v)) return false;
    }
  }
  return true;
}

double ModelParams::l2_norm() const {
  double acc = 0.0;
  for (const auto& n : params_) {
    for (float v : n.tensor.data()) acc += double(v) * v;
  }
  return std::sqrt(acc);
}

// ---------------------------------------------------------------------------
// Guidance

Tensor extract_features(const Tensor& image, const ModelParams& params, Tape* tape) {
  check_image(image, params.config());
  return run_encoder("encoder", image, params, tape);
}

AnnotationMasks rasterize_annotations(const AnnotationSet& annotations, int feature_h,
                                      int feature_w, int stride) {
  AnnotationMasks masks{Tensor({1, feature_h, feature_w}), Tensor({1, feature_h, feature_w})};
  auto pos = masks.positive.data();
  auto neg = masks.negative.data();
  for (const auto& p : annotations.points()) {
    const int r = p.row / stride;
    const int c = p.col / stride;
    if (p.row < 0 || p.col < 0 || r >= feature_h || c >= feature_w) {
      throw Error(ErrorCode::kContractViolation,
                  "annotation (" + std::to_string(p.row) + ", " + std::to_string(p.col) +
                      ") falls outside the " + std::to_string(feature_h) + "x" +
                      std::to_string(feature_w) + " feature grid");
    }
    auto& plane = p.label == Polarity::kPositive ? pos : neg;
    plane[static_cast<std::size_t>(r) * feature_w + c] = 1.0f;
  }
  return masks;
}

TaskRepresentation guide_late(const Tensor& features, const AnnotationMasks& masks,
                              Locality locality, Tape* tape) {
  TaskRepresentation rep;
  rep.feature_h = features.dim(1);
  rep.feature_w = features.dim(2);
  rep.shots_merged = 1;
  if (locality == Locality::kGlobalPool) {
    rep.kind = GuidanceKind::kGlobal;
    auto pos = ops::masked_average(features, masks.positive, tape);
    auto neg = ops::masked_average(features, masks.negative, tape);
    rep.z_pos = pos.mean;
    rep.pos_count = pos.count;
    rep.z_neg = neg.mean;
    rep.neg_count = neg.count;
  } else {
    rep.kind = GuidanceKind::kLocal;
    rep.g_pos = ops::elementwise_mul(features, masks.positive, tape);
    rep.g_neg = ops::elementwise_mul(features, masks.negative, tape);
    float pc = 0.0f, nc = 0.0f;
    for (float v : masks.positive.data()) pc += v;
    for (float v : masks.negative.data()) nc += v;
    rep.pos_count = pc;
    rep.neg_count = nc;
  }
  return rep;
}

TaskRepresentation guide_early(const Tensor& image, const AnnotationSet& annotations,
                               const ModelParams& params, Tape* tape) {
  const auto& config = params.config();
  if (!params.contains("early_encoder.0.weight")) {
    throw Error(ErrorCode::kConfiguration, "model has no early-fusion encoder");
  }
  check_image(image, config);
  const int h = image.dim(1), w = image.dim(2);
  if (annotations.height() != h || annotations.width() != w) {
    throw Error(ErrorCode::kContractViolation, "annotations do not match image size");
  }
  Tensor pos_plane({1, h, w}), neg_plane({1, h, w});
  for (const auto& p : annotations.points()) {
    auto plane = p.label == Polarity::kPositive ? pos_plane.data() : neg_plane.data();
    plane[static_cast<std::size_t>(p.row) * w + p.col] = 1.0f;
  }
  Tensor stacked = ops::concat_channels({image, pos_plane, neg_plane}, tape);
  Tensor features = run_encoder("early_encoder", stacked, params, tape);
  Tensor all({1, features.dim(1), features.dim(2)}, 1.0f);
  auto pooled = ops::masked_average(features, all, tape);

  TaskRepresentation rep;
  rep.kind = GuidanceKind::kGlobal;
  rep.z_pos = pooled.mean;
  rep.z_neg = pooled.mean;
  rep.pos_count = pooled.count;
  rep.neg_count = pooled.count;
  rep.feature_h = features.dim(1);
  rep.feature_w = features.dim(2);
  return rep;
}

TaskRepresentation merge_shots(std::span<const TaskRepresentation> reps, Tape* tape) {
  if (reps.empty()) {
    throw Error(ErrorCode::kContractViolation, "merge_shots needs at least one shot");
  }
  for (const auto& r : reps) {
    if (r.kind != GuidanceKind::kGlobal) {
      if (reps.size() == 1) return r;
      throw Error(ErrorCode::kContractViolation,
                  "local guidance belongs to a single image and cannot be merged");
    }
  }
  if (reps.size() == 1) return reps.front();

  std::vector<Tensor> pos, neg;
  std::vector<float> pos_w, neg_w;
  TaskRepresentation out;
  out.kind = GuidanceKind::kGlobal;
  out.feature_h = reps.front().feature_h;
  out.feature_w = reps.front().feature_w;
  out.shots_merged = 0;
  for (const auto& r : reps) {
    if (r.z_pos.shape() != reps.front().z_pos.shape()) {
      throw Error(ErrorCode::kInvalidShape, "merge_shots: channel widths differ");
    }
    pos.push_back(r.z_pos);
    neg.push_back(r.z_neg);
    pos_w.push_back(r.pos_count);
    neg_w.push_back(r.neg_count);
    out.pos_count += r.pos_count;
    out.neg_count += r.neg_count;
    out.shots_merged += r.shots_merged;
  }
  out.z_pos = ops::weighted_mean(pos, pos_w, tape);
  out.z_neg = ops::weighted_mean(neg, neg_w, tape);
  return out;
}

TaskRepresentation empty_guidance(const GuidanceConfig& config, int feature_h,
                                  int feature_w) {
  const int c = config.feature_channels();
  TaskRepresentation rep;
  rep.feature_h = feature_h;
  rep.feature_w = feature_w;
  if (config.locality == Locality::kIdentity) {
    rep.kind = GuidanceKind::kLocal;
    rep.g_pos = Tensor({c, feature_h, feature_w});
    rep.g_neg = Tensor({c, feature_h, feature_w});
  } else {
    rep.kind = GuidanceKind::kGlobal;
    rep.z_pos = Tensor({c});
    rep.z_neg = Tensor({c});
  }
  return rep;
}

namespace {

// Support items that are the query image itself reuse its features.
TaskRepresentation guide_sharing(std::span<const SupportItem> support, const ModelParams& params,
                                 Tape* tape, const Tensor* query, const Tensor* query_features) {
  const auto& config = params.config();
  if (support.empty()) {
    throw Error(ErrorCode::kContractViolation, "segment needs at least one support item");
  }
  std::vector<TaskRepresentation> reps;
  reps.reserve(support.size());
  for (const auto& item : support) {
    if (item.annotations.height() != item.image.dim(1) ||
        item.annotations.width() != item.image.dim(2)) {
      throw Error(ErrorCode::kContractViolation, "support annotations do not match image size");
    }
    if (config.fusion == Fusion::kEarly) {
      reps.push_back(guide_early(item.image, item.annotations, params, tape));
      continue;
    }
    Tensor features = query && item.image.shares_storage(*query)
                          ? *query_features
                          : extract_features(item.image, params, tape);
    auto masks = rasterize_annotations(item.annotations, features.dim(1), features.dim(2),
                                       config.feature_stride());
    reps.push_back(guide_late(features, masks, config.locality, tape));
  }
  return merge_shots(reps, tape);
}

}  // namespace

TaskRepresentation guide(std::span<const SupportItem> support, const ModelParams& params,
                         Tape* tape) {
  return guide_sharing(support, params, tape, nullptr, nullptr);
}

// ---------------------------------------------------------------------------
// Heads

QueryCache prepare_query_from_features(const Tensor& features, int image_h, int image_w,
                                       const ModelParams& params, Tape* tape) {
  QueryCache cache;
  cache.features = features;
  cache.image_h = image_h;
  cache.image_w = image_w;
  if (needs_decoder(params.config())) {
    cache.decoder_term = ops::conv2d(features, params.at("decoder.0.weight"),
                                     params.at("decoder.0.bias"), 1, 1, tape);
  }
  return cache;
}

QueryCache prepare_query(const Tensor& image, const ModelParams& params, Tape* tape) {
  Tensor features = extract_features(image, params, tape);
  return prepare_query_from_features(features, image.dim(1), image.dim(2), params, tape);
}

Tensor infer(const QueryCache& query, const TaskRepresentation& guidance,
             const ModelParams& params, Tape* tape) {
  const auto& config = params.config();
  if (!config.guided) {
    return decode_tail(query.decoder_term, params, query.image_h, query.image_w, tape);
  }
  switch (config.head) {
    case Head::kParamRegression:
      return infer_param_regression(query.features, guidance, params, query.image_h,
                                    query.image_w, tape);
    case Head::kPrototype:
      return infer_prototype(query.features, guidance, config.temperature, query.image_h,
                             query.image_w, tape);
    case Head::kFeatureFusion:
      break;
  }
  const int h = query.features.dim(1), w = query.features.dim(2);
  const Tensor& guide_weight = params.at("decoder.0.guide_weight");
  Tensor guide_term;
  if (guidance.kind == GuidanceKind::kLocal) {
    if (guidance.g_pos.dim(1) != h || guidance.g_pos.dim(2) != w) {
      throw Error(ErrorCode::kContractViolation,
                  "local guidance is " + std::to_string(guidance.g_pos.dim(1)) + "x" +
                      std::to_string(guidance.g_pos.dim(2)) + " but query features are " +
                      std::to_string(h) + "x" + std::to_string(w));
    }
    Tensor maps = ops::concat_channels({guidance.g_pos, guidance.g_neg}, tape);
    guide_term = ops::conv2d(maps, guide_weight, Tensor{}, 1, 1, tape);
  } else if (config.fusion == Fusion::kEarly) {
    guide_term = ops::conv2d_tiled(guidance.z_pos, guide_weight, h, w, 1, tape);
  } else {
    Tensor vec = ops::concat_vectors({guidance.z_pos, guidance.z_neg}, tape);
    guide_term = ops::conv2d_tiled(vec, guide_weight, h, w, 1, tape);
  }
  return decode_tail(ops::add(query.decoder_term, guide_term, tape), params, query.image_h,
                     query.image_w, tape);
}

Tensor infer_feature_fusion(const Tensor& query_features, const TaskRepresentation& guidance,
                            const ModelParams& params, int image_h, int image_w, Tape* tape) {
  if (!params.config().guided || params.config().head != Head::kFeatureFusion) {
    throw Error(ErrorCode::kConfiguration, "model does not use the feature-fusion head");
  }
  auto cache = prepare_query_from_features(query_features, image_h, image_w, params, tape);
  return infer(cache, guidance, params, tape);
}

Tensor infer_param_regression(const Tensor& query_features, const TaskRepresentation& guidance,
                              const ModelParams& params, int image_h, int image_w,
                              Tape* tape) {
  if (!params.contains("regressor.out.weight")) {
    throw Error(ErrorCode::kConfiguration, "model has no parameter regressor");
  }
  if (guidance.kind != GuidanceKind::kGlobal) {
    throw Error(ErrorCode::kContractViolation, "parameter regression needs global guidance");
  }
  const int c = query_features.dim(0);
  Tensor input = ops::concat_vectors(
      {guidance.z_pos, guidance.z_neg, Tensor::scalar(guidance.pos_count),
       Tensor::scalar(guidance.neg_count)},
      tape);
  Tensor hidden = ops::relu(ops::linear(input, params.at("regressor.hidden.weight"),
                                        params.at("regressor.hidden.bias"), tape),
                            tape);
  Tensor regressed = ops::linear(hidden, params.at("regressor.out.weight"),
                                 params.at("regressor.out.bias"), tape);
  Tensor kernel = ops::slice(regressed, 0, {2, c, 1, 1}, tape);
  Tensor bias = ops::slice(regressed, static_cast<std::size_t>(2 * c), {2}, tape);
  Tensor logits = ops::conv2d(query_features, kernel, bias, 1, 0, tape);
  return ops::bilinear_resize(logits, image_h, image_w, tape);
}

Tensor infer_prototype(const Tensor& query_features, const TaskRepresentation& guidance,
                       float temperature, int image_h, int image_w, Tape* tape) {
  if (guidance.kind != GuidanceKind::kGlobal) {
    throw Error(ErrorCode::kContractViolation, "prototype head needs global guidance");
  }
  if (guidance.pos_count <= 0.0f || guidance.neg_count <= 0.0f) {
    throw Error(ErrorCode::kDegenerateSupport,
                "prototype head needs both positive and negative annotations");
  }
  const int c = query_features.dim(0);
  Tensor protos = ops::slice(ops::concat_vectors({guidance.z_neg, guidance.z_pos}, tape), 0,
                             {2, c}, tape);
  Tensor logits = ops::prototype_logits(query_features, protos, temperature, tape);
  return ops::bilinear_resize(logits, image_h, image_w, tape);
}

BinaryMask argmax_mask(const Tensor& logits) {
  if (logits.rank() != 3 || logits.dim(0) != 2) {
    throw Error(ErrorCode::kInvalidShape, "argmax_mask expects [2, H, W] logits");
  }
  BinaryMask mask;
  mask.height = logits.dim(1);
  mask.width = logits.dim(2);
  const std::size_t plane = static_cast<std::size_t>(mask.height) * mask.width;
  mask.data.resize(plane);
  auto x = logits.data();
  for (std::size_t i = 0; i < plane; ++i) mask.data[i] = x[plane + i] > x[i] ? 1 : 0;
  return mask;
}

SegmentResult segment(std::span<const SupportItem> support, const Tensor& query,
                      const ModelParams& params, Tape* tape) {
  const auto& config = params.config();
  check_image(query, config);
  if (support.empty()) {
    throw Error(ErrorCode::kContractViolation, "segment needs at least one support item");
  }
  SegmentResult result;
  if (config.guided && config.locality == Locality::kIdentity &&
      (support.size() != 1 || support[0].image.shape() != query.shape())) {
    throw Error(ErrorCode::kContractViolation,
                "identity locality needs a single support image the size of the query");
  }
  Tensor features = extract_features(query, params, tape);
  if (config.guided) {
    result.guidance = guide_sharing(support, params, tape, &query, &features);
  }
  QueryCache cache =
      prepare_query_from_features(features, query.dim(1), query.dim(2), params, tape);
  result.logits = infer(cache, result.guidance, params, tape);
  result.mask = argmax_mask(result.logits);
  return result;
}

GuidanceState update_guidance(const Tensor& cached_features, const GuidanceState& previous,
                              const AnnotationDelta& delta, const GuidanceConfig& config) {
  if (!config.guided || config.fusion != Fusion::kLate) {
    throw Error(ErrorCode::kUnsupportedConfiguration,
                "guidance updates from cached features need late fusion; early fusion "
                "requires a full forward pass");
  }
  GuidanceState next;
  next.annotations = apply_delta(previous.annotations, delta);
  auto masks = rasterize_annotations(next.annotations, cached_features.dim(1),
                                     cached_features.dim(2), config.feature_stride());
  next.guidance = guide_late(cached_features, masks, config.locality);
  return next;
}

}  // namespace guidedseg::model
