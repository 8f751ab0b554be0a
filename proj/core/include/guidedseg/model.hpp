#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "guidedseg/annotations.hpp"
#include "guidedseg/checkpoint.hpp"
#include "guidedseg/config.hpp"
#include "guidedseg/ops.hpp"
#include "guidedseg/tensor.hpp"

namespace guidedseg::model {

using autodiff::Tape;
using autodiff::Tensor;

/// Named parameter tensors for one guided network (or the unguided
/// baseline), in a fixed order.
class ModelParams {
 public:
  /// Glorot-uniform weights, zero biases, deterministic in seed.
  static ModelParams initialize(const GuidanceConfig& config,
                                std::uint64_t seed);
  static ModelParams from_checkpoint(const autodiff::Checkpoint& checkpoint);

  autodiff::Checkpoint to_checkpoint(
      nlohmann::json metadata = nlohmann::json::object()) const;

  const GuidanceConfig& config() const noexcept { return config_; }

  bool contains(std::string_view name) const;
  const Tensor& at(std::string_view name) const;

  const std::vector<autodiff::NamedTensor>& named() const noexcept {
    return params_;
  }
  /// Handles sharing storage with this object, in parameter order.
  std::vector<Tensor> tensors() const;

  void set_requires_grad(bool value);
  ModelParams clone() const;

  bool all_finite() const;
  double l2_norm() const;

 private:
  GuidanceConfig config_;
  std::vector<autodiff::NamedTensor> params_;
};

struct AnnotationMasks {
  Tensor positive;  // [1, h, w]
  Tensor negative;  // [1, h, w]
};

enum class GuidanceKind { kGlobal, kLocal };

/// Latent task representation extracted from an annotated support.
struct TaskRepresentation {
  GuidanceKind kind = GuidanceKind::kGlobal;
  // kGlobal
  Tensor z_pos;  // [C]
  Tensor z_neg;  // [C]
  float pos_count = 0.0f;
  float neg_count = 0.0f;
  // kLocal
  Tensor g_pos;  // [C, h, w]
  Tensor g_neg;  // [C, h, w]
  int feature_h = 0;
  int feature_w = 0;
  int shots_merged = 1;
};

struct SupportItem {
  Tensor image;  // [3, H, W]
  AnnotationSet annotations;
};

/// Query-side quantities that do not depend on the guidance. Computing this
/// once and re-running only the head is the fast path for annotation edits.
struct QueryCache {
  Tensor features;      // phi(query) [C, h, w]
  Tensor decoder_term;  // first decoder conv on features, incl. bias
  int image_h = 0;
  int image_w = 0;
};

struct BinaryMask {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> data;  // row-major, values in {0, 1}

  friend bool operator==(const BinaryMask&, const BinaryMask&) = default;
};

struct SegmentResult {
  Tensor logits;  // [2, H, W]; channel 1 is the positive class
  BinaryMask mask;
  TaskRepresentation guidance;
};

Tensor extract_features(const Tensor& image, const ModelParams& params,
                        Tape* tape = nullptr);

/// Nearest-cell rasterization: pixel (r, c) marks cell (r / stride,
/// c / stride) of its polarity's mask.
AnnotationMasks rasterize_annotations(const AnnotationSet& annotations,
                                      int feature_h, int feature_w,
                                      int stride);

TaskRepresentation guide_late(const Tensor& features,
                              const AnnotationMasks& masks, Locality locality,
                              Tape* tape = nullptr);

TaskRepresentation guide_early(const Tensor& image,
                               const AnnotationSet& annotations,
                               const ModelParams& params,
                               Tape* tape = nullptr);

/// Count-weighted merge of global representations.
TaskRepresentation merge_shots(std::span<const TaskRepresentation> reps,
                               Tape* tape = nullptr);

/// Representation of a support with no annotations at all.
TaskRepresentation empty_guidance(const GuidanceConfig& config, int feature_h,
                                  int feature_w);

QueryCache prepare_query(const Tensor& image, const ModelParams& params,
                         Tape* tape = nullptr);
QueryCache prepare_query_from_features(const Tensor& features, int image_h,
                                       int image_w, const ModelParams& params,
                                       Tape* tape = nullptr);

/// Runs the configured head on a prepared query. `guidance` is ignored by
/// the unguided baseline.
Tensor infer(const QueryCache& query, const TaskRepresentation& guidance,
             const ModelParams& params, Tape* tape = nullptr);

Tensor infer_feature_fusion(const Tensor& query_features,
                            const TaskRepresentation& guidance,
                            const ModelParams& params, int image_h,
                            int image_w, Tape* tape = nullptr);
Tensor infer_param_regression(const Tensor& query_features,
                              const TaskRepresentation& guidance,
                              const ModelParams& params, int image_h,
                              int image_w, Tape* tape = nullptr);
Tensor infer_prototype(const Tensor& query_features,
                       const TaskRepresentation& guidance, float temperature,
                       int image_h, int image_w, Tape* tape = nullptr);

/// Positive where logit 1 > logit 0; ties go to the negative class.
BinaryMask argmax_mask(const Tensor& logits);

/// Guidance from the support, shot merge, and head inference on the query.
SegmentResult segment(std::span<const SupportItem> support,
                      const Tensor& query, const ModelParams& params,
                      Tape* tape = nullptr);

/// Guidance computed from the support alone (extract, rasterize, pool,
/// merge).
TaskRepresentation guide(std::span<const SupportItem> support,
                         const ModelParams& params, Tape* tape = nullptr);

struct GuidanceState {
  AnnotationSet annotations;
  TaskRepresentation guidance;
};

/// Rebuilds the representation for `previous.annotations` edited by `delta`
/// from cached support features; never re-runs the encoder. Late fusion only.
GuidanceState update_guidance(const Tensor& cached_features,
                              const GuidanceState& previous,
                              const AnnotationDelta& delta,
                              const GuidanceConfig& config);

}  // namespace guidedseg::model
