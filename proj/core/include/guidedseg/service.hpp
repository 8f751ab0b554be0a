#pragma once

#include <chrono>
#include <cstdint>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "guidedseg/annotations.hpp"
#include "guidedseg/errors.hpp"
#include "guidedseg/model.hpp"

namespace guidedseg::service {

namespace detail {
struct SessionOps;
}

using autodiff::Tensor;
using model::BinaryMask;
using model::ModelParams;

struct ServiceOptions {
  int max_frames = 64;
  int max_sessions = 256;
};

enum class LocalityChoice { kAuto, kGlobal, kIdentity };

LocalityChoice parse_locality_choice(const std::string& text);

/// A click in image pixel coordinates: x is the column, y the row.
struct Click {
  int x = 0;
  int y = 0;
  Polarity label = Polarity::kPositive;
};

struct Pixel {
  int x = 0;
  int y = 0;
};

struct CreatedSession {
  std::string id;
  int frames = 0;
  int feature_stride = 0;
  model::Locality locality = model::Locality::kGlobalPool;
};

struct MaskResult {
  BinaryMask mask;
  bool degenerate = false;
  double guidance_ms = 0.0;
  double infer_ms = 0.0;
};

struct SessionSummary {
  std::string id;
  int frames = 0;
  int height = 0;
  int width = 0;
  model::Locality locality = model::Locality::kGlobalPool;
  std::vector<std::size_t> positive_counts;
  std::vector<std::size_t> negative_counts;
  bool degenerate = true;
  double guidance_ms = 0.0;
  double infer_ms = 0.0;
  std::int64_t created_unix_ms = 0;
  std::int64_t updated_unix_ms = 0;
};

/// Rejected point: `index` points into the request's click list (removals
/// follow the clicks).
class InvalidPoint : public Error {
 public:
  InvalidPoint(std::size_t index, const std::string& message)
      : Error(ErrorCode::kBadRequest, message), index_(index) {}
  std::size_t index() const noexcept { return index_; }

 private:
  std::size_t index_;
};

/// Interactive sessions over one shared read-only checkpoint.
///
/// Frames are padded on the bottom and right (edge replication) to a
/// multiple of the feature stride; masks are cropped back. Each frame keeps
/// its encoder features and guidance-independent decoder term, so edits
/// only re-pool guidance and re-run the head. Mutations of one session are
/// serialized; mask reads run concurrently between mutations.
class SessionService {
 public:
  /// Throws Error(kUnsupportedConfiguration) unless the checkpoint is a
  /// guided late-fusion network.
  SessionService(std::shared_ptr<const ModelParams> params,
                 std::string model_name, ServiceOptions options = {});
  ~SessionService();

  const std::string& model_name() const noexcept { return model_name_; }
  const ModelParams& params() const noexcept { return *params_; }
  const ServiceOptions& options() const noexcept { return options_; }

  /// Throws kNotFound for an unknown model name, kBadRequest for bad images
  /// or too many frames/sessions.
  CreatedSession create_session(std::vector<Tensor> frames,
                                const std::string& model,
                                LocalityChoice locality = LocalityChoice::kAuto);
  int append_frame(const std::string& id, const Tensor& image);

  /// Clicks overwrite earlier labels at the same pixel; removals drop
  /// points and apply before the clicks. Validates everything before changing state. Returns the mask
  /// of `frame` under the updated guidance.
  MaskResult add_annotations(const std::string& id, int frame,
                             std::span<const Click> clicks,
                             std::span<const Pixel> removals = {});
  /// All frames when `frame` is empty.
  void clear_annotations(const std::string& id, std::optional<int> frame);

  MaskResult get_mask(const std::string& id, int frame);
  SessionSummary summary(const std::string& id);
  bool erase_session(const std::string& id);

  /// Current merged guidance and per-frame annotations (for inspection).
  model::TaskRepresentation guidance(const std::string& id);
  AnnotationSet annotations(const std::string& id, int frame);

  std::size_t session_count() const;

 private:
  friend struct detail::SessionOps;
  struct Session;
  std::shared_ptr<Session> find(const std::string& id) const;
  std::string next_id();

  std::shared_ptr<const ModelParams> params_;
  std::string model_name_;
  ServiceOptions options_;

  mutable std::shared_mutex sessions_mutex_;
  std::unordered_map<std::string, std::shared_ptr<Session>> sessions_;
  std::uint64_t counter_ = 0;
  std::uint64_t id_salt_ = 0;
};

/// Edge-replicated bottom/right padding to multiples of `stride`.
Tensor pad_to_stride(const Tensor& image, int stride);
BinaryMask crop_mask(const BinaryMask& mask, int height, int width);

}  // namespace guidedseg::service
