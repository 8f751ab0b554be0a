#include "guidedseg/service.hpp"

#include <algorithm>
#include <cstdio>
#include <random>

namespace guidedseg::service {

using Clock = std::chrono::steady_clock;
using model::GuidanceState;
using model::TaskRepresentation;

namespace {

double elapsed_ms(Clock::time_point since) {
  return std::chrono::duration<double, std::milli>(Clock::now() - since).count();
}

std::int64_t unix_ms() {
  return std::chrono::duration_cast<std::chrono::milliseconds>(
             std::chrono::system_clock::now().time_since_epoch())
      .count();
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

[[noreturn]] void bad_request(const std::string& msg) { throw Error(ErrorCode::kBadRequest, msg); }

void check_rgb(const Tensor& image) {
  if (!image.defined() || image.rank() != 3 || image.dim(0) != 3)
    bad_request("frames must be RGB images");
}

}  // namespace

LocalityChoice parse_locality_choice(const std::string& text) {
  if (text == "auto") return LocalityChoice::kAuto;
  if (text == "global") return LocalityChoice::kGlobal;
  if (text == "identity") return LocalityChoice::kIdentity;
  bad_request("locality must be auto, global or identity, got '" + text + "'");
}

Tensor pad_to_stride(const Tensor& image, int stride) {
  const int c = image.dim(0), h = image.dim(1), w = image.dim(2);
  const int ph = (h + stride - 1) / stride * stride, pw = (w + stride - 1) / stride * stride;
  if (ph == h && pw == w) return image;
  Tensor out({c, ph, pw});
  auto src = image.data();
  auto dst = out.data();
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < ph; ++y)
      for (int x = 0; x < pw; ++x)
        dst[(static_cast<std::size_t>(ch) * ph + y) * pw + x] =
            src[(static_cast<std::size_t>(ch) * h + std::min(y, h - 1)) * w + std::min(x, w - 1)];
  return out;
}

BinaryMask crop_mask(const BinaryMask& mask, int height, int width) {
  if (mask.height == height && mask.width == width) return mask;
  BinaryMask out{height, width, {}};
  out.data.reserve(static_cast<std::size_t>(height) * width);
  for (int y = 0; y < height; ++y) {
    auto row = mask.data.begin() + static_cast<std::ptrdiff_t>(y) * mask.width;
    out.data.insert(out.data.end(), row, row + width);
  }
  return out;
}

struct SessionService::Session {
  struct Frame {
    Tensor image;  // padded
    model::QueryCache cache;
    GuidanceState state;
  };

  std::string id;
  int height = 0;  // unpadded frame size
  int width = 0;
  model::GuidanceConfig config;  // checkpoint config with the session's locality
  std::vector<Frame> frames;
  TaskRepresentation z;
  bool degenerate = true;
  double guidance_ms = 0.0;
  double infer_ms = 0.0;
  std::int64_t created = 0;
  std::int64_t updated = 0;

  std::shared_mutex mutex;
  // Per-frame mask cache, valid until z changes. Guarded by cache_mutex so
  // concurrent readers can fill it under a shared session lock.
  std::mutex cache_mutex;
  std::vector<std::optional<MaskResult>> masks;
};

SessionService::SessionService(std::shared_ptr<const ModelParams> params, std::string model_name,
                               ServiceOptions options)
    : params_(std::move(params)), model_name_(std::move(model_name)), options_(options) {
  if (!params_) throw Error(ErrorCode::kContractViolation, "service needs a model");
  const auto& config = params_->config();
  if (!config.guided || config.fusion != model::Fusion::kLate) {
    throw Error(ErrorCode::kUnsupportedConfiguration,
                "interactive sessions need a guided late-fusion checkpoint");
  }
  if (options_.max_frames < 1 || options_.max_sessions < 1)
    throw Error(ErrorCode::kConfiguration, "frame and session limits must be positive");
  id_salt_ = (static_cast<std::uint64_t>(std::random_device{}()) << 32) ^ std::random_device{}();
}

SessionService::~SessionService() = default;

std::string SessionService::next_id() {
  // splitmix64 is a bijection, so distinct counters give distinct ids.
  char buf[24];
  std::snprintf(buf, sizeof buf, "s%016llx",
                static_cast<unsigned long long>(splitmix64(id_salt_ + counter_++)));
  return buf;
}

std::shared_ptr<SessionService::Session> SessionService::find(const std::string& id) const {
  std::shared_lock lock(sessions_mutex_);
  auto it = sessions_.find(id);
  if (it == sessions_.end()) throw Error(ErrorCode::kNotFound, "no session '" + id + "'");
  return it->second;
}

namespace {

GuidanceState empty_state(const Tensor& features, const AnnotationSet& annotations,
                          const model::GuidanceConfig& config) {
  return model::update_guidance(features, {annotations, {}}, {}, config);
}

}  // namespace

namespace detail {

// Helpers with access to the private Session type through the service.
struct SessionOps {
  using S = SessionService::Session;

  static S::Frame make_frame(const Tensor& image, const ModelParams& params,
                             const model::GuidanceConfig& config) {
    S::Frame f;
    f.image = pad_to_stride(image, config.feature_stride());
    f.cache = model::prepare_query(f.image, params);
    f.state = empty_state(f.cache.features, AnnotationSet(f.image.dim(1), f.image.dim(2)), config);
    return f;
  }

  static void check_frame(const S& s, int frame) {
    if (frame < 0 || frame >= static_cast<int>(s.frames.size())) {
      throw Error(ErrorCode::kNotFound, "frame " + std::to_string(frame) + " out of range [0, " +
                                            std::to_string(s.frames.size()) + ")");
    }
  }

  // Merge over annotated frames; frames without points contribute nothing.
  static void rederive_guidance(S& s) {
    std::vector<TaskRepresentation> reps;
    std::size_t pos = 0, neg = 0;
    for (const auto& f : s.frames) {
      if (f.state.annotations.empty()) continue;
      reps.push_back(f.state.guidance);
      pos += f.state.annotations.count(Polarity::kPositive);
      neg += f.state.annotations.count(Polarity::kNegative);
    }
    if (reps.empty()) {
      const auto& feat = s.frames.front().cache.features;
      s.z = model::empty_guidance(s.config, feat.dim(1), feat.dim(2));
    } else {
      s.z = model::merge_shots(reps);
    }
    s.degenerate = s.config.head == model::Head::kPrototype ? (pos == 0 || neg == 0)
                                                            : (pos == 0 && neg == 0);
    std::lock_guard lock(s.cache_mutex);
    for (auto& m : s.masks) m.reset();
  }

  static BinaryMask compute_mask(const S& s, int frame, const ModelParams& params) {
    const auto& f = s.frames[frame];
    if (s.degenerate && s.config.head == model::Head::kPrototype) {
      return {s.height, s.width, std::vector<std::uint8_t>(static_cast<std::size_t>(s.height) * s.width, 0)};
    }
    return crop_mask(model::argmax_mask(model::infer(f.cache, s.z, params)), s.height, s.width);
  }
};

}  // namespace detail

CreatedSession SessionService::create_session(std::vector<Tensor> frames, const std::string& model,
                                              LocalityChoice locality) {
  if (model != model_name_) throw Error(ErrorCode::kNotFound, "unknown model '" + model + "'");
  if (frames.empty()) bad_request("a session needs at least one frame");
  if (static_cast<int>(frames.size()) > options_.max_frames)
    bad_request("at most " + std::to_string(options_.max_frames) + " frames per session");
  for (const auto& f : frames) {
    check_rgb(f);
    if (f.shape() != frames.front().shape()) bad_request("all frames must share one size");
  }

  const auto& base = params_->config();
  model::Locality chosen = model::Locality::kGlobalPool;
  switch (locality) {
    case LocalityChoice::kAuto:
      if (frames.size() == 1 && base.locality == model::Locality::kIdentity) chosen = model::Locality::kIdentity;
      break;
    case LocalityChoice::kGlobal: break;
    case LocalityChoice::kIdentity:
      if (frames.size() != 1) bad_request("identity locality needs a single-frame session");
      if (base.head != model::Head::kFeatureFusion)
        bad_request("identity locality needs the feature-fusion head");
      chosen = model::Locality::kIdentity;
      break;
  }

  auto s = std::make_shared<Session>();
  s->height = frames.front().dim(1);
  s->width = frames.front().dim(2);
  s->config = base;
  s->config.locality = chosen;
  for (const auto& f : frames) s->frames.push_back(detail::SessionOps::make_frame(f, *params_, s->config));
  s->masks.resize(s->frames.size());
  detail::SessionOps::rederive_guidance(*s);
  s->created = s->updated = unix_ms();

  std::unique_lock lock(sessions_mutex_);
  if (static_cast<int>(sessions_.size()) >= options_.max_sessions)
    throw Error(ErrorCode::kResourceExhausted, "session limit of " + std::to_string(options_.max_sessions) + " reached");
  s->id = next_id();
  sessions_.emplace(s->id, s);
  return {s->id, static_cast<int>(s->frames.size()), base.feature_stride(), chosen};
}

int SessionService::append_frame(const std::string& id, const Tensor& image) {
  auto s = find(id);
  check_rgb(image);
  std::unique_lock lock(s->mutex);
  if (s->config.locality == model::Locality::kIdentity)
    bad_request("identity sessions hold a single frame");
  if (image.dim(1) != s->height || image.dim(2) != s->width)
    bad_request("frame is " + std::to_string(image.dim(1)) + "x" + std::to_string(image.dim(2)) +
                " but the session is " + std::to_string(s->height) + "x" + std::to_string(s->width));
  if (static_cast<int>(s->frames.size()) >= options_.max_frames)
    bad_request("session already holds the maximum of " + std::to_string(options_.max_frames) + " frames");
  s->frames.push_back(detail::SessionOps::make_frame(image, *params_, s->config));
  {
    std::lock_guard cache(s->cache_mutex);
    s->masks.emplace_back();
  }
  s->updated = unix_ms();
  return static_cast<int>(s->frames.size()) - 1;
}

MaskResult SessionService::add_annotations(const std::string& id, int frame,
                                           std::span<const Click> clicks,
                                           std::span<const Pixel> removals) {
  auto s = find(id);
  std::unique_lock lock(s->mutex);
  detail::SessionOps::check_frame(*s, frame);
  auto in_bounds = [&](int x, int y) { return x >= 0 && x < s->width && y >= 0 && y < s->height; };
  AnnotationDelta delta;
  for (std::size_t i = 0; i < clicks.size(); ++i) {
    if (!in_bounds(clicks[i].x, clicks[i].y)) {
      throw InvalidPoint(i, "point " + std::to_string(i) + " at (x=" + std::to_string(clicks[i].x) +
                                    ", y=" + std::to_string(clicks[i].y) + ") is outside the " +
                                    std::to_string(s->width) + "x" + std::to_string(s->height) + " frame");
    }
    delta.upserts.push_back({clicks[i].y, clicks[i].x, clicks[i].label});
  }
  for (std::size_t j = 0; j < removals.size(); ++j) {
    if (!in_bounds(removals[j].x, removals[j].y)) {
      throw InvalidPoint(clicks.size() + j, "removal " + std::to_string(j) + " is outside the frame");
    }
    delta.removals.push_back({removals[j].y, removals[j].x});
  }

  auto& f = s->frames[frame];
  auto start = Clock::now();
  f.state = model::update_guidance(f.cache.features, f.state, delta, s->config);
  detail::SessionOps::rederive_guidance(*s);
  s->guidance_ms = elapsed_ms(start);
  start = Clock::now();
  MaskResult out;
  out.mask = detail::SessionOps::compute_mask(*s, frame, *params_);
  s->infer_ms = elapsed_ms(start);
  out.degenerate = s->degenerate;
  out.guidance_ms = s->guidance_ms;
  out.infer_ms = s->infer_ms;
  {
    std::lock_guard cache(s->cache_mutex);
    s->masks[frame] = out;
  }
  s->updated = unix_ms();
  return out;
}

void SessionService::clear_annotations(const std::string& id, std::optional<int> frame) {
  auto s = find(id);
  std::unique_lock lock(s->mutex);
  if (frame) detail::SessionOps::check_frame(*s, *frame);
  const auto start = Clock::now();
  for (int i = 0; i < static_cast<int>(s->frames.size()); ++i) {
    if (frame && *frame != i) continue;
    auto& f = s->frames[i];
    if (f.state.annotations.empty()) continue;
    f.state = empty_state(f.cache.features, AnnotationSet(f.image.dim(1), f.image.dim(2)), s->config);
  }
  detail::SessionOps::rederive_guidance(*s);
  s->guidance_ms = elapsed_ms(start);
  s->updated = unix_ms();
}

MaskResult SessionService::get_mask(const std::string& id, int frame) {
  auto s = find(id);
  std::shared_lock lock(s->mutex);
  detail::SessionOps::check_frame(*s, frame);
  std::lock_guard cache(s->cache_mutex);
  if (!s->masks[frame]) {
    const auto start = Clock::now();
    MaskResult r;
    r.mask = detail::SessionOps::compute_mask(*s, frame, *params_);
    r.infer_ms = elapsed_ms(start);
    r.guidance_ms = s->guidance_ms;
    r.degenerate = s->degenerate;
    s->masks[frame] = std::move(r);
  }
  return *s->masks[frame];
}

SessionSummary SessionService::summary(const std::string& id) {
  auto s = find(id);
  std::shared_lock lock(s->mutex);
  SessionSummary out;
  out.id = s->id;
  out.frames = static_cast<int>(s->frames.size());
  out.height = s->height;
  out.width = s->width;
  out.locality = s->config.locality;
  for (const auto& f : s->frames) {
    out.positive_counts.push_back(f.state.annotations.count(Polarity::kPositive));
    out.negative_counts.push_back(f.state.annotations.count(Polarity::kNegative));
  }
  out.degenerate = s->degenerate;
  out.guidance_ms = s->guidance_ms;
  out.infer_ms = s->infer_ms;
  out.created_unix_ms = s->created;
  out.updated_unix_ms = s->updated;
  return out;
}

bool SessionService::erase_session(const std::string& id) {
  std::unique_lock lock(sessions_mutex_);
  return sessions_.erase(id) > 0;
}

TaskRepresentation SessionService::guidance(const std::string& id) {
  auto s = find(id);
  std::shared_lock lock(s->mutex);
  return s->z;
}

AnnotationSet SessionService::annotations(const std::string& id, int frame) {
  auto s = find(id);
  std::shared_lock lock(s->mutex);
  detail::SessionOps::check_frame(*s, frame);
  return s->frames[frame].state.annotations;
}

std::size_t SessionService::session_count() const {
  std::shared_lock lock(sessions_mutex_);
  return sessions_.size();
}

}  // namespace guidedseg::service
