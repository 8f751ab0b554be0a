#include "guidedseg/episodes.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <string>

#include <nlohmann/json.hpp>

#include "guidedseg/errors.hpp"
#include "guidedseg/png.hpp"

namespace guidedseg::episodes {

std::uint64_t uniform_index(Rng& rng, std::uint64_t n) {
  if (n == 0) throw Error(ErrorCode::kContractViolation, "uniform_index over an empty range");
  const std::uint64_t max = std::numeric_limits<std::uint64_t>::max();
  const std::uint64_t limit = max - (max % n);
  std::uint64_t r = rng();
  while (r >= limit) r = rng();
  return r % n;
}

double uniform_real(Rng& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

namespace {

double uniform_real(Rng& rng, double lo, double hi) {
  return lo + (hi - lo) * episodes::uniform_real(rng);
}

int uniform_int(Rng& rng, int lo, int hi) {
  return lo + static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(hi - lo + 1)));
}

// First k entries of v become a uniform draw without replacement.
template <typename T>
void partial_shuffle(std::vector<T>& v, std::size_t k, Rng& rng) {
  k = std::min(k, v.size());
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t j = i + uniform_index(rng, v.size() - i);
    std::swap(v[i], v[j]);
  }
}

}  // namespace

bool DenseSample::has_instance(int id) const {
  if (id <= 0 || id > 255) return false;
  return std::find(label_map.begin(), label_map.end(), static_cast<std::uint8_t>(id)) != label_map.end();
}

bool DenseSample::has_class(int class_id) const {
  for (const auto& [id, cls] : instance_classes)
    if (cls == class_id && has_instance(id)) return true;
  return false;
}

void validate(const Dataset& dataset) {
  std::map<int, std::pair<int, int>> sequence_size;
  for (std::size_t i = 0; i < dataset.samples.size(); ++i) {
    const auto& s = dataset.samples[i];
    const std::string where = "sample " + std::to_string(i);
    if (!s.image.defined() || s.image.rank() != 3 || s.image.dim(0) != 3)
      throw Error(ErrorCode::kFormat, where + ": image must be [3, H, W]");
    if (s.label_map.size() != static_cast<std::size_t>(s.height()) * s.width())
      throw Error(ErrorCode::kFormat, where + ": label map size differs from image");
    for (std::uint8_t id : s.label_map)
      if (id != 0 && !s.instance_classes.count(id))
        throw Error(ErrorCode::kFormat, where + ": instance " + std::to_string(id) + " has no class");
    if (s.sequence_id.has_value() != s.frame_index.has_value())
      throw Error(ErrorCode::kFormat, where + ": sequence and frame must be given together");
    if (s.sequence_id) {
      auto [it, inserted] = sequence_size.emplace(*s.sequence_id, std::pair{s.height(), s.width()});
      if (!inserted && it->second != std::pair{s.height(), s.width()})
        throw Error(ErrorCode::kFormat, where + ": frame size differs within sequence " +
                                            std::to_string(*s.sequence_id));
    }
  }
}

std::string_view to_string(TaskMode mode) {
  switch (mode) {
    case TaskMode::kSemantic: return "semantic";
    case TaskMode::kInteractive: return "interactive";
    case TaskMode::kVideo: return "video";
  }
  return "semantic";
}

TaskMode parse_task_mode(std::string_view text) {
  if (text == "semantic") return TaskMode::kSemantic;
  if (text == "interactive") return TaskMode::kInteractive;
  if (text == "video") return TaskMode::kVideo;
  throw Error(ErrorCode::kConfiguration, "unknown task mode '" + std::string(text) + "'");
}

std::vector<std::uint8_t> binarize(const DenseSample& sample, const TaskDescriptor& task) {
  std::array<std::uint8_t, 256> on{};
  if (task.mode == TaskMode::kSemantic) {
    for (const auto& [id, cls] : sample.instance_classes)
      if (cls == task.id && id > 0 && id < 256) on[id] = 1;
  } else if (task.id > 0 && task.id < 256) {
    on[task.id] = 1;
  }
  std::vector<std::uint8_t> out(sample.label_map.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = on[sample.label_map[i]];
  return out;
}

AnnotationSet sparsify(std::span<const std::uint8_t> target, int height, int width, int points,
                       Rng& rng) {
  if (points < 1) throw Error(ErrorCode::kContractViolation, "sparsify needs P >= 1");
  return sparsify(target, height, width, points / 2 + points % 2, points / 2, rng);
}

AnnotationSet sparsify(std::span<const std::uint8_t> target, int height, int width, int positives,
                       int negatives, Rng& rng) {
  if (target.size() != static_cast<std::size_t>(height) * width)
    throw Error(ErrorCode::kInvalidShape, "sparsify: target size differs from height * width");
  if (positives < 0 || negatives < 0)
    throw Error(ErrorCode::kContractViolation, "sparsify: negative quota");
  std::vector<int> pos, neg;
  for (std::size_t i = 0; i < target.size(); ++i) (target[i] ? pos : neg).push_back(static_cast<int>(i));
  if (pos.empty()) throw Error(ErrorCode::kNoPositiveRegion, "task has no positive pixels");

  AnnotationSet out(height, width);
  auto take = [&](std::vector<int>& region, int quota, Polarity label) {
    const auto k = std::min(region.size(), static_cast<std::size_t>(quota));
    partial_shuffle(region, k, rng);
    for (std::size_t i = 0; i < k; ++i) out.add({region[i] / width, region[i] % width, label});
  };
  take(pos, positives, Polarity::kPositive);
  take(neg, negatives, Polarity::kNegative);
  return out;
}

EpisodeSampler::EpisodeSampler(const Dataset& dataset, TaskMode mode, SamplerOptions options)
    : dataset_(&dataset), mode_(mode), options_(std::move(options)) {
  const auto& samples = dataset.samples;
  switch (mode) {
    case TaskMode::kSemantic: {
      std::set<int> classes;
      for (const auto& s : samples)
        if (!s.sequence_id)
          for (const auto& [id, cls] : s.instance_classes) classes.insert(cls);
      for (int cls : classes) {
        if (!options_.allowed_classes.empty() && !options_.allowed_classes.count(cls)) continue;
        Candidate c{{TaskMode::kSemantic, cls, std::nullopt}, {}, {}};
        for (std::size_t i = 0; i < samples.size(); ++i) {
          const auto& s = samples[i];
          if (s.sequence_id || !s.has_class(cls)) continue;
          c.samples.push_back(i);
          bool distractor = false;
          for (const auto& [id, other] : s.instance_classes)
            distractor = distractor || (other != cls && s.has_instance(id));
          if (!options_.require_distractor || distractor) c.queries.push_back(i);
        }
        if (!c.samples.empty()) candidates_.push_back(std::move(c));
      }
      break;
    }
    case TaskMode::kInteractive:
      for (std::size_t i = 0; i < samples.size(); ++i) {
        const auto& s = samples[i];
        if (s.sequence_id) continue;
        std::vector<int> present;
        for (const auto& [id, cls] : s.instance_classes)
          if (s.has_instance(id)) present.push_back(id);
        if (static_cast<int>(present.size()) < options_.min_instances) continue;
        for (int id : present) candidates_.push_back({{TaskMode::kInteractive, id, std::nullopt}, {i}, {i}});
      }
      break;
    case TaskMode::kVideo: {
      std::map<int, std::vector<std::size_t>> sequences;
      for (std::size_t i = 0; i < samples.size(); ++i)
        if (samples[i].sequence_id) sequences[*samples[i].sequence_id].push_back(i);
      for (auto& [seq, frames] : sequences) {
        std::stable_sort(frames.begin(), frames.end(), [&](std::size_t a, std::size_t b) {
          return *samples[a].frame_index < *samples[b].frame_index;
        });
        std::set<int> ids;
        for (std::size_t f : frames)
          for (const auto& [id, cls] : samples[f].instance_classes) ids.insert(id);
        for (int id : ids) {
          Candidate c{{TaskMode::kVideo, id, seq}, {}, {}};
          for (std::size_t f : frames)
            if (samples[f].has_instance(id)) c.samples.push_back(f);
          if (!c.samples.empty()) candidates_.push_back(std::move(c));
        }
      }
      break;
    }
  }
}

Episode EpisodeSampler::sample(int shots, int points, Rng& rng) const {
  if (shots < 1 || points < 1)
    throw Error(ErrorCode::kContractViolation, "episodes need S >= 1 and P >= 1");
  const std::size_t need = static_cast<std::size_t>(shots) + 1;
  std::vector<const Candidate*> eligible;
  for (const auto& c : candidates_) {
    bool ok = false;
    switch (mode_) {
      case TaskMode::kSemantic: ok = !c.queries.empty() && c.samples.size() >= need; break;
      case TaskMode::kInteractive: ok = true; break;
      case TaskMode::kVideo: ok = c.samples.size() >= need; break;
    }
    if (ok) eligible.push_back(&c);
  }
  if (eligible.empty()) {
    throw Error(ErrorCode::kDatasetTooSmall, std::string("no ") + std::string(to_string(mode_)) +
                                                 " task has enough images for S=" + std::to_string(shots));
  }
  const Candidate& c = *eligible[uniform_index(rng, eligible.size())];

  std::vector<std::size_t> support;
  std::size_t query = 0;
  switch (mode_) {
    case TaskMode::kSemantic: {
      query = c.queries[uniform_index(rng, c.queries.size())];
      std::vector<std::size_t> rest;
      for (std::size_t i : c.samples)
        if (i != query) rest.push_back(i);
      partial_shuffle(rest, shots, rng);
      support.assign(rest.begin(), rest.begin() + shots);
      break;
    }
    case TaskMode::kInteractive:
      query = c.samples.front();
      support.assign(shots, query);
      break;
    case TaskMode::kVideo: {
      std::vector<std::size_t> frames = c.samples;
      partial_shuffle(frames, need, rng);
      frames.resize(need);
      // c.samples is in frame order; restore it for the chosen subset.
      std::sort(frames.begin(), frames.end(), [&](std::size_t a, std::size_t b) {
        return *dataset_->samples[a].frame_index < *dataset_->samples[b].frame_index;
      });
      query = frames.back();
      frames.pop_back();
      support = std::move(frames);
      break;
    }
  }
  return make_episode(c.task, support, query, points, rng);
}

Episode EpisodeSampler::make_episode(const TaskDescriptor& task,
                                     const std::vector<std::size_t>& support_samples,
                                     std::size_t query_sample, int points, Rng& rng) const {
  const auto& samples = dataset_->samples;
  Episode e;
  e.task = task;
  e.shots = static_cast<int>(support_samples.size());
  e.points = points;
  e.support_samples = support_samples;
  e.query_sample = query_sample;
  const DenseSample& q = samples.at(query_sample);
  e.query = q.image;
  e.query_target = binarize(q, task);
  for (std::size_t i : support_samples) {
    const DenseSample& s = samples.at(i);
    const auto target = binarize(s, task);
    e.support.push_back({s.image, sparsify(target, s.height(), s.width(), points, rng)});
  }
  return e;
}

ShapeKind class_shape(int class_id) { return static_cast<ShapeKind>(class_id % 3); }

int class_hue_bin(int class_id) { return (3 * class_id) % kHueBins; }

namespace {

struct Instance {
  int id = 0;
  int cls = 0;
  double radius = 0.0;
  double cy = 0.0, cx = 0.0;
  double vy = 0.0, vx = 0.0;
  std::array<double, 3> color{};
};

std::array<double, 3> hue_color(int bin) {
  // HSV with fixed saturation and value.
  const double h = bin * (360.0 / kHueBins) / 60.0;
  const double v = 0.85, s = 0.75;
  const double c = v * s;
  const double x = c * (1.0 - std::abs(std::fmod(h, 2.0) - 1.0));
  const double m = v - c;
  std::array<double, 3> rgb{};
  switch (static_cast<int>(h)) {
    case 0: rgb = {c, x, 0}; break;
    case 1: rgb = {x, c, 0}; break;
    case 2: rgb = {0, c, x}; break;
    case 3: rgb = {0, x, c}; break;
    case 4: rgb = {x, 0, c}; break;
    default: rgb = {c, 0, x}; break;
  }
  for (double& ch : rgb) ch += m;
  return rgb;
}

bool covers(const Instance& inst, int y, int x) {
  const double dy = y - inst.cy, dx = x - inst.cx, r = inst.radius;
  switch (class_shape(inst.cls)) {
    case ShapeKind::kCircle: return dy * dy + dx * dx <= r * r;
    case ShapeKind::kSquare: return std::max(std::abs(dy), std::abs(dx)) <= 0.8 * r;
    case ShapeKind::kTriangle:
      return dy >= -r && dy <= 0.5 * r && std::abs(dx) <= (dy + r) * 0.5773502691896258;
  }
  return false;
}

struct Background {
  double base = 0.5;
  double amp = 0.06;
  double fy = 0.3, fx = 0.3, py = 0.0, px = 0.0;

  double at(int y, int x) const { return base + amp * std::sin(fy * y + py) * std::sin(fx * x + px); }
};

Background draw_background(Rng& rng) {
  Background b;
  b.base = uniform_real(rng, 0.25, 0.65);
  b.fy = uniform_real(rng, 0.2, 0.6);
  b.fx = uniform_real(rng, 0.2, 0.6);
  b.py = uniform_real(rng, 0.0, 6.283185307179586);
  b.px = uniform_real(rng, 0.0, 6.283185307179586);
  return b;
}

class Generator {
 public:
  Generator(const ShapesWorldConfig& cfg, Rng& rng) : cfg_(cfg), rng_(rng) {
    for (int k = 0; k < cfg.num_classes; ++k)
      if (!cfg.excluded_classes.count(k)) classes_.push_back(k);
  }

  Instance draw_instance(int id) {
    Instance inst;
    inst.id = id;
    inst.cls = classes_[uniform_index(rng_, classes_.size())];
    inst.radius = uniform_real(rng_, cfg_.radius_min, cfg_.radius_max);
    inst.cy = uniform_real(rng_, inst.radius, cfg_.height - 1 - inst.radius);
    inst.cx = uniform_real(rng_, inst.radius, cfg_.width - 1 - inst.radius);
    const double gain = uniform_real(rng_, 0.94, 1.06);
    inst.color = hue_color(class_hue_bin(inst.cls));
    for (double& ch : inst.color) ch *= gain;
    return inst;
  }

  // Label map with higher ids on top; false when an instance shows fewer
  // than min_visible pixels.
  bool render_labels(const std::vector<Instance>& insts, std::vector<std::uint8_t>& labels) const {
    labels.assign(static_cast<std::size_t>(cfg_.height) * cfg_.width, 0);
    std::vector<int> visible(insts.size() + 1, 0);
    for (int y = 0; y < cfg_.height; ++y)
      for (int x = 0; x < cfg_.width; ++x) {
        auto& l = labels[static_cast<std::size_t>(y) * cfg_.width + x];
        for (const auto& inst : insts)
          if (covers(inst, y, x)) l = static_cast<std::uint8_t>(inst.id);
      }
    for (std::uint8_t l : labels) ++visible[l];
    for (std::size_t i = 1; i < visible.size(); ++i)
      if (visible[i] < cfg_.min_visible) return false;
    return true;
  }

  DenseSample render(const std::vector<Instance>& insts, const std::vector<std::uint8_t>& labels,
                     const Background& bg) {
    io::Image8 img{cfg_.width, cfg_.height, 3, {}};
    img.pixels.resize(static_cast<std::size_t>(cfg_.width) * cfg_.height * 3);
    for (int y = 0; y < cfg_.height; ++y)
      for (int x = 0; x < cfg_.width; ++x) {
        const std::size_t i = static_cast<std::size_t>(y) * cfg_.width + x;
        const std::uint8_t l = labels[i];
        for (int c = 0; c < 3; ++c) {
          double v = l ? insts[l - 1].color[c] : bg.at(y, x);
          v += uniform_real(rng_, -cfg_.noise, cfg_.noise);
          img.pixels[3 * i + c] = static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
        }
      }
    DenseSample s;
    s.image = io::image_to_tensor(img);
    s.label_map = labels;
    for (const auto& inst : insts) s.instance_classes[inst.id] = inst.cls;
    return s;
  }

  static constexpr int kMaxAttempts = 1000;

  DenseSample still_image() {
    for (int attempt = 0; attempt < kMaxAttempts; ++attempt) {
      const int n = uniform_int(rng_, cfg_.min_instances, cfg_.max_instances);
      std::vector<Instance> insts;
      for (int id = 1; id <= n; ++id) insts.push_back(draw_instance(id));
      std::vector<std::uint8_t> labels;
      if (!render_labels(insts, labels)) continue;
      return render(insts, labels, draw_background(rng_));
    }
    throw Error(ErrorCode::kConfiguration, "could not place instances with the minimum visible size");
  }

  std::vector<DenseSample> sequence(int sequence_id) {
    for (int attempt = 0; attempt < kMaxAttempts; ++attempt) {
      const int n = uniform_int(rng_, cfg_.min_instances, cfg_.max_instances);
      std::vector<Instance> insts;
      for (int id = 1; id <= n; ++id) {
        insts.push_back(draw_instance(id));
        insts.back().vy = uniform_real(rng_, -cfg_.max_speed, cfg_.max_speed);
        insts.back().vx = uniform_real(rng_, -cfg_.max_speed, cfg_.max_speed);
      }
      std::vector<std::vector<Instance>> states;
      std::vector<std::vector<std::uint8_t>> labels(cfg_.frames);
      bool ok = true;
      for (int t = 0; t < cfg_.frames && ok; ++t) {
        if (t > 0)
          for (auto& inst : insts) advance(inst);
        states.push_back(insts);
        ok = render_labels(insts, labels[t]);
      }
      if (!ok) continue;
      const Background bg = draw_background(rng_);
      std::vector<DenseSample> frames;
      for (int t = 0; t < cfg_.frames; ++t) {
        frames.push_back(render(states[t], labels[t], bg));
        frames.back().sequence_id = sequence_id;
        frames.back().frame_index = t;
      }
      return frames;
    }
    throw Error(ErrorCode::kConfiguration, "could not keep every instance visible across the sequence");
  }

 private:
  // Constant velocity plus jitter, bouncing off the image border.
  void advance(Instance& inst) {
    auto move = [&](double& p, double& v, double hi) {
      p += v + uniform_real(rng_, -cfg_.jitter, cfg_.jitter);
      const double lo = inst.radius;
      if (p < lo) {
        p = 2 * lo - p;
        v = -v;
      }
      if (p > hi) {
        p = 2 * hi - p;
        v = -v;
      }
      p = std::clamp(p, lo, hi);
    };
    move(inst.cy, inst.vy, cfg_.height - 1 - inst.radius);
    move(inst.cx, inst.vx, cfg_.width - 1 - inst.radius);
  }

  const ShapesWorldConfig& cfg_;
  Rng& rng_;
  std::vector<int> classes_;
};

void check_config(const ShapesWorldConfig& c) {
  auto fail = [](const std::string& msg) { throw Error(ErrorCode::kConfiguration, msg); };
  if (c.height < 8 || c.width < 8) fail("image size must be at least 8x8");
  if (c.num_classes < 1 || c.num_classes > kMaxClasses)
    fail("num_classes must be in [1, " + std::to_string(kMaxClasses) + "]");
  int usable = 0;
  for (int k = 0; k < c.num_classes; ++k) usable += c.excluded_classes.count(k) ? 0 : 1;
  if (usable == 0) fail("every class is excluded");
  if (c.images < 0 || c.video_sequences < 0) fail("sample counts must be non-negative");
  if (c.video_sequences > 0 && c.frames < 1) fail("sequences need at least one frame");
  if (c.min_instances < 1 || c.max_instances < c.min_instances || c.max_instances > 255)
    fail("instance range must satisfy 1 <= min <= max <= 255");
  if (!(c.radius_min >= 1.0f) || c.radius_max < c.radius_min) fail("radius range must satisfy 1 <= min <= max");
  if (2.0f * c.radius_max + 1.0f > static_cast<float>(std::min(c.height, c.width)))
    fail("shape radius " + std::to_string(c.radius_max) + " does not fit a " + std::to_string(c.height) + "x" +
         std::to_string(c.width) + " image");
  if (c.min_visible < 1) fail("min_visible must be positive");
  if (c.max_speed < 0.0f || c.jitter < 0.0f || c.noise < 0.0f) fail("motion and noise amplitudes must be non-negative");
}

}  // namespace

Dataset generate_shapes_world(const ShapesWorldConfig& config, std::uint64_t seed) {
  check_config(config);
  Rng rng(seed);
  Generator gen(config, rng);
  Dataset out;
  for (int i = 0; i < config.images; ++i) out.samples.push_back(gen.still_image());
  for (int s = 0; s < config.video_sequences; ++s)
    for (auto& frame : gen.sequence(s)) out.samples.push_back(std::move(frame));
  return out;
}

namespace {

std::string numbered(const char* dir, std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s/%06zu.png", dir, i);
  return buf;
}

[[noreturn]] void format_error(const std::filesystem::path& path, const std::string& what) {
  throw Error(ErrorCode::kFormat, path.string() + ": " + what);
}

std::vector<std::uint8_t> read_or_format_error(const std::filesystem::path& path) {
  try {
    return io::read_bytes(path);
  } catch (const Error&) {
    format_error(path, "missing or unreadable file");
  }
}

}  // namespace

void save_dataset(const Dataset& dataset, const std::filesystem::path& dir) {
  validate(dataset);
  std::filesystem::create_directories(dir / "images");
  std::filesystem::create_directories(dir / "labels");
  nlohmann::json samples = nlohmann::json::array();
  for (std::size_t i = 0; i < dataset.samples.size(); ++i) {
    const auto& s = dataset.samples[i];
    const std::string image = numbered("images", i);
    const std::string labels = numbered("labels", i);
    io::write_bytes(dir / image, io::encode_png(io::tensor_to_image(s.image)));
    io::write_bytes(dir / labels, io::encode_png({s.width(), s.height(), 1, s.label_map}));
    nlohmann::json classes = nlohmann::json::object();
    for (const auto& [id, cls] : s.instance_classes) classes[std::to_string(id)] = cls;
    nlohmann::json entry{{"image", image}, {"labels", labels}, {"instance_classes", classes}};
    entry["sequence"] = s.sequence_id ? nlohmann::json(*s.sequence_id) : nlohmann::json(nullptr);
    entry["frame"] = s.frame_index ? nlohmann::json(*s.frame_index) : nlohmann::json(nullptr);
    samples.push_back(std::move(entry));
  }
  const std::string text = nlohmann::json{{"version", 1}, {"samples", samples}}.dump(1) + "\n";
  io::write_bytes(dir / "index.json", {reinterpret_cast<const std::uint8_t*>(text.data()), text.size()});
}

Dataset load_dataset(const std::filesystem::path& dir) {
  const auto index_path = dir / "index.json";
  const auto index_bytes = read_or_format_error(index_path);
  nlohmann::json index;
  try {
    index = nlohmann::json::parse(index_bytes.begin(), index_bytes.end());
  } catch (const nlohmann::json::exception& e) {
    format_error(index_path, std::string("malformed json: ") + e.what());
  }
  if (!index.is_object() || index.value("version", 0) != 1 || !index.contains("samples") ||
      !index["samples"].is_array()) {
    format_error(index_path, "expected {version: 1, samples: [...]}");
  }

  Dataset out;
  for (std::size_t i = 0; i < index["samples"].size(); ++i) {
    const auto& entry = index["samples"][i];
    const std::string where = "samples[" + std::to_string(i) + "]";
    try {
      DenseSample s;
      const auto image_path = dir / entry.at("image").get<std::string>();
      const auto label_path = dir / entry.at("labels").get<std::string>();
      const auto image_bytes = read_or_format_error(image_path);
      const auto label_bytes = read_or_format_error(label_path);
      try {
        s.image = io::image_to_tensor(io::decode_png(image_bytes, 3));
      } catch (const Error& e) {
        format_error(image_path, e.what());
      }
      io::Image8 labels;
      bool gray = false;
      try {
        gray = io::png_is_gray(label_bytes);
        labels = io::decode_png(label_bytes, 1);
      } catch (const Error& e) {
        format_error(label_path, e.what());
      }
      if (!gray) format_error(label_path, "label map must be single-channel");
      if (labels.width != s.width() || labels.height != s.height())
        format_error(label_path, "label map size differs from image");
      s.label_map = std::move(labels.pixels);
      for (const auto& [k, v] : entry.at("instance_classes").items()) s.instance_classes[std::stoi(k)] = v.get<int>();
      if (!entry.at("sequence").is_null()) s.sequence_id = entry["sequence"].get<int>();
      if (!entry.at("frame").is_null()) s.frame_index = entry["frame"].get<int>();
      out.samples.push_back(std::move(s));
    } catch (const nlohmann::json::exception& e) {
      format_error(index_path, where + ": " + e.what());
    } catch (const std::logic_error&) {
      format_error(index_path, where + ": instance ids must be integers");
    }
  }
  try {
    validate(out);
  } catch (const Error& e) {
    format_error(index_path, e.what());
  }
  return out;
}

}  // namespace guidedseg::episodes
