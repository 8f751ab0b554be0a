#pragma once

#include <climits>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <string_view>
#include <vector>

#include "guidedseg/annotations.hpp"
#include "guidedseg/model.hpp"
#include "guidedseg/tensor.hpp"

namespace guidedseg::episodes {

using autodiff::Tensor;
using Rng = std::mt19937_64;

/// P value meaning "annotate every pixel".
inline constexpr int kDensePoints = INT_MAX;

/// Uniform integer in [0, n) by rejection; identical on every platform.
std::uint64_t uniform_index(Rng& rng, std::uint64_t n);
/// Uniform real in [0, 1) from 53 random bits.
double uniform_real(Rng& rng);

struct DenseSample {
  Tensor image;                          // [3, H, W], values q / 255
  std::vector<std::uint8_t> label_map;   // H * W instance ids, 0 = background
  std::map<int, int> instance_classes;   // instance id -> class id
  std::optional<int> sequence_id;
  std::optional<int> frame_index;

  int height() const { return image.dim(1); }
  int width() const { return image.dim(2); }
  bool has_instance(int id) const;
  bool has_class(int class_id) const;
};

struct Dataset {
  std::vector<DenseSample> samples;
};

/// Throws Error(kFormat) when a sample breaks the dataset invariants.
void validate(const Dataset& dataset);

enum class TaskMode { kSemantic, kInteractive, kVideo };

std::string_view to_string(TaskMode mode);
TaskMode parse_task_mode(std::string_view text);

struct TaskDescriptor {
  TaskMode mode = TaskMode::kSemantic;
  // Class id for semantic tasks, instance id otherwise.
  int id = 0;
  // Sequence of a video task.
  std::optional<int> sequence_id;
};

struct Episode {
  std::vector<model::SupportItem> support;
  Tensor query;
  std::vector<std::uint8_t> query_target;  // H * W, values {0, 1}
  TaskDescriptor task;
  int shots = 1;
  int points = 1;
  std::vector<std::size_t> support_samples;
  std::size_t query_sample = 0;
};

/// 1 where the pixel belongs to the task, 0 elsewhere.
std::vector<std::uint8_t> binarize(const DenseSample& sample,
                                   const TaskDescriptor& task);

/// ceil(P/2) positives and floor(P/2) negatives drawn uniformly without
/// replacement; a region smaller than its quota is taken whole.
AnnotationSet sparsify(std::span<const std::uint8_t> target, int height,
                       int width, int points, Rng& rng);
/// Same with explicit per-polarity quotas.
AnnotationSet sparsify(std::span<const std::uint8_t> target, int height,
                       int width, int positives, int negatives, Rng& rng);

struct SamplerOptions {
  // Task ids (classes) a semantic sampler may draw; empty allows all.
  std::set<int> allowed_classes;
  // Semantic: the query also contains an object of another class.
  bool require_distractor = false;
  // Interactive: eligible images hold at least this many instances.
  int min_instances = 1;
};

/// Draws episodes of one mode from an immutable dataset. Still images serve
/// semantic and interactive tasks, sequences serve video tasks.
class EpisodeSampler {
 public:
  EpisodeSampler(const Dataset& dataset, TaskMode mode,
                 SamplerOptions options = {});

  TaskMode mode() const noexcept { return mode_; }

  /// Throws Error(kDatasetTooSmall) when no task has enough images.
  Episode sample(int shots, int points, Rng& rng) const;

  /// Builds the episode for a chosen task and images, with support points
  /// drawn by sparsify.
  Episode make_episode(const TaskDescriptor& task,
                       const std::vector<std::size_t>& support_samples,
                       std::size_t query_sample, int points, Rng& rng) const;

 private:
  struct Candidate {
    TaskDescriptor task;
    // Semantic: samples holding the class; interactive: the one image;
    // video: frames showing the instance, in frame order.
    std::vector<std::size_t> samples;
    // Semantic: samples usable as a query.
    std::vector<std::size_t> queries;
  };

  const Dataset* dataset_;
  TaskMode mode_;
  SamplerOptions options_;
  std::vector<Candidate> candidates_;
};

struct ShapesWorldConfig {
  int height = 64;
  int width = 64;
  int num_classes = 10;
  // Classes never placed in generated images.
  std::set<int> excluded_classes;
  int images = 400;
  int video_sequences = 0;
  int frames = 8;
  int min_instances = 1;
  int max_instances = 4;
  float radius_min = 6.0f;
  float radius_max = 12.0f;
  int min_visible = 20;
  float max_speed = 3.0f;
  float jitter = 1.0f;
  float noise = 0.04f;
};

enum class ShapeKind { kCircle = 0, kSquare = 1, kTriangle = 2 };

inline constexpr int kHueBins = 8;
inline constexpr int kMaxClasses = 3 * kHueBins;

ShapeKind class_shape(int class_id);
int class_hue_bin(int class_id);

/// Procedural dataset: still images first, then video sequences frame by
/// frame. Deterministic in (config, seed).
Dataset generate_shapes_world(const ShapesWorldConfig& config,
                              std::uint64_t seed);

/// index.json plus images/NNNNNN.png (RGB) and labels/NNNNNN.png (gray).
void save_dataset(const Dataset& dataset, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& dir);

}  // namespace guidedseg::episodes
