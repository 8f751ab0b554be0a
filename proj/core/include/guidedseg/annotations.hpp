#pragma once

#include <cstdint>
#include <map>
#include <utility>
#include <vector>

namespace guidedseg {

enum class Polarity : std::uint8_t { kNegative = 0, kPositive = 1 };

struct PointLabel {
  int row = 0;
  int col = 0;
  Polarity label = Polarity::kPositive;

  friend bool operator==(const PointLabel&, const PointLabel&) = default;
};

/// Sparse point labels on one image. At most one label per pixel; pixels
/// without a point are unknown.
class AnnotationSet {
 public:
  AnnotationSet() = default;
  AnnotationSet(int height, int width);

  int height() const noexcept { return height_; }
  int width() const noexcept { return width_; }

  /// Inserts a point; throws on out-of-bounds or an already-labelled pixel.
  void add(const PointLabel& point);
  /// Inserts or relabels a point (last write wins); throws on out-of-bounds.
  void set(const PointLabel& point);
  /// Returns false when no point was present.
  bool remove(int row, int col);
  void clear() noexcept { points_.clear(); }

  bool contains(int row, int col) const;
  bool in_bounds(int row, int col) const noexcept {
    return row >= 0 && row < height_ && col >= 0 && col < width_;
  }

  std::size_t size() const noexcept { return points_.size(); }
  bool empty() const noexcept { return points_.empty(); }
  std::size_t count(Polarity polarity) const;

  /// Points in row-major order.
  std::vector<PointLabel> points() const;

  friend bool operator==(const AnnotationSet&, const AnnotationSet&) = default;

 private:
  int height_ = 0;
  int width_ = 0;
  std::map<std::pair<int, int>, Polarity> points_;
};

/// Edit applied by update_guidance: removals first, then upserts.
struct AnnotationDelta {
  std::vector<PointLabel> upserts;
  std::vector<std::pair<int, int>> removals;

  bool empty() const noexcept { return upserts.empty() && removals.empty(); }
};

AnnotationSet apply_delta(const AnnotationSet& base, const AnnotationDelta& delta);

}  // namespace guidedseg
