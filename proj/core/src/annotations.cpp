#include "guidedseg/annotations.hpp"

#include "guidedseg/errors.hpp"

namespace guidedseg {

AnnotationSet::AnnotationSet(int height, int width)
    : height_(height), width_(width) {
  if (height < 1 || width < 1) {
    throw Error(ErrorCode::kInvalidShape, "annotation image size must be positive");
  }
}

namespace {

void check_bounds(const AnnotationSet& set, const PointLabel& p) {
  if (!set.in_bounds(p.row, p.col)) {
    throw Error(ErrorCode::kBadRequest,
                "point (" + std::to_string(p.row) + ", " + std::to_string(p.col) +
                    ") outside " + std::to_string(set.height()) + "x" +
                    std::to_string(set.width()) + " image");
  }
}

}  // namespace

void AnnotationSet::add(const PointLabel& point) {
  check_bounds(*this, point);
  auto [it, inserted] = points_.emplace(std::pair{point.row, point.col}, point.label);
  if (!inserted) {
    throw Error(ErrorCode::kContractViolation,
                "pixel (" + std::to_string(point.row) + ", " +
                    std::to_string(point.col) + ") already labelled");
  }
}

void AnnotationSet::set(const PointLabel& point) {
  check_bounds(*this, point);
  points_[{point.row, point.col}] = point.label;
}

bool AnnotationSet::remove(int row, int col) {
  return points_.erase({row, col}) > 0;
}

bool AnnotationSet::contains(int row, int col) const {
  return points_.count({row, col}) > 0;
}

std::size_t AnnotationSet::count(Polarity polarity) const {
  std::size_t n = 0;
  for (const auto& [_, label] : points_) n += label == polarity ? 1 : 0;
  return n;
}

std::vector<PointLabel> AnnotationSet::points() const {
  std::vector<PointLabel> out;
  out.reserve(points_.size());
  for (const auto& [pos, label] : points_) out.push_back({pos.first, pos.second, label});
  return out;
}

AnnotationSet apply_delta(const AnnotationSet& base, const AnnotationDelta& delta) {
  AnnotationSet out = base;
  for (const auto& [row, col] : delta.removals) out.remove(row, col);
  for (const auto& p : delta.upserts) out.set(p);
  return out;
}

}  // namespace guidedseg
