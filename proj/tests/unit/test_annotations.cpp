#include <gtest/gtest.h>

#include "guidedseg/annotations.hpp"
#include "guidedseg/errors.hpp"

using namespace guidedseg;

TEST(AnnotationSet, BoundsAndDuplicates) {
  AnnotationSet a(4, 5);
  a.add({0, 0, Polarity::kPositive});
  a.add({3, 4, Polarity::kNegative});
  EXPECT_EQ(a.size(), 2u);
  EXPECT_THROW(a.add({4, 0, Polarity::kPositive}), Error);
  EXPECT_THROW(a.add({0, -1, Polarity::kPositive}), Error);
  try {
    a.add({0, 0, Polarity::kNegative});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kContractViolation);
  }
  a.set({0, 0, Polarity::kNegative});
  EXPECT_EQ(a.size(), 2u);
  EXPECT_EQ(a.count(Polarity::kNegative), 2u);
  EXPECT_EQ(a.count(Polarity::kPositive), 0u);
}

TEST(AnnotationSet, RowMajorPointsAndRemoval) {
  AnnotationSet a(8, 8);
  a.add({5, 1, Polarity::kPositive});
  a.add({2, 7, Polarity::kNegative});
  a.add({2, 3, Polarity::kPositive});
  auto pts = a.points();
  ASSERT_EQ(pts.size(), 3u);
  EXPECT_EQ(pts[0], (PointLabel{2, 3, Polarity::kPositive}));
  EXPECT_EQ(pts[2], (PointLabel{5, 1, Polarity::kPositive}));
  EXPECT_TRUE(a.remove(2, 7));
  EXPECT_FALSE(a.remove(2, 7));
  EXPECT_FALSE(a.contains(2, 7));
  a.clear();
  EXPECT_TRUE(a.empty());
}

TEST(AnnotationSet, ApplyDeltaRemovesThenUpserts) {
  AnnotationSet a(8, 8);
  a.add({1, 1, Polarity::kPositive});
  a.add({2, 2, Polarity::kNegative});
  AnnotationDelta d;
  d.removals = {{1, 1}, {6, 6}};
  d.upserts = {{1, 1, Polarity::kNegative}, {3, 3, Polarity::kPositive}, {3, 3, Polarity::kNegative}};
  AnnotationSet b = apply_delta(a, d);
  EXPECT_EQ(b.size(), 3u);
  EXPECT_EQ(b.points()[0].label, Polarity::kNegative);
  EXPECT_EQ(b.points()[2], (PointLabel{3, 3, Polarity::kNegative}));
  EXPECT_EQ(apply_delta(a, AnnotationDelta{}), a);
  AnnotationDelta bad;
  bad.upserts = {{9, 0, Polarity::kPositive}};
  EXPECT_THROW(apply_delta(a, bad), Error);
}
