#include <gtest/gtest.h>

#include "capsar/tensor.hpp"

using capsar::Tensor;

TEST(Tensor, ShapeAndSize) {
  Tensor<float> t({2, 3});
  EXPECT_EQ(t.rank(), 2u);
  EXPECT_EQ(t.size(), 6u);
  EXPECT_EQ(t.rows(), 2u);
  EXPECT_EQ(t.cols(), 3u);
  for (float v : t.values()) EXPECT_EQ(v, 0.0f);
  EXPECT_EQ(capsar::shape_string(t.shape()), "[2x3]");
}

TEST(Tensor, RejectsZeroExtentsAndBadData) {
  EXPECT_THROW(Tensor<float>({2, 0}), capsar::DimensionError);
  EXPECT_THROW(Tensor<float>({2, 2}, {1, 2, 3}), capsar::DimensionError);
  EXPECT_THROW((Tensor<float>::matrix({{1, 2}, {3}})), capsar::DimensionError);
}

TEST(Tensor, RowMajorAccess) {
  auto m = Tensor<double>::matrix({{1, 2, 3}, {4, 5, 6}});
  EXPECT_EQ(m.at(1, 0), 4.0);
  EXPECT_EQ(m[5], 6.0);
  auto r = m.row(1);
  ASSERT_EQ(r.size(), 3u);
  EXPECT_EQ(r[2], 6.0);
  r[0] = -1.0;
  EXPECT_EQ(m.at(1, 0), -1.0);
}

TEST(Tensor, ReshapeKeepsDataAndChecksSize) {
  auto v = Tensor<float>::vector({1, 2, 3, 4, 5, 6});
  auto m = v.reshaped({3, 2});
  EXPECT_EQ(m.at(2, 1), 6.0f);
  EXPECT_THROW(v.reshaped({4, 2}), capsar::DimensionError);
}

TEST(Tensor, FiniteCheckAndCast) {
  auto v = Tensor<double>::vector({0.5, -2.0});
  EXPECT_TRUE(v.all_finite());
  auto f = v.cast<float>();
  EXPECT_EQ(f[1], -2.0f);
  v[0] = std::numeric_limits<double>::quiet_NaN();
  EXPECT_FALSE(v.all_finite());
  v[0] = std::numeric_limits<double>::infinity();
  EXPECT_FALSE(v.all_finite());
}

TEST(Tensor, DotAndNorm) {
  auto a = Tensor<double>::vector({3, 4});
  auto b = Tensor<double>::vector({1, -1});
  EXPECT_DOUBLE_EQ(capsar::squared_norm<double>(a.values()), 25.0);
  EXPECT_DOUBLE_EQ(capsar::dot<double>(a.values(), b.values()), -1.0);
}

TEST(Tensor, Equality) {
  auto a = Tensor<float>::vector({1, 2});
  auto b = Tensor<float>::vector({1, 2});
  EXPECT_EQ(a, b);
  EXPECT_NE(a, a.reshaped({1, 2}));
}
