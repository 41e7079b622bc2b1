#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <sstream>

#include "mobhfl/param_vector.hpp"

using namespace mobhfl;

TEST(ParamVector, ArithmeticAndNorms) {
  const ParamVector a(std::vector<double>{3.0, 4.0});
  const ParamVector b(std::vector<double>{1.0, 1.0});
  EXPECT_DOUBLE_EQ(norm(a), 5.0);
  EXPECT_DOUBLE_EQ(dot(a, b), 7.0);
  EXPECT_DOUBLE_EQ(distance(a, b), std::sqrt(4.0 + 9.0));
  EXPECT_EQ(a - b, ParamVector(std::vector<double>{2.0, 3.0}));
  EXPECT_EQ(a + b, ParamVector(std::vector<double>{4.0, 5.0}));
  EXPECT_EQ(2.0 * b, ParamVector(std::vector<double>{2.0, 2.0}));
  ParamVector y = b;
  axpy(0.5, a, y);
  EXPECT_EQ(y, ParamVector(std::vector<double>{2.5, 3.0}));
}

TEST(ParamVector, SizeMismatchThrows) {
  const ParamVector a(2);
  const ParamVector b(3);
  EXPECT_THROW(dot(a, b), DimensionMismatch);
  EXPECT_THROW(distance(a, b), DimensionMismatch);
  EXPECT_THROW(a - b, DimensionMismatch);
}

TEST(ParamVector, WeightedSum) {
  const ParamVector a(std::vector<double>{1.0, 0.0});
  const ParamVector b(std::vector<double>{0.0, 2.0});
  const ParamVector* items[] = {&a, &b};
  const double weights[] = {0.25, 0.75};
  EXPECT_EQ(weighted_sum(items, weights), ParamVector(std::vector<double>{0.25, 1.5}));
  const double short_weights[] = {1.0};
  EXPECT_THROW(weighted_sum(items, short_weights), DimensionMismatch);
}

TEST(ParamVector, FiniteCheck) {
  ParamVector a(3, 1.0);
  EXPECT_TRUE(a.all_finite());
  a[1] = std::numeric_limits<double>::quiet_NaN();
  EXPECT_FALSE(a.all_finite());
}

TEST(ParamVector, BinaryRoundTripIsBitExact) {
  const ParamVector w(std::vector<double>{0.1, -2.5e-300, 1e308, -0.0});
  std::stringstream ss;
  write_param_vector(ss, w);
  EXPECT_EQ(ss.str().size(), 8u * 5u);
  const ParamVector r = read_param_vector(ss);
  ASSERT_EQ(r.size(), w.size());
  for (std::size_t i = 0; i < w.size(); ++i) {
    EXPECT_EQ(std::bit_cast<std::uint64_t>(r[i]), std::bit_cast<std::uint64_t>(w[i]));
  }
}

TEST(ParamVector, TruncatedStreamThrows) {
  std::stringstream ss;
  write_param_vector(ss, ParamVector(4, 1.0));
  std::string s = ss.str();
  s.resize(s.size() - 3);
  std::stringstream cut(s);
  EXPECT_THROW(read_param_vector(cut), IoError);
}
