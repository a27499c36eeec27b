#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "mmnet/tensor.hpp"
#include "test_util.hpp"

namespace mmnet {
namespace {

TEST(Shape, RejectsNonPositiveExtents) {
  EXPECT_THROW((Shape{0, 1, 1, 1}.validate()), ShapeError);
  EXPECT_THROW((Shape{1, 1, -2, 1}.validate()), ShapeError);
  EXPECT_NO_THROW((Shape{1, 1, 1, 1}.validate()));
}

TEST(Shape, OverflowingCountIsAllocationError) {
  const int big = std::numeric_limits<int>::max();
  EXPECT_THROW((Shape{big, big, big, big}.validate()), AllocationError);
  EXPECT_THROW(alloc({big, big, big, big}, 0.0f), AllocationError);
}

TEST(Alloc, FillsEveryElement) {
  const Tensor z = alloc({1, 1, 2, 2}, 0.0f);
  ASSERT_EQ(z.size(), 4u);
  for (float v : z.data()) EXPECT_EQ(v, 0.0f);

  const Tensor ones = alloc({1, 3, 256, 256}, 1.0f);
  EXPECT_EQ(ones.size(), 196608u);
  for (float v : ones.data()) EXPECT_EQ(v, 1.0f);

  const Tensor half = alloc({2, 2, 1, 1}, 0.5f);
  ASSERT_EQ(half.size(), 4u);
  for (float v : half.data()) EXPECT_EQ(v, 0.5f);
}

TEST(Tensor, IndexRoundTripOnRandomProbe) {
  std::mt19937_64 rng(11);
  Tensor t({3, 4, 5, 6});
  std::uniform_int_distribution<int> n(0, 2), c(0, 3), y(0, 4), x(0, 5);
  std::uniform_real_distribution<float> v(-5.0f, 5.0f);
  for (int i = 0; i < 500; ++i) {
    const int a = n(rng), b = c(rng), yy = y(rng), xx = x(rng);
    const float value = v(rng);
    t.at(a, b, yy, xx) = value;
    EXPECT_EQ(t.at(a, b, yy, xx), value);
    EXPECT_EQ(t.data()[((static_cast<std::size_t>(a) * 4 + b) * 5 + yy) * 6 + xx], value);
  }
}

TEST(Tensor, BufferSizeMustMatchShape) {
  EXPECT_THROW(Tensor({1, 1, 2, 2}, std::vector<float>(3)), ShapeError);
}

TEST(ConcatChannels, ChannelCountsAdd) {
  EXPECT_EQ(concat_channels(Tensor({1, 16, 64, 64}), Tensor({1, 16, 64, 64})).shape(), (Shape{1, 32, 64, 64}));
  EXPECT_EQ(concat_channels(Tensor({1, 64, 32, 32}), Tensor({1, 64, 32, 32})).shape(), (Shape{1, 128, 32, 32}));
}

TEST(ConcatChannels, OrderingPutsFirstOperandFirst) {
  const Tensor r = concat_channels(Tensor({2, 3, 4, 4}, 1.0f), Tensor({2, 2, 4, 4}, 2.0f));
  for (int n = 0; n < 2; ++n) {
    for (int c = 0; c < 5; ++c) {
      for (int i = 0; i < 16; ++i) EXPECT_EQ(r.plane(n, c)[i], c < 3 ? 1.0f : 2.0f);
    }
  }
}

TEST(ConcatChannels, MismatchIsShapeError) {
  EXPECT_THROW(concat_channels(Tensor({1, 1, 4, 4}), Tensor({1, 1, 4, 5})), ShapeError);
  EXPECT_THROW(concat_channels(Tensor({1, 1, 4, 4}), Tensor({2, 1, 4, 4})), ShapeError);
}

TEST(ConcatChannels, SliceRecoversOperandsBitExactly) {
  std::mt19937_64 rng(3);
  const Tensor a = testing::random_tensor({2, 3, 5, 7}, rng);
  const Tensor b = testing::random_tensor({2, 4, 5, 7}, rng);
  const Tensor ab = concat_channels(a, b);
  EXPECT_EQ(slice_channels(ab, 0, 3).values(), a.values());
  EXPECT_EQ(slice_channels(ab, 3, 4).values(), b.values());
}

TEST(PadZero, CentresSinglePixel) {
  const Tensor r = pad_zero(Tensor({1, 1, 1, 1}, std::vector<float>{5.0f}), 1, 1, 1, 1);
  ASSERT_EQ(r.shape(), (Shape{1, 1, 3, 3}));
  for (int y = 0; y < 3; ++y) {
    for (int x = 0; x < 3; ++x) EXPECT_EQ(r.at(0, 0, y, x), (y == 1 && x == 1) ? 5.0f : 0.0f);
  }
}

TEST(PadZero, ZeroPaddingIsIdentity) {
  std::mt19937_64 rng(4);
  const Tensor x = testing::random_tensor({2, 2, 3, 4}, rng);
  EXPECT_EQ(pad_zero(x, 0, 0, 0, 0).values(), x.values());
}

TEST(PadZero, TopLeftPaddingPlacesOriginalBottomRight) {
  const Tensor x({1, 1, 2, 2}, std::vector<float>{1, 2, 3, 4});
  const Tensor r = pad_zero(x, 1, 0, 1, 0);
  ASSERT_EQ(r.shape(), (Shape{1, 1, 3, 3}));
  const std::vector<float> expected{0, 0, 0, 0, 1, 2, 0, 3, 4};
  EXPECT_EQ(r.values(), expected);
  for (float v : r.data()) EXPECT_TRUE(std::isfinite(v));
}

TEST(Batch, StackAndItemRoundTrip) {
  std::mt19937_64 rng(5);
  const std::vector<Tensor> items{testing::random_tensor({1, 2, 3, 3}, rng), testing::random_tensor({1, 2, 3, 3}, rng)};
  const Tensor b = stack_batch(items);
  EXPECT_EQ(b.shape(), (Shape{2, 2, 3, 3}));
  EXPECT_EQ(batch_item(b, 1).values(), items[1].values());
}

TEST(Finite, DetectsNaN) {
  Tensor t({1, 1, 1, 2});
  EXPECT_TRUE(all_finite(t));
  t.data()[1] = std::numeric_limits<float>::quiet_NaN();
  EXPECT_FALSE(all_finite(t));
}

}  // namespace
}  // namespace mmnet
