#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "mmnet/nn_ops.hpp"
#include "mmnet/objectives.hpp"
#include "reference.hpp"

namespace mmnet {
namespace {

using ad::Parameter;
using ad::Tape;
using testing::naive_gradient_error;
using testing::naive_gradient_loss;
using testing::LossInstance;
using testing::random_loss_instance;
using testing::random_tensor;
using testing::smooth_loss_instance;
using testing::soft_disc;

Tensor row(std::vector<float> v) {
  const int n = static_cast<int>(v.size());
  return Tensor({1, 1, 1, n}, std::move(v));
}

double bce(double p, double g) {
  p = std::clamp(p, 1e-6, 1.0 - 1e-6);
  return -(g * std::log(p) + (1.0 - g) * std::log(1.0 - p));
}

TEST(Weights, RejectNegative) {
  LossWeights w;
  EXPECT_NO_THROW(w.validate());
  w.gradient = -0.1f;
  EXPECT_THROW(w.validate(), std::invalid_argument);
}

TEST(AlphaLoss, Examples) {
  EXPECT_NEAR(loss_alpha(row({0.2f, 0.8f}), row({0.4f, 0.4f})), 0.3, 1e-7);
  const Tensor ones({1, 1, 4, 4}, 1.0f);
  const Tensor zeros({1, 1, 4, 4});
  EXPECT_DOUBLE_EQ(loss_alpha(ones, zeros), 1.0);
  std::mt19937_64 rng(1);
  const Tensor a = random_tensor({2, 1, 5, 5}, rng, 0.0f, 1.0f);
  EXPECT_EQ(loss_alpha(a, a), 0.0);
  EXPECT_THROW(loss_alpha(a, zeros), ShapeError);
}

TEST(CompositionalLoss, Examples) {
  const Tensor image({1, 3, 1, 1}, 0.5f);
  EXPECT_NEAR(loss_compositional(Tensor({1, 1, 1, 1}, 1.0f), Tensor({1, 1, 1, 1}), image), 0.5, 1e-7);
  std::mt19937_64 rng(2);
  const Tensor p = random_tensor({1, 1, 6, 6}, rng, 0.0f, 1.0f);
  const Tensor g = random_tensor({1, 1, 6, 6}, rng, 0.0f, 1.0f);
  EXPECT_EQ(loss_compositional(p, g, Tensor({1, 3, 6, 6})), 0.0);
  EXPECT_EQ(loss_compositional(p, p, random_tensor({1, 3, 6, 6}, rng, 0.0f, 1.0f)), 0.0);
  EXPECT_THROW(loss_compositional(p, g, Tensor({1, 3, 5, 6})), ShapeError);
}

TEST(KlLoss, ClosedForms) {
  const Tensor half({1, 1, 3, 3}, 0.5f);
  EXPECT_NEAR(loss_kl(half, half), std::log(2.0), 1e-6);
  EXPECT_NEAR(loss_kl(Tensor({1, 1, 1, 1}, 0.25f), Tensor({1, 1, 1, 1}, 1.0f)), -std::log(0.25), 1e-6);
  EXPECT_LT(loss_kl(Tensor({1, 1, 2, 2}, 1.0f), Tensor({1, 1, 2, 2}, 1.0f)), 2e-6);
  // Clamping keeps hard mistakes finite.
  EXPECT_NEAR(loss_kl(Tensor({1, 1, 1, 1}, 0.0f), Tensor({1, 1, 1, 1}, 1.0f)), -std::log(1e-6), 1e-4);
}

TEST(GradientLoss, MatchesHandStencil) {
  std::mt19937_64 rng(3);
  const Tensor p = random_tensor({1, 1, 5, 5}, rng, 0.0f, 1.0f);
  const Tensor g = random_tensor({1, 1, 5, 5}, rng, 0.0f, 1.0f);
  EXPECT_NEAR(loss_gradient(p, g), naive_gradient_loss(p, g), 1e-6);
  EXPECT_EQ(loss_gradient(p, p), 0.0);
}

TEST(GradientLoss, ConstantPairsVanishInInterior) {
  const Tensor a({1, 1, 6, 6}, 0.3f);
  const Tensor b({1, 1, 6, 6}, 0.8f);
  const Tensor ga = sobel_gradients(a);
  const Tensor gb = sobel_gradients(b);
  for (int c = 0; c < 2; ++c)
    for (int y = 1; y < 5; ++y)
      for (int x = 1; x < 5; ++x) EXPECT_EQ(ga.at(0, c, y, x) - gb.at(0, c, y, x), 0.0f);
  // What remains comes from the zero border alone.
  EXPECT_NEAR(loss_gradient(a, b), naive_gradient_loss(a, b), 1e-7);
  EXPECT_GT(loss_gradient(a, b), 0.0);
}

TEST(AuxLoss, CheckerboardMatchesDirectCrossEntropy) {
  Tensor gt({1, 1, 32, 32});
  for (int y = 0; y < 32; ++y)
    for (int x = 0; x < 32; ++x) gt.at(0, 0, y, x) = ((x / 2 + y / 2) % 2 == 0) ? 1.0f : 0.0f;
  gt.at(0, 0, 0, 1) = 0.25f;  // break the symmetry of one block
  std::mt19937_64 rng(4);
  const Tensor logits = random_tensor({1, 2, 16, 16}, rng, -3.0f, 3.0f);
  double expected = 0.0;
  for (int y = 0; y < 16; ++y) {
    for (int x = 0; x < 16; ++x) {
      // Half-pixel centres of an exact 2x downsample land between four inputs.
      const double target = (gt.at(0, 0, 2 * y, 2 * x) + gt.at(0, 0, 2 * y, 2 * x + 1) + gt.at(0, 0, 2 * y + 1, 2 * x) +
                             gt.at(0, 0, 2 * y + 1, 2 * x + 1)) / 4.0;
      const double l0 = logits.at(0, 0, y, x), l1 = logits.at(0, 1, y, x);
      const double p = 1.0 / (1.0 + std::exp(l0 - l1));
      expected += bce(p, target);
    }
  }
  EXPECT_NEAR(loss_aux(logits, gt), expected / 256.0, 1e-6);
}

TEST(AuxLoss, LowerBoundAndConfidentForeground) {
  Tensor strong({1, 2, 4, 4});
  for (int i = 0; i < 16; ++i) {
    strong.data()[i] = -20.0f;
    strong.data()[16 + i] = 20.0f;
  }
  EXPECT_LT(loss_aux(strong, Tensor({1, 1, 8, 8}, 1.0f)), 2e-6);

  // Predicting the downsampled target exactly leaves its entropy.
  std::mt19937_64 rng(5);
  const Tensor gt = random_tensor({1, 1, 8, 8}, rng, 0.1f, 0.9f);
  const Tensor target = aux_target(gt, 4, 4);
  Tensor logits({1, 2, 4, 4});
  double entropy = 0.0;
  for (int i = 0; i < 16; ++i) {
    const double q = target.data()[i];
    logits.data()[16 + i] = static_cast<float>(std::log(q / (1.0 - q)));
    entropy += bce(q, q);
  }
  EXPECT_NEAR(loss_aux(logits, gt), entropy / 16.0, 1e-5);
  EXPECT_THROW(loss_aux(Tensor({1, 3, 4, 4}), gt), ShapeError);
}

TEST(AuxLoss, InvariantToLogitShift) {
  std::mt19937_64 rng(6);
  const Tensor logits = random_tensor({2, 2, 4, 4}, rng, -2.0f, 2.0f);
  const Tensor gt = random_tensor({2, 1, 16, 16}, rng, 0.0f, 1.0f);
  Tensor shifted = logits;
  for (float& v : shifted.data()) v += 3.0f;
  EXPECT_NEAR(loss_aux(logits, gt), loss_aux(shifted, gt), 1e-6);
}

TEST(CombinedLoss, ZeroWeightsAndPerfectPrediction) {
  const LossInstance in = random_loss_instance(7);
  EXPECT_EQ(loss_combined(in.pred, in.aux, in.gt, in.image, LossWeights{0, 0, 0, 0, 0}).total, 0.0);
  const LossBreakdown b = loss_combined(in.gt, in.aux, in.gt, in.image, LossWeights{});
  EXPECT_EQ(b.alpha, 0.0);
  EXPECT_EQ(b.compositional, 0.0);
  EXPECT_EQ(b.gradient, 0.0);
  EXPECT_NEAR(b.total, loss_kl(in.gt, in.gt) + loss_aux(in.aux, in.gt), 1e-12);
}

TEST(CombinedLoss, RecomposesWeightedTerms) {
  const LossInstance in = random_loss_instance(8);
  const LossWeights w{0.5f, 2.0f, 0.25f, 3.0f, 1.5f};
  const LossBreakdown b = loss_combined(in.pred, in.aux, in.gt, in.image, w);
  const double direct = 0.5 * loss_alpha(in.pred, in.gt) + 2.0 * loss_compositional(in.pred, in.gt, in.image) +
                        0.25 * loss_kl(in.pred, in.gt) + 3.0 * loss_gradient(in.pred, in.gt) +
                        1.5 * loss_aux(in.aux, in.gt);
  EXPECT_NEAR(b.total, direct, 1e-6);
  const auto records = b.records();
  ASSERT_EQ(records.size(), 6u);
  EXPECT_EQ(records.back().first, "total");

  Tape t;
  const LossVars v = loss_combined(t, t.constant(in.pred), t.constant(in.aux), in.gt, in.image, w);
  const LossBreakdown tb = breakdown(t, v);
  EXPECT_NEAR(tb.alpha, b.alpha, 1e-6);
  EXPECT_NEAR(tb.compositional, b.compositional, 1e-6);
  EXPECT_NEAR(tb.kl, b.kl, 1e-6);
  EXPECT_NEAR(tb.gradient, b.gradient, 1e-6);
  EXPECT_NEAR(tb.aux, b.aux, 1e-6);
  EXPECT_NEAR(tb.total, b.total, 1e-6);
}

void expect_grad_check(const ad::LossBuilder& f, std::vector<Parameter*> params) {
  const ad::GradCheckReport r = ad::grad_check(f, params);
  EXPECT_GE(r.checked, 50u);
  EXPECT_TRUE(r.passed()) << "max error " << r.max_error << ", failures " << r.failures.size();
}

TEST(LossGradients, EveryTermMatchesFiniteDifferences) {
  const LossInstance in = smooth_loss_instance(9);

  Parameter pred("pred", in.pred);
  Parameter aux("aux", in.aux);
  expect_grad_check([&](Tape& t) { return loss_alpha(t, t.parameter(pred), in.gt); }, {&pred});
  expect_grad_check([&](Tape& t) { return loss_compositional(t, t.parameter(pred), in.gt, in.image); }, {&pred});
  expect_grad_check([&](Tape& t) { return loss_kl(t, t.parameter(pred), in.gt); }, {&pred});
  expect_grad_check([&](Tape& t) { return loss_gradient(t, t.parameter(pred), in.gt); }, {&pred});
  expect_grad_check([&](Tape& t) { return loss_aux(t, t.parameter(aux), in.gt); }, {&aux});
  expect_grad_check(
      [&](Tape& t) {
        return loss_combined(t, t.parameter(pred), t.parameter(aux), in.gt, in.image, LossWeights{}).total;
      },
      {&pred, &aux});
}

TEST(LossGradients, AllTermsAreNonNegative) {
  for (std::uint64_t s = 10; s < 20; ++s) {
    const LossInstance in = random_loss_instance(s);
    const LossBreakdown b = loss_combined(in.pred, in.aux, in.gt, in.image, LossWeights{});
    for (const auto& [name, v] : b.records()) EXPECT_GE(v, 0.0) << name;
  }
}

TEST(Metrics, GradientErrorMatchesDenseFilter) {
  const Tensor gt = soft_disc(40, 48, 22.0, 19.0, 11.0, 3.0);
  const Tensor pred = soft_disc(40, 48, 24.5, 18.0, 10.0, 4.0);
  EXPECT_NEAR(metric_gradient_error(pred, gt), naive_gradient_error(pred, gt, kGradientSigma), 1e-6);
  EXPECT_NEAR(loss_gradient(pred, gt), naive_gradient_loss(pred, gt), 1e-6);
  EXPECT_GT(metric_gradient_error(pred, gt), 0.0);
  EXPECT_EQ(metric_gradient_error(gt, gt), 0.0);
  EXPECT_EQ(loss_gradient(gt, gt), 0.0);
  EXPECT_GE(metric_gradient_error(pred, gt, kGradientSigma, GradientNorm::l1), metric_gradient_error(pred, gt));
}

TEST(Metrics, GradientErrorVanishesOnConstants) {
  EXPECT_EQ(metric_gradient_error(Tensor({1, 1, 9, 9}, 0.4f), Tensor({1, 1, 9, 9}, 0.4f)), 0.0);
  // Replicated borders see no edge in a constant field.
  EXPECT_NEAR(metric_gradient_error(Tensor({1, 1, 9, 9}, 0.2f), Tensor({1, 1, 9, 9}, 0.9f)), 0.0, 1e-7);
}

TEST(Metrics, MadExamples) {
  Tensor mask({1, 1, 4, 4});
  for (int i = 0; i < 8; ++i) mask.data()[i] = 1.0f;
  Tensor complement = mask;
  for (float& v : complement.data()) v = 1.0f - v;
  EXPECT_EQ(metric_mad(mask, mask), 0.0);
  EXPECT_DOUBLE_EQ(metric_mad(mask, complement), 1.0);
  Tensor half_flipped = mask;
  for (int i = 0; i < 4; ++i) half_flipped.data()[i] = 0.0f;
  for (int i = 8; i < 12; ++i) half_flipped.data()[i] = 1.0f;
  EXPECT_DOUBLE_EQ(metric_mad(mask, half_flipped), 0.5);

  std::mt19937_64 rng(11);
  const Tensor a = random_tensor({2, 1, 7, 7}, rng, 0.0f, 1.0f);
  const Tensor b = random_tensor({2, 1, 7, 7}, rng, 0.0f, 1.0f);
  EXPECT_EQ(metric_mad(a, b), loss_alpha(a, b));
}

}  // namespace
}  // namespace mmnet
