#pragma once

#include <string>
#include <utility>
#include <vector>

#include "mmnet/autodiff.hpp"
#include "mmnet/tensor.hpp"

namespace mmnet {

/// Multipliers of the five training terms, in order alpha, compositional,
/// KL, gradient, auxiliary.
struct LossWeights {
  float alpha = 1.0f;
  float compositional = 1.0f;
  float kl = 1.0f;
  float gradient = 1.0f;
  float aux = 1.0f;

  void validate() const;
};

struct LossBreakdown {
  double alpha = 0.0;
  double compositional = 0.0;
  double kl = 0.0;
  double gradient = 0.0;
  double aux = 0.0;
  double total = 0.0;

  /// (term name, value) pairs including "total".
  std::vector<std::pair<std::string, double>> records() const;
};

inline constexpr float kProbabilityClamp = 1e-6f;

// Float evaluation. Mattes are (n, 1, h, w); K counts pixels over the batch.

double loss_alpha(const Tensor& pred, const Tensor& gt);
double loss_compositional(const Tensor& pred, const Tensor& gt, const Tensor& image);
/// Mean binary cross-entropy with pred clamped to [eps, 1 - eps].
double loss_kl(const Tensor& pred, const Tensor& gt);
double loss_gradient(const Tensor& pred, const Tensor& gt);
/// Ground truth bilinearly downsampled to the resolution of aux_logits.
Tensor aux_target(const Tensor& gt, int h, int w);
double loss_aux(const Tensor& aux_logits, const Tensor& gt);
LossBreakdown loss_combined(const Tensor& pred, const Tensor& aux_logits, const Tensor& gt, const Tensor& image,
                            const LossWeights& w);

// Differentiable versions. gt/image are constants; all return scalar vars.

ad::Var loss_alpha(ad::Tape& t, ad::Var pred, const Tensor& gt);
ad::Var loss_compositional(ad::Tape& t, ad::Var pred, const Tensor& gt, const Tensor& image);
ad::Var loss_kl(ad::Tape& t, ad::Var pred, const Tensor& gt);
ad::Var loss_gradient(ad::Tape& t, ad::Var pred, const Tensor& gt);
ad::Var loss_aux(ad::Tape& t, ad::Var aux_logits, const Tensor& gt);

struct LossVars {
  ad::Var alpha, compositional, kl, gradient, aux, total;
};
LossVars loss_combined(ad::Tape& t, ad::Var pred, ad::Var aux_logits, const Tensor& gt, const Tensor& image,
                       const LossWeights& w);
LossBreakdown breakdown(const ad::Tape& t, const LossVars& v);

// Evaluation metrics.

enum class GradientNorm { euclidean, l1 };

inline constexpr float kGradientSigma = 1.4f;

/// Gaussian-derivative response (d/dx, d/dy) of a single-channel matte with
/// replicated borders. Returns a (n, 2, h, w) tensor.
Tensor gaussian_gradient(const Tensor& alpha, float sigma = kGradientSigma);

/// (1/K) sum_i || grad(pred)_i - grad(gt)_i ||.
double metric_gradient_error(const Tensor& pred, const Tensor& gt, float sigma = kGradientSigma,
                             GradientNorm norm = GradientNorm::euclidean);
double metric_mad(const Tensor& pred, const Tensor& gt);

}  // namespace mmnet
