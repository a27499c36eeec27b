#include "mmnet/objectives.hpp"

#include <algorithm>
#include <cmath>

#include "mmnet/nn_ops.hpp"

namespace mmnet {
namespace {

void require_same(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(what) + ": shape " + a.shape().str() + " vs " + b.shape().str());
  }
}

void require_matte(const Tensor& a, const char* what) {
  if (a.c() != 1) throw ShapeError(std::string(what) + ": expected a single-channel matte, got " + a.shape().str());
}

void require_image(const Tensor& image, const Tensor& matte, const char* what) {
  if (image.c() != 3 || image.n() != matte.n() || image.h() != matte.h() || image.w() != matte.w()) {
    throw ShapeError(std::string(what) + ": image " + image.shape().str() + " does not match matte " +
                     matte.shape().str());
  }
}

double mean_abs_diff(const Tensor& a, const Tensor& b) {
  double total = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) total += std::abs(static_cast<double>(a.data()[i]) - b.data()[i]);
  return total / static_cast<double>(a.size());
}

float sign(float v) { return v > 0.0f ? 1.0f : (v < 0.0f ? -1.0f : 0.0f); }

float clamp_prob(float p) { return std::min(std::max(p, kProbabilityClamp), 1.0f - kProbabilityClamp); }

// mean |x - target| with target constant.
ad::Var l1_mean(ad::Tape& t, ad::Var x, Tensor target, const char* op) {
  const Tensor& xv = t.value(x);
  require_same(xv, target, op);
  const double value = mean_abs_diff(xv, target);
  return t.record_scalar(
      value, {x},
      [x, target = std::move(target)](ad::Tape& tp, int self) {
        const float g = tp.grad(ad::Var{self}).data()[0];
        const Tensor& xv2 = tp.value(x);
        const float k = g / static_cast<float>(xv2.size());
        Tensor dx(xv2.shape());
        for (std::size_t i = 0; i < dx.size(); ++i) dx.data()[i] = k * sign(xv2.data()[i] - target.data()[i]);
        tp.accumulate(x, dx);
      },
      op);
}

}  // namespace

void LossWeights::validate() const {
  for (float b : {alpha, compositional, kl, gradient, aux}) {
    if (!(b >= 0.0f)) throw std::invalid_argument("loss weights must be >= 0");
  }
}

std::vector<std::pair<std::string, double>> LossBreakdown::records() const {
  return {{"alpha", alpha}, {"compositional", compositional}, {"kl", kl},
          {"gradient", gradient}, {"aux", aux}, {"total", total}};
}

double loss_alpha(const Tensor& pred, const Tensor& gt) {
  require_same(pred, gt, "loss_alpha");
  return mean_abs_diff(pred, gt);
}

double loss_compositional(const Tensor& pred, const Tensor& gt, const Tensor& image) {
  require_same(pred, gt, "loss_compositional");
  require_matte(pred, "loss_compositional");
  require_image(image, pred, "loss_compositional");
  const std::size_t plane = pred.shape().plane();
  double total = 0.0;
  for (int n = 0; n < pred.n(); ++n) {
    const float* a = pred.plane(n, 0);
    const float* g = gt.plane(n, 0);
    for (int c = 0; c < 3; ++c) {
      const float* img = image.plane(n, c);
      for (std::size_t i = 0; i < plane; ++i) {
        total += std::abs(static_cast<double>(a[i]) * img[i] - static_cast<double>(g[i]) * img[i]);
      }
    }
  }
  return total / (3.0 * static_cast<double>(pred.size()));
}

double loss_kl(const Tensor& pred, const Tensor& gt) {
  require_same(pred, gt, "loss_kl");
  double total = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double p = clamp_prob(pred.data()[i]);
    const double g = gt.data()[i];
    total -= g * std::log(p) + (1.0 - g) * std::log(1.0 - p);
  }
  return total / static_cast<double>(pred.size());
}

double loss_gradient(const Tensor& pred, const Tensor& gt) {
  require_same(pred, gt, "loss_gradient");
  require_matte(pred, "loss_gradient");
  return mean_abs_diff(sobel_gradients(pred), sobel_gradients(gt));
}

Tensor aux_target(const Tensor& gt, int h, int w) {
  require_matte(gt, "aux_target");
  return bilinear_resize(gt, h, w, false);
}

double loss_aux(const Tensor& aux_logits, const Tensor& gt) {
  if (aux_logits.c() != 2 || aux_logits.n() != gt.n()) {
    throw ShapeError("loss_aux: logits " + aux_logits.shape().str() + " do not match matte " + gt.shape().str());
  }
  const Tensor fg = slice_channels(softmax2(aux_logits), 1, 1);
  return loss_kl(fg, aux_target(gt, aux_logits.h(), aux_logits.w()));
}

LossBreakdown loss_combined(const Tensor& pred, const Tensor& aux_logits, const Tensor& gt, const Tensor& image,
                            const LossWeights& w) {
  w.validate();
  LossBreakdown b;
  b.alpha = loss_alpha(pred, gt);
  b.compositional = loss_compositional(pred, gt, image);
  b.kl = loss_kl(pred, gt);
  b.gradient = loss_gradient(pred, gt);
  b.aux = loss_aux(aux_logits, gt);
  b.total = w.alpha * b.alpha + w.compositional * b.compositional + w.kl * b.kl + w.gradient * b.gradient +
            w.aux * b.aux;
  return b;
}

ad::Var loss_alpha(ad::Tape& t, ad::Var pred, const Tensor& gt) { return l1_mean(t, pred, gt, "loss_alpha"); }

ad::Var loss_compositional(ad::Tape& t, ad::Var pred, const Tensor& gt, const Tensor& image) {
  const Tensor& pv = t.value(pred);
  const double value = loss_compositional(pv, gt, image);
  return t.record_scalar(
      value, {pred},
      [pred, gt, image](ad::Tape& tp, int self) {
        const float g = tp.grad(ad::Var{self}).data()[0];
        const Tensor& a = tp.value(pred);
        const float k = g / (3.0f * static_cast<float>(a.size()));
        const std::size_t plane = a.shape().plane();
        Tensor da(a.shape());
        for (int n = 0; n < a.n(); ++n) {
          const float* ap = a.plane(n, 0);
          const float* gp = gt.plane(n, 0);
          float* d = da.plane(n, 0);
          for (std::size_t i = 0; i < plane; ++i) {
            const float s = sign(ap[i] - gp[i]);
            float mag = 0.0f;
            for (int c = 0; c < 3; ++c) mag += std::abs(image.plane(n, c)[i]);
            d[i] = k * s * mag;
          }
        }
        tp.accumulate(pred, da);
      },
      "loss_compositional");
}

ad::Var loss_kl(ad::Tape& t, ad::Var pred, const Tensor& gt) {
  const double value = loss_kl(t.value(pred), gt);
  return t.record_scalar(
      value, {pred},
      [pred, gt](ad::Tape& tp, int self) {
        const float g = tp.grad(ad::Var{self}).data()[0];
        const Tensor& p = tp.value(pred);
        const double k = g / static_cast<double>(p.size());
        Tensor dp(p.shape());
        for (std::size_t i = 0; i < p.size(); ++i) {
          const float pv = p.data()[i];
          if (pv < kProbabilityClamp || pv > 1.0f - kProbabilityClamp) continue;
          const double y = gt.data()[i];
          dp.data()[i] = static_cast<float>(k * (-y / pv + (1.0 - y) / (1.0 - pv)));
        }
        tp.accumulate(pred, dp);
      },
      "loss_kl");
}

ad::Var loss_gradient(ad::Tape& t, ad::Var pred, const Tensor& gt) {
  require_matte(t.value(pred), "loss_gradient");
  require_same(t.value(pred), gt, "loss_gradient");
  return l1_mean(t, ad::sobel_gradients(t, pred), sobel_gradients(gt), "loss_gradient");
}

ad::Var loss_aux(ad::Tape& t, ad::Var aux_logits, const Tensor& gt) {
  const Tensor& lv = t.value(aux_logits);
  if (lv.c() != 2 || lv.n() != gt.n()) {
    throw ShapeError("loss_aux: logits " + lv.shape().str() + " do not match matte " + gt.shape().str());
  }
  const ad::Var fg = ad::slice_channels(t, ad::softmax2(t, aux_logits), 1, 1);
  return loss_kl(t, fg, aux_target(gt, lv.h(), lv.w()));
}

LossVars loss_combined(ad::Tape& t, ad::Var pred, ad::Var aux_logits, const Tensor& gt, const Tensor& image,
                       const LossWeights& w) {
  w.validate();
  LossVars v;
  v.alpha = loss_alpha(t, pred, gt);
  v.compositional = loss_compositional(t, pred, gt, image);
  v.kl = loss_kl(t, pred, gt);
  v.gradient = loss_gradient(t, pred, gt);
  v.aux = loss_aux(t, aux_logits, gt);
  ad::Var total = ad::scale(t, v.alpha, w.alpha);
  total = ad::add(t, total, ad::scale(t, v.compositional, w.compositional));
  total = ad::add(t, total, ad::scale(t, v.kl, w.kl));
  total = ad::add(t, total, ad::scale(t, v.gradient, w.gradient));
  total = ad::add(t, total, ad::scale(t, v.aux, w.aux));
  v.total = total;
  return v;
}

LossBreakdown breakdown(const ad::Tape& t, const LossVars& v) {
  LossBreakdown b;
  b.alpha = t.scalar(v.alpha);
  b.compositional = t.scalar(v.compositional);
  b.kl = t.scalar(v.kl);
  b.gradient = t.scalar(v.gradient);
  b.aux = t.scalar(v.aux);
  b.total = t.scalar(v.total);
  return b;
}

Tensor gaussian_gradient(const Tensor& alpha, float sigma) {
  require_matte(alpha, "gaussian_gradient");
  const auto [kx, ky] = gaussian_derivative_kernels(sigma);
  const int k = kx.h();
  const int r = k / 2;
  const int h = alpha.h();
  const int w = alpha.w();
  const int pw = w + 2 * r;
  Tensor out({alpha.n(), 2, h, w});
  std::vector<float> padded(static_cast<std::size_t>(h + 2 * r) * pw);
  for (int n = 0; n < alpha.n(); ++n) {
    const float* src = alpha.plane(n, 0);
    for (int y = 0; y < h + 2 * r; ++y) {
      const int sy = std::clamp(y - r, 0, h - 1);
      for (int x = 0; x < pw; ++x) {
        padded[static_cast<std::size_t>(y) * pw + x] = src[static_cast<std::size_t>(sy) * w + std::clamp(x - r, 0, w - 1)];
      }
    }
    float* gx = out.plane(n, 0);
    float* gy = out.plane(n, 1);
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        double sx = 0.0, sy = 0.0;
        for (int dy = 0; dy < k; ++dy) {
          const float* row = padded.data() + static_cast<std::size_t>(y + dy) * pw + x;
          const float* kxr = kx.plane(0, 0) + static_cast<std::size_t>(dy) * k;
          const float* kyr = ky.plane(0, 0) + static_cast<std::size_t>(dy) * k;
          for (int dx = 0; dx < k; ++dx) {
            sx += static_cast<double>(kxr[dx]) * row[dx];
            sy += static_cast<double>(kyr[dx]) * row[dx];
          }
        }
        gx[static_cast<std::size_t>(y) * w + x] = static_cast<float>(sx);
        gy[static_cast<std::size_t>(y) * w + x] = static_cast<float>(sy);
      }
    }
  }
  return out;
}

double metric_gradient_error(const Tensor& pred, const Tensor& gt, float sigma, GradientNorm norm) {
  require_same(pred, gt, "metric_gradient_error");
  require_matte(pred, "metric_gradient_error");
  const Tensor gp = gaussian_gradient(pred, sigma);
  const Tensor gg = gaussian_gradient(gt, sigma);
  const std::size_t plane = pred.shape().plane();
  double total = 0.0;
  for (int n = 0; n < pred.n(); ++n) {
    const float* px = gp.plane(n, 0);
    const float* py = gp.plane(n, 1);
    const float* gx = gg.plane(n, 0);
    const float* gy = gg.plane(n, 1);
    for (std::size_t i = 0; i < plane; ++i) {
      const double dx = static_cast<double>(px[i]) - gx[i];
      const double dy = static_cast<double>(py[i]) - gy[i];
      total += norm == GradientNorm::euclidean ? std::sqrt(dx * dx + dy * dy) : std::abs(dx) + std::abs(dy);
    }
  }
  return total / static_cast<double>(pred.size());
}

double metric_mad(const Tensor& pred, const Tensor& gt) {
  require_same(pred, gt, "metric_mad");
  return mean_abs_diff(pred, gt);
}

}  // namespace mmnet
