#include "mmnet/nn_ops.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace mmnet {
namespace {

// Output positions o for which o * stride + offset lands inside [0, in).
struct TapRange {
  int begin = 0;
  int end = 0;
  int offset = 0;
};

TapRange tap_range(int in, int out, int stride, int offset) {
  TapRange r;
  r.offset = offset;
  r.begin = offset >= 0 ? 0 : (-offset + stride - 1) / stride;
  const int last = in - 1 - offset;
  r.end = last < 0 ? r.begin : std::min(out, last / stride + 1);
  r.end = std::max(r.end, r.begin);
  return r;
}

void check_conv_shapes(const Tensor& x, const Tensor& weights, std::span<const float> bias,
                       const ConvSpec& spec) {
  spec.validate(x.c());
  const Shape ws = weights.shape();
  if (ws.h != spec.kernel_h || ws.w != spec.kernel_w) {
    throw ShapeError("conv2d: weight shape " + ws.str() + " does not match kernel " +
                     std::to_string(spec.kernel_h) + "x" + std::to_string(spec.kernel_w));
  }
  if (ws.c * spec.groups != x.c()) {
    throw ShapeError("conv2d: weight shape " + ws.str() + " expects " + std::to_string(ws.c * spec.groups) +
                     " input channels, got " + std::to_string(x.c()));
  }
  if (ws.n % spec.groups != 0) {
    throw ShapeError("conv2d: output channels " + std::to_string(ws.n) + " not divisible by groups");
  }
  if (!bias.empty() && static_cast<int>(bias.size()) != ws.n) {
    throw ShapeError("conv2d: bias length " + std::to_string(bias.size()) + " != output channels " +
                     std::to_string(ws.n));
  }
}

template <typename Fn>
void for_each_tap(const ConvSpec& spec, const ConvGeometry& g, int in_h, int in_w, Fn&& fn) {
  for (int ky = 0; ky < spec.kernel_h; ++ky) {
    const TapRange rows = tap_range(in_h, g.out_h, spec.stride, ky * spec.dilation - g.pad_top);
    if (rows.begin >= rows.end) continue;
    for (int kx = 0; kx < spec.kernel_w; ++kx) {
      const TapRange cols = tap_range(in_w, g.out_w, spec.stride, kx * spec.dilation - g.pad_left);
      if (cols.begin >= cols.end) continue;
      fn(ky, kx, rows, cols);
    }
  }
}

void accumulate_tap(float* out, int out_w, const float* in, int in_w, const TapRange& rows,
                    const TapRange& cols, int stride, float wv) {
  for (int oy = rows.begin; oy < rows.end; ++oy) {
    const float* src = in + static_cast<std::ptrdiff_t>(oy * stride + rows.offset) * in_w + cols.offset;
    float* dst = out + static_cast<std::ptrdiff_t>(oy) * out_w;
    if (stride == 1) {
      for (int ox = cols.begin; ox < cols.end; ++ox) dst[ox] += wv * src[ox];
    } else {
      for (int ox = cols.begin; ox < cols.end; ++ox) dst[ox] += wv * src[ox * stride];
    }
  }
}

void scatter_tap(float* in, int in_w, const float* out, int out_w, const TapRange& rows,
                 const TapRange& cols, int stride, float wv) {
  for (int oy = rows.begin; oy < rows.end; ++oy) {
    float* dst = in + static_cast<std::ptrdiff_t>(oy * stride + rows.offset) * in_w + cols.offset;
    const float* src = out + static_cast<std::ptrdiff_t>(oy) * out_w;
    if (stride == 1) {
      for (int ox = cols.begin; ox < cols.end; ++ox) dst[ox] += wv * src[ox];
    } else {
      for (int ox = cols.begin; ox < cols.end; ++ox) dst[ox * stride] += wv * src[ox];
    }
  }
}

double dot_tap(const float* grad_out, int out_w, const float* in, int in_w, const TapRange& rows,
               const TapRange& cols, int stride) {
  double total = 0.0;
  for (int oy = rows.begin; oy < rows.end; ++oy) {
    const float* src = in + static_cast<std::ptrdiff_t>(oy * stride + rows.offset) * in_w + cols.offset;
    const float* g = grad_out + static_cast<std::ptrdiff_t>(oy) * out_w;
    float row = 0.0f;
    for (int ox = cols.begin; ox < cols.end; ++ox) row += g[ox] * src[ox * stride];
    total += row;
  }
  return total;
}

}  // namespace

void ConvSpec::validate(int in_channels) const {
  if (kernel_h < 1 || kernel_w < 1) throw ShapeError("ConvSpec: kernel extent must be >= 1");
  if (stride != 1 && stride != 2) throw ShapeError("ConvSpec: stride must be 1 or 2");
  if (dilation != 1 && dilation != 2 && dilation != 4 && dilation != 8) {
    throw ShapeError("ConvSpec: dilation must be one of 1, 2, 4, 8");
  }
  if (groups != 1 && groups != in_channels) {
    throw ShapeError("ConvSpec: groups must be 1 or the input channel count (" +
                     std::to_string(in_channels) + ")");
  }
}

ConvGeometry conv_geometry(int in_h, int in_w, const ConvSpec& spec) {
  ConvGeometry g;
  g.out_h = (in_h + spec.stride - 1) / spec.stride;
  g.out_w = (in_w + spec.stride - 1) / spec.stride;
  const int eff_h = spec.dilation * (spec.kernel_h - 1) + 1;
  const int eff_w = spec.dilation * (spec.kernel_w - 1) + 1;
  g.pad_top = std::max((g.out_h - 1) * spec.stride + eff_h - in_h, 0) / 2;
  g.pad_left = std::max((g.out_w - 1) * spec.stride + eff_w - in_w, 0) / 2;
  return g;
}

Tensor conv2d(const Tensor& x, const Tensor& weights, std::span<const float> bias, const ConvSpec& spec) {
  check_conv_shapes(x, weights, bias, spec);
  const ConvGeometry g = conv_geometry(x.h(), x.w(), spec);
  const int c_out = weights.n();
  const int cin_per_group = weights.c();
  const int cout_per_group = c_out / spec.groups;
  Tensor out({x.n(), c_out, g.out_h, g.out_w});
  const int taps = spec.kernel_h * spec.kernel_w;
  for (int n = 0; n < x.n(); ++n) {
    for (int co = 0; co < c_out; ++co) {
      float* dst = out.plane(n, co);
      if (!bias.empty()) std::fill(dst, dst + out.shape().plane(), bias[co]);
      const int group = co / cout_per_group;
      for (int cig = 0; cig < cin_per_group; ++cig) {
        const float* src = x.plane(n, group * cin_per_group + cig);
        const float* wk = weights.data().data() + (static_cast<std::size_t>(co) * cin_per_group + cig) * taps;
        for_each_tap(spec, g, x.h(), x.w(), [&](int ky, int kx, const TapRange& rows, const TapRange& cols) {
          accumulate_tap(dst, g.out_w, src, x.w(), rows, cols, spec.stride, wk[ky * spec.kernel_w + kx]);
        });
      }
    }
  }
  return out;
}

Tensor naive_conv2d(const Tensor& x, const Tensor& weights, std::span<const float> bias,
                    const ConvSpec& spec) {
  check_conv_shapes(x, weights, bias, spec);
  const ConvGeometry g = conv_geometry(x.h(), x.w(), spec);
  const int c_out = weights.n();
  const int cin_per_group = weights.c();
  const int cout_per_group = c_out / spec.groups;
  Tensor out({x.n(), c_out, g.out_h, g.out_w});
  for (int n = 0; n < x.n(); ++n) {
    for (int co = 0; co < c_out; ++co) {
      for (int oy = 0; oy < g.out_h; ++oy) {
        for (int ox = 0; ox < g.out_w; ++ox) {
          double acc = bias.empty() ? 0.0 : bias[co];
          for (int cig = 0; cig < cin_per_group; ++cig) {
            const int ci = (co / cout_per_group) * cin_per_group + cig;
            for (int ky = 0; ky < spec.kernel_h; ++ky) {
              for (int kx = 0; kx < spec.kernel_w; ++kx) {
                const int iy = oy * spec.stride - g.pad_top + ky * spec.dilation;
                const int ix = ox * spec.stride - g.pad_left + kx * spec.dilation;
                if (iy < 0 || iy >= x.h() || ix < 0 || ix >= x.w()) continue;
                acc += static_cast<double>(x.at(n, ci, iy, ix)) * weights.at(co, cig, ky, kx);
              }
            }
          }
          out.at(n, co, oy, ox) = static_cast<float>(acc);
        }
      }
    }
  }
  return out;
}

Tensor conv2d_backward_input(const Tensor& grad_out, const Tensor& weights, const Shape& input_shape,
                             const ConvSpec& spec) {
  const ConvGeometry g = conv_geometry(input_shape.h, input_shape.w, spec);
  if (grad_out.h() != g.out_h || grad_out.w() != g.out_w || grad_out.c() != weights.n()) {
    throw ShapeError("conv2d_backward_input: gradient shape " + grad_out.shape().str() + " mismatch");
  }
  Tensor dx(input_shape);
  const int c_out = weights.n();
  const int cin_per_group = weights.c();
  const int cout_per_group = c_out / spec.groups;
  const int taps = spec.kernel_h * spec.kernel_w;
  for (int n = 0; n < grad_out.n(); ++n) {
    for (int co = 0; co < c_out; ++co) {
      const float* gsrc = grad_out.plane(n, co);
      const int group = co / cout_per_group;
      for (int cig = 0; cig < cin_per_group; ++cig) {
        float* dst = dx.plane(n, group * cin_per_group + cig);
        const float* wk = weights.data().data() + (static_cast<std::size_t>(co) * cin_per_group + cig) * taps;
        for_each_tap(spec, g, input_shape.h, input_shape.w,
                     [&](int ky, int kx, const TapRange& rows, const TapRange& cols) {
                       scatter_tap(dst, input_shape.w, gsrc, g.out_w, rows, cols, spec.stride,
                                   wk[ky * spec.kernel_w + kx]);
                     });
      }
    }
  }
  return dx;
}

Tensor conv2d_backward_weights(const Tensor& grad_out, const Tensor& x, const Shape& weight_shape,
                               const ConvSpec& spec) {
  const ConvGeometry g = conv_geometry(x.h(), x.w(), spec);
  Tensor dw(weight_shape);
  const int c_out = weight_shape.n;
  const int cin_per_group = weight_shape.c;
  const int cout_per_group = c_out / spec.groups;
  const int taps = spec.kernel_h * spec.kernel_w;
  std::vector<double> acc(dw.size(), 0.0);
  for (int n = 0; n < x.n(); ++n) {
    for (int co = 0; co < c_out; ++co) {
      const float* gsrc = grad_out.plane(n, co);
      const int group = co / cout_per_group;
      for (int cig = 0; cig < cin_per_group; ++cig) {
        const float* src = x.plane(n, group * cin_per_group + cig);
        double* wacc = acc.data() + (static_cast<std::size_t>(co) * cin_per_group + cig) * taps;
        for_each_tap(spec, g, x.h(), x.w(), [&](int ky, int kx, const TapRange& rows, const TapRange& cols) {
          wacc[ky * spec.kernel_w + kx] += dot_tap(gsrc, g.out_w, src, x.w(), rows, cols, spec.stride);
        });
      }
    }
  }
  for (std::size_t i = 0; i < acc.size(); ++i) dw.data()[i] = static_cast<float>(acc[i]);
  return dw;
}

std::vector<float> conv2d_backward_bias(const Tensor& grad_out) {
  std::vector<float> db(grad_out.c(), 0.0f);
  const std::size_t plane = grad_out.shape().plane();
  for (int c = 0; c < grad_out.c(); ++c) {
    double total = 0.0;
    for (int n = 0; n < grad_out.n(); ++n) {
      const float* p = grad_out.plane(n, c);
      for (std::size_t i = 0; i < plane; ++i) total += p[i];
    }
    db[c] = static_cast<float>(total);
  }
  return db;
}

BatchNormParams BatchNormParams::identity(int channels) {
  BatchNormParams p;
  p.gamma.assign(channels, 1.0f);
  p.beta.assign(channels, 0.0f);
  p.running_mean.assign(channels, 0.0f);
  p.running_var.assign(channels, 1.0f);
  return p;
}

void channel_moments(const Tensor& x, std::vector<float>& mean, std::vector<float>& var) {
  std::vector<double> m, v;
  channel_moments(x, m, v);
  mean.assign(m.begin(), m.end());
  var.assign(v.begin(), v.end());
}

void channel_moments(const Tensor& x, std::vector<double>& mean, std::vector<double>& var) {
  const std::size_t plane = x.shape().plane();
  const double count = static_cast<double>(plane) * x.n();
  mean.assign(x.c(), 0.0);
  var.assign(x.c(), 0.0);
  for (int c = 0; c < x.c(); ++c) {
    double s = 0.0;
    for (int n = 0; n < x.n(); ++n) {
      const float* p = x.plane(n, c);
      for (std::size_t i = 0; i < plane; ++i) s += p[i];
    }
    const double m = s / count;
    double ss = 0.0;
    for (int n = 0; n < x.n(); ++n) {
      const float* p = x.plane(n, c);
      for (std::size_t i = 0; i < plane; ++i) {
        const double d = p[i] - m;
        ss += d * d;
      }
    }
    mean[c] = m;
    var[c] = ss / count;
  }
}

Tensor channel_affine(const Tensor& x, std::span<const float> scale, std::span<const float> shift) {
  if (static_cast<int>(scale.size()) != x.c() || static_cast<int>(shift.size()) != x.c()) {
    throw ShapeError("channel_affine: parameter length does not match " + x.shape().str());
  }
  Tensor out(x.shape());
  const std::size_t plane = x.shape().plane();
  for (int n = 0; n < x.n(); ++n) {
    for (int c = 0; c < x.c(); ++c) {
      const float* src = x.plane(n, c);
      float* dst = out.plane(n, c);
      const float a = scale[c];
      const float b = shift[c];
      for (std::size_t i = 0; i < plane; ++i) dst[i] = src[i] * a + b;
    }
  }
  return out;
}

Tensor batch_norm_inference(const Tensor& x, const BatchNormParams& p) {
  if (p.channels() != x.c()) throw ShapeError("batch_norm: channel count mismatch for " + x.shape().str());
  std::vector<float> scale(x.c()), shift(x.c());
  for (int c = 0; c < x.c(); ++c) {
    scale[c] = p.gamma[c] / std::sqrt(p.running_var[c] + p.epsilon);
    shift[c] = p.beta[c] - p.running_mean[c] * scale[c];
  }
  return channel_affine(x, scale, shift);
}

Tensor batch_norm(const Tensor& x, BatchNormParams& p, bool training) {
  if (!training) return batch_norm_inference(x, p);
  if (p.channels() != x.c()) throw ShapeError("batch_norm: channel count mismatch for " + x.shape().str());
  std::vector<float> mean, var;
  channel_moments(x, mean, var);
  std::vector<float> scale(x.c()), shift(x.c());
  for (int c = 0; c < x.c(); ++c) {
    scale[c] = p.gamma[c] / std::sqrt(var[c] + p.epsilon);
    shift[c] = p.beta[c] - mean[c] * scale[c];
    p.running_mean[c] = p.momentum * p.running_mean[c] + (1.0f - p.momentum) * mean[c];
    p.running_var[c] = p.momentum * p.running_var[c] + (1.0f - p.momentum) * var[c];
  }
  return channel_affine(x, scale, shift);
}

Tensor relu6(const Tensor& x) {
  Tensor out(x.shape());
  auto src = x.data();
  auto dst = out.data();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] = std::min(std::max(src[i], 0.0f), 6.0f);
  return out;
}

ResizeAxis resize_axis(int in_size, int out_size, bool align_corners) {
  ResizeAxis a;
  a.lo.resize(out_size);
  a.hi.resize(out_size);
  a.frac.resize(out_size);
  for (int d = 0; d < out_size; ++d) {
    double src;
    if (align_corners) {
      src = out_size > 1 ? d * static_cast<double>(in_size - 1) / (out_size - 1) : 0.0;
    } else {
      src = (d + 0.5) * static_cast<double>(in_size) / out_size - 0.5;
      src = std::max(src, 0.0);
    }
    int lo = static_cast<int>(std::floor(src));
    double frac = src - lo;
    if (lo >= in_size - 1) {
      lo = in_size - 1;
      frac = 0.0;
    }
    a.lo[d] = lo;
    a.hi[d] = std::min(lo + 1, in_size - 1);
    a.frac[d] = static_cast<float>(frac);
  }
  return a;
}

Tensor bilinear_resize(const Tensor& x, int out_h, int out_w, bool align_corners) {
  if (out_h < 1 || out_w < 1) throw ShapeError("bilinear_resize: output extent must be >= 1");
  const ResizeAxis ry = resize_axis(x.h(), out_h, align_corners);
  const ResizeAxis rx = resize_axis(x.w(), out_w, align_corners);
  Tensor out({x.n(), x.c(), out_h, out_w});
  for (int n = 0; n < x.n(); ++n) {
    for (int c = 0; c < x.c(); ++c) {
      const float* src = x.plane(n, c);
      float* dst = out.plane(n, c);
      for (int oy = 0; oy < out_h; ++oy) {
        const float* r0 = src + static_cast<std::size_t>(ry.lo[oy]) * x.w();
        const float* r1 = src + static_cast<std::size_t>(ry.hi[oy]) * x.w();
        const float fy = ry.frac[oy];
        for (int ox = 0; ox < out_w; ++ox) {
          const int x0 = rx.lo[ox];
          const int x1 = rx.hi[ox];
          const float fx = rx.frac[ox];
          const float top = r0[x0] + (r0[x1] - r0[x0]) * fx;
          const float bottom = r1[x0] + (r1[x1] - r1[x0]) * fx;
          dst[static_cast<std::size_t>(oy) * out_w + ox] = top + (bottom - top) * fy;
        }
      }
    }
  }
  return out;
}

Tensor bilinear_resize_backward(const Tensor& grad_out, const Shape& input_shape, bool align_corners) {
  const ResizeAxis ry = resize_axis(input_shape.h, grad_out.h(), align_corners);
  const ResizeAxis rx = resize_axis(input_shape.w, grad_out.w(), align_corners);
  Tensor dx(input_shape);
  for (int n = 0; n < grad_out.n(); ++n) {
    for (int c = 0; c < grad_out.c(); ++c) {
      const float* g = grad_out.plane(n, c);
      float* dst = dx.plane(n, c);
      for (int oy = 0; oy < grad_out.h(); ++oy) {
        float* r0 = dst + static_cast<std::size_t>(ry.lo[oy]) * input_shape.w;
        float* r1 = dst + static_cast<std::size_t>(ry.hi[oy]) * input_shape.w;
        const float fy = ry.frac[oy];
        for (int ox = 0; ox < grad_out.w(); ++ox) {
          const float v = g[static_cast<std::size_t>(oy) * grad_out.w() + ox];
          const float fx = rx.frac[ox];
          const float top = v * (1.0f - fy);
          const float bottom = v * fy;
          r0[rx.lo[ox]] += top * (1.0f - fx);
          r0[rx.hi[ox]] += top * fx;
          r1[rx.lo[ox]] += bottom * (1.0f - fx);
          r1[rx.hi[ox]] += bottom * fx;
        }
      }
    }
  }
  return dx;
}

Tensor softmax2(const Tensor& x) {
  if (x.c() != 2) throw ShapeError("softmax2: expected 2 channels, got " + x.shape().str());
  Tensor out(x.shape());
  const std::size_t plane = x.shape().plane();
  for (int n = 0; n < x.n(); ++n) {
    const float* a = x.plane(n, 0);
    const float* b = x.plane(n, 1);
    float* pa = out.plane(n, 0);
    float* pb = out.plane(n, 1);
    for (std::size_t i = 0; i < plane; ++i) {
      const float m = std::max(a[i], b[i]);
      const float ea = std::exp(a[i] - m);
      const float eb = std::exp(b[i] - m);
      const float s = ea + eb;
      pa[i] = ea / s;
      pb[i] = eb / s;
    }
  }
  return out;
}

Tensor sobel_kernels() {
  // S along x, then its transpose along y.
  return Tensor({2, 1, 3, 3}, {-1.f / 8, 0.f, 1.f / 8, -2.f / 8, 0.f, 2.f / 8, -1.f / 8, 0.f, 1.f / 8,
                               -1.f / 8, -2.f / 8, -1.f / 8, 0.f, 0.f, 0.f, 1.f / 8, 2.f / 8, 1.f / 8});
}

Tensor sobel_gradients(const Tensor& alpha) {
  if (alpha.c() != 1) throw ShapeError("sobel_gradients: expected 1 channel, got " + alpha.shape().str());
  // Evaluated as differences of opposite taps so constant regions give exact zeros.
  const int h = alpha.h();
  const int w = alpha.w();
  Tensor out({alpha.n(), 2, h, w});
  for (int n = 0; n < alpha.n(); ++n) {
    const float* a = alpha.plane(n, 0);
    const auto px = [&](int y, int x) -> double {
      return (y < 0 || y >= h || x < 0 || x >= w) ? 0.0 : a[static_cast<std::size_t>(y) * w + x];
    };
    float* gx = out.plane(n, 0);
    float* gy = out.plane(n, 1);
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const double dx = (px(y - 1, x + 1) - px(y - 1, x - 1)) + 2.0 * (px(y, x + 1) - px(y, x - 1)) +
                          (px(y + 1, x + 1) - px(y + 1, x - 1));
        const double dy = (px(y + 1, x - 1) - px(y - 1, x - 1)) + 2.0 * (px(y + 1, x) - px(y - 1, x)) +
                          (px(y + 1, x + 1) - px(y - 1, x + 1));
        gx[static_cast<std::size_t>(y) * w + x] = static_cast<float>(dx / 8.0);
        gy[static_cast<std::size_t>(y) * w + x] = static_cast<float>(dy / 8.0);
      }
    }
  }
  return out;
}

Tensor sobel_gradients_adjoint(const Tensor& grad) {
  if (grad.c() != 2) throw ShapeError("sobel_gradients_adjoint: expected 2 channels, got " + grad.shape().str());
  const Tensor k = sobel_kernels();
  const int h = grad.h();
  const int w = grad.w();
  Tensor out({grad.n(), 1, h, w});
  for (int n = 0; n < grad.n(); ++n) {
    float* d = out.plane(n, 0);
    for (int c = 0; c < 2; ++c) {
      const float* g = grad.plane(n, c);
      const float* kc = k.plane(c, 0);
      for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
          const float gv = g[static_cast<std::size_t>(y) * w + x];
          for (int ky = 0; ky < 3; ++ky) {
            const int yy = y + ky - 1;
            if (yy < 0 || yy >= h) continue;
            for (int kx = 0; kx < 3; ++kx) {
              const int xx = x + kx - 1;
              if (xx < 0 || xx >= w) continue;
              d[static_cast<std::size_t>(yy) * w + xx] += gv * kc[ky * 3 + kx];
            }
          }
        }
      }
    }
  }
  return out;
}

std::pair<Tensor, Tensor> gaussian_derivative_kernels(float sigma) {
  if (!(sigma > 0.0f)) throw std::invalid_argument("gaussian_derivative_kernels: sigma must be > 0");
  const double s = sigma;
  const int r = static_cast<int>(std::ceil(3.0 * s));
  const int k = 2 * r + 1;
  std::vector<double> dx(static_cast<std::size_t>(k) * k, 0.0);
  double norm = 0.0;
  for (int y = -r; y <= r; ++y) {
    for (int x = 1; x <= r; ++x) {
      const double v = -x / (s * s) * std::exp(-(x * x + y * y) / (2.0 * s * s));
      dx[static_cast<std::size_t>(y + r) * k + (x + r)] = v;
      dx[static_cast<std::size_t>(y + r) * k + (r - x)] = -v;
      norm += 2.0 * v * v;
    }
  }
  norm = std::sqrt(norm);
  Tensor kx({1, 1, k, k});
  Tensor ky({1, 1, k, k});
  for (int y = 0; y < k; ++y) {
    for (int x = 0; x < k; ++x) {
      const float v = static_cast<float>(dx[static_cast<std::size_t>(y) * k + x] / norm);
      kx.at(0, 0, y, x) = v;
      ky.at(0, 0, x, y) = v;
    }
  }
  return {std::move(kx), std::move(ky)};
}

}  // namespace mmnet
