#pragma once

#include <span>
#include <utility>
#include <vector>

#include "mmnet/tensor.hpp"

namespace mmnet {

/// Convolution hyperparameters. Padding is not stored: it is always derived
/// as TensorFlow-style "same" padding from the input extent (see conv_geometry).
struct ConvSpec {
  int kernel_h = 1;
  int kernel_w = 1;
  int stride = 1;
  int dilation = 1;
  int groups = 1;

  /// Checks stride/dilation/groups against the input channel count.
  void validate(int in_channels) const;
  bool depthwise(int in_channels) const { return groups == in_channels && groups > 1; }

  friend bool operator==(const ConvSpec&, const ConvSpec&) = default;
};

struct ConvGeometry {
  int out_h = 0;
  int out_w = 0;
  int pad_top = 0;
  int pad_left = 0;
};

/// out = ceil(in / stride); the total padding needed is split with the
/// smaller half on top/left.
ConvGeometry conv_geometry(int in_h, int in_w, const ConvSpec& spec);

/// weights: (c_out, c_in / groups, kernel_h, kernel_w). `bias` is empty or c_out long.
Tensor conv2d(const Tensor& x, const Tensor& weights, std::span<const float> bias, const ConvSpec& spec);

/// Literal nested-loop convolution used as the reference for conv2d.
Tensor naive_conv2d(const Tensor& x, const Tensor& weights, std::span<const float> bias,
                    const ConvSpec& spec);

/// Gradient of conv2d with respect to its input, given the output gradient.
Tensor conv2d_backward_input(const Tensor& grad_out, const Tensor& weights, const Shape& input_shape,
                             const ConvSpec& spec);
/// Gradient of conv2d with respect to its weights.
Tensor conv2d_backward_weights(const Tensor& grad_out, const Tensor& x, const Shape& weight_shape,
                               const ConvSpec& spec);
std::vector<float> conv2d_backward_bias(const Tensor& grad_out);

struct BatchNormParams {
  std::vector<float> gamma;
  std::vector<float> beta;
  std::vector<float> running_mean;
  std::vector<float> running_var;
  float epsilon = 1e-6f;
  /// running <- momentum * running + (1 - momentum) * batch
  float momentum = 0.9f;

  static BatchNormParams identity(int channels);
  int channels() const { return static_cast<int>(gamma.size()); }
};

/// Inference mode uses the running statistics; training mode normalizes with
/// the batch statistics (biased variance) and updates the running statistics.
Tensor batch_norm(const Tensor& x, BatchNormParams& p, bool training);
Tensor batch_norm_inference(const Tensor& x, const BatchNormParams& p);

/// Per-channel mean and biased variance over (n, h, w).
void channel_moments(const Tensor& x, std::vector<float>& mean, std::vector<float>& var);
void channel_moments(const Tensor& x, std::vector<double>& mean, std::vector<double>& var);

/// y = x * scale[c] + shift[c]
Tensor channel_affine(const Tensor& x, std::span<const float> scale, std::span<const float> shift);

Tensor relu6(const Tensor& x);

struct ResizeAxis {
  std::vector<int> lo;
  std::vector<int> hi;
  std::vector<float> frac;
};

/// Source taps of a 1-D bilinear resize. With align_corners == false the
/// sample point is (dst + 0.5) * in / out - 0.5, clamped at 0.
ResizeAxis resize_axis(int in_size, int out_size, bool align_corners);

Tensor bilinear_resize(const Tensor& x, int out_h, int out_w, bool align_corners = false);
/// Transpose of bilinear_resize.
Tensor bilinear_resize_backward(const Tensor& grad_out, const Shape& input_shape, bool align_corners = false);

/// Two-channel softmax per pixel. Channel 1 is the foreground probability.
Tensor softmax2(const Tensor& x);

/// Weights (2, 1, 3, 3) holding S and its transpose.
Tensor sobel_kernels();
/// [S * A, S^T * A] with zero "same" padding (cross-correlation).
Tensor sobel_gradients(const Tensor& alpha);
/// Transpose of sobel_gradients: maps a (n, 2, h, w) gradient back to (n, 1, h, w).
Tensor sobel_gradients_adjoint(const Tensor& grad);

/// First-order Gaussian derivative filters (d/dx, d/dy), each (1, 1, 2r+1, 2r+1)
/// with r = ceil(3 sigma), normalized to unit L2 norm.
std::pair<Tensor, Tensor> gaussian_derivative_kernels(float sigma);

}  // namespace mmnet
