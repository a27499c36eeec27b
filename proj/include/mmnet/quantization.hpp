#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "mmnet/arch.hpp"
#include "mmnet/autodiff.hpp"
#include "mmnet/tensor.hpp"

namespace mmnet {

/// Asymmetric per-tensor u8 mapping: real = (q - zero_point) * scale.
struct QuantParams {
  float scale = 1.0f;
  std::uint8_t zero_point = 0;
  /// Representable range after nudging so that 0.0 is exact.
  float min = 0.0f;
  float max = 255.0f;

  /// Range is first extended to contain 0. A range narrower than
  /// kMinQuantRange is widened to it and `degenerate` is set.
  static QuantParams from_range(float lo, float hi, bool* degenerate = nullptr);

  std::uint8_t quantize(float x) const;
  float dequantize(std::uint8_t q) const { return (static_cast<int>(q) - zero_point) * scale; }

  friend bool operator==(const QuantParams&, const QuantParams&) = default;
};

inline constexpr float kMinQuantRange = 1e-3f;

/// Encoding of probabilities produced by the softmax table: scale 1/256, zero point 0.
QuantParams probability_params();
/// Encoding of 8-bit input images in [0, 1]: scale 1/255, zero point 0.
QuantParams image_params();

struct QuantTensor {
  Shape shape;
  std::vector<std::uint8_t> data;
  QuantParams params;

  std::size_t size() const { return data.size(); }
  const std::uint8_t* plane(int n, int c) const {
    return data.data() + (static_cast<std::size_t>(n) * shape.c + c) * shape.plane();
  }
  std::uint8_t* plane(int n, int c) { return data.data() + (static_cast<std::size_t>(n) * shape.c + c) * shape.plane(); }
};

QuantTensor quantize(const Tensor& x, const QuantParams& p);
Tensor dequantize(const QuantTensor& q);
/// dequantize(quantize(x)) evaluated in f32.
Tensor fake_quant(const Tensor& x, const QuantParams& p);
/// Straight-through backward: gradient passes where x lies inside [p.min, p.max].
ad::Var fake_quant(ad::Tape& t, ad::Var x, const QuantParams& p);

/// Exponential moving average of per-batch min/max.
class RangeTracker {
 public:
  explicit RangeTracker(float momentum = 0.99f) : momentum_(momentum) {}
  void observe(float lo, float hi);
  void observe(const Tensor& batch);
  bool initialized() const { return initialized_; }
  float min() const { return min_; }
  float max() const { return max_; }
  QuantParams params(bool* degenerate = nullptr) const;

 private:
  float momentum_;
  bool initialized_ = false;
  float min_ = 0.0f;
  float max_ = 0.0f;
};

QuantParams calibrate(std::span<const Tensor> stream, float momentum = 0.99f);
/// Exact min/max of a weight tensor.
QuantParams weight_params(const Tensor& w);

/// Fixed-point multiplier (Q31) plus right shift; rounding is half away from zero.
struct Requantizer {
  std::int32_t multiplier = 0;
  int shift = 0;  // total right shift applied to acc * multiplier

  static Requantizer from_real(double m);
  std::int32_t apply(std::int64_t acc) const;
};

std::vector<std::int32_t> quantize_bias(std::span<const float> bias, float input_scale, float weight_scale);

/// Integer convolution: i32 sum of (x - zx)(w - zw) plus bias, requantized to
/// `out`. With relu6 the result is clamped to the codes of [0, 6].
QuantTensor qconv2d(const QuantTensor& x, const QuantTensor& w, std::span<const std::int32_t> bias,
                    const ConvSpec& spec, const QuantParams& out, bool relu6);
QuantTensor qconv_depthwise(const QuantTensor& x, const QuantTensor& w, std::span<const std::int32_t> bias,
                            const ConvSpec& spec, const QuantParams& out, bool relu6);
QuantTensor qconv_pointwise(const QuantTensor& x, const QuantTensor& w, std::span<const std::int32_t> bias,
                            const QuantParams& out, bool relu6);
/// Channel concatenation with both inputs requantized to `out`.
QuantTensor qconcat(const QuantTensor& a, const QuantTensor& b, const QuantParams& out);
/// Bilinear resize (half-pixel centers) on u8 codes with 8-bit fractional
/// weights held in u16 and u32 accumulation; output keeps the input params.
QuantTensor qresize_bilinear(const QuantTensor& x, int out_h, int out_w);

/// Foreground probability for every (q0, q1) logit code pair.
struct SoftmaxLUT {
  QuantParams logit_params;
  std::vector<std::uint8_t> table;  // 65,536 entries, index q0 * 256 + q1

  std::uint8_t lookup(std::uint8_t q0, std::uint8_t q1) const { return table[(static_cast<std::size_t>(q0) << 8) | q1]; }
  /// (n, 2, h, w) logits -> (n, 1, h, w) foreground probability codes.
  QuantTensor apply(const QuantTensor& logits) const;
};

SoftmaxLUT build_softmax_lut(const QuantParams& logit_params);

// ---------------------------------------------------------------------------
// Inference plan: the graph with conv -> BN (-> ReLU6) chains fused.

enum class FusedKind { input, conv, concat, resize, softmax2 };

struct FusedOp {
  FusedKind kind = FusedKind::input;
  std::string name;
  std::vector<int> inputs;  // op indices
  ConvSpec conv;
  int in_channels = 0;
  int channels = 0;
  bool conv_bias = false;
  std::string batch_norm;  // empty when no BN follows the conv
  bool relu6 = false;
  int resize_factor = 1;
  int graph_node = -1;  // node whose value this op produces
};

struct InferencePlan {
  std::vector<FusedOp> ops;
  int output = -1;  // the softmax op
  /// Index of the op whose value is the final logits.
  int logits = -1;
};

/// Only nodes feeding the softmax output are kept (the auxiliary head is dropped).
InferencePlan build_inference_plan(const MMNetGraph& model);

struct FoldedConv {
  Tensor weight;
  std::vector<float> bias;
};

/// w' = w * gamma / sqrt(var + eps), b' = beta + (b - mean) * gamma / sqrt(var + eps).
std::map<std::string, FoldedConv> fold_batch_norm(const InferencePlan& plan, const ModelWeights& weights);

using OpObserver = std::function<void(int op, const Tensor& value)>;
/// Float forward of the folded plan; returns the (n, 1, h, w) foreground probability.
Tensor run_folded(const InferencePlan& plan, const std::map<std::string, FoldedConv>& folded, const Tensor& image,
                  const OpObserver& observer = {});

struct ExecCounters {
  std::int64_t int8_convs = 0;
  std::int64_t int8_concats = 0;
  std::int64_t int8_resizes = 0;
  std::int64_t lut_lookups = 0;
  std::int64_t float_ops = 0;
};

struct QuantizedConv {
  QuantTensor weight;
  std::vector<std::int32_t> bias;
};

struct QuantizedModel {
  MMNetConfig config;
  InferencePlan plan;
  std::map<std::string, QuantizedConv> convs;
  std::vector<QuantParams> activations;  // per plan op
  SoftmaxLUT lut;

  /// image (n, 3, S, S) in [0, 1] -> (n, 1, S, S) alpha in [0, 1).
  Tensor forward(const Tensor& image, ExecCounters* counters = nullptr) const;
  QuantTensor forward_codes(const Tensor& image, ExecCounters* counters = nullptr) const;
};

struct QuantizeOptions {
  float momentum = 0.99f;
};

/// Folds batch norm, calibrates activation ranges on `calibration` images
/// (each (n, 3, S, S)), quantizes weights and builds the softmax table.
/// Degenerate ranges are widened and reported through `warnings`.
QuantizedModel quantize_model(const MMNetGraph& model, const ModelWeights& weights,
                              std::span<const Tensor> calibration, const QuantizeOptions& options = {},
                              std::vector<std::string>* warnings = nullptr);

/// Fake quantization for quantization-aware training: weights use their exact
/// range, activations at fused-op boundaries use EMA-tracked ranges.
class QatState {
 public:
  explicit QatState(const MMNetGraph& model, float momentum = 0.99f);
  const TapeHooks& hooks() const { return hooks_; }
  const std::map<int, RangeTracker>& activation_ranges() const { return ranges_; }

 private:
  std::map<int, RangeTracker> ranges_;
  TapeHooks hooks_;
};

}  // namespace mmnet
