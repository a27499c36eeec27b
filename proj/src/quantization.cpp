#include "mmnet/quantization.hpp"

#include <algorithm>
#include <cassert>
#include <cmath>
#include <limits>

namespace mmnet {

// ---------------------------------------------------------------------------
// Parameters and tensors

QuantParams QuantParams::from_range(float lo, float hi, bool* degenerate) {
  lo = std::min(lo, 0.0f);
  hi = std::max(hi, 0.0f);
  const bool narrow = !(hi - lo >= kMinQuantRange);
  if (degenerate != nullptr) *degenerate = narrow;
  if (narrow) hi = lo + kMinQuantRange;
  QuantParams p;
  p.scale = (hi - lo) / 255.0f;
  const long zp = std::lround(-lo / p.scale);
  p.zero_point = static_cast<std::uint8_t>(std::clamp<long>(zp, 0, 255));
  p.min = -static_cast<float>(p.zero_point) * p.scale;
  p.max = static_cast<float>(255 - p.zero_point) * p.scale;
  return p;
}

std::uint8_t QuantParams::quantize(float x) const {
  const long q = std::lround(x / scale) + zero_point;
  return static_cast<std::uint8_t>(std::clamp<long>(q, 0, 255));
}

QuantParams probability_params() {
  QuantParams p;
  p.scale = 1.0f / 256.0f;
  p.zero_point = 0;
  p.min = 0.0f;
  p.max = 255.0f / 256.0f;
  return p;
}

QuantParams image_params() {
  QuantParams p;
  p.scale = 1.0f / 255.0f;
  p.zero_point = 0;
  p.min = 0.0f;
  p.max = 1.0f;
  return p;
}

QuantTensor quantize(const Tensor& x, const QuantParams& p) {
  QuantTensor q;
  q.shape = x.shape();
  q.params = p;
  q.data.resize(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) q.data[i] = p.quantize(x.data()[i]);
  return q;
}

Tensor dequantize(const QuantTensor& q) {
  Tensor x(q.shape);
  for (std::size_t i = 0; i < q.size(); ++i) x.data()[i] = q.params.dequantize(q.data[i]);
  return x;
}

Tensor fake_quant(const Tensor& x, const QuantParams& p) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out.data()[i] = p.dequantize(p.quantize(x.data()[i]));
  return out;
}

ad::Var fake_quant(ad::Tape& t, ad::Var x, const QuantParams& p) {
  return t.record(
      fake_quant(t.value(x), p), {x},
      [x, p](ad::Tape& tp, int self) {
        const Tensor& g = tp.grad(ad::Var{self});
        const Tensor& xv = tp.value(x);
        Tensor dx(g.shape());
        for (std::size_t i = 0; i < dx.size(); ++i) {
          const float v = xv.data()[i];
          dx.data()[i] = (v >= p.min && v <= p.max) ? g.data()[i] : 0.0f;
        }
        tp.accumulate(x, dx);
      },
      "fake_quant");
}

void RangeTracker::observe(float lo, float hi) {
  if (!initialized_) {
    min_ = lo;
    max_ = hi;
    initialized_ = true;
    return;
  }
  min_ = momentum_ * min_ + (1.0f - momentum_) * lo;
  max_ = momentum_ * max_ + (1.0f - momentum_) * hi;
}

void RangeTracker::observe(const Tensor& batch) {
  const auto [lo, hi] = std::minmax_element(batch.data().begin(), batch.data().end());
  observe(*lo, *hi);
}

QuantParams RangeTracker::params(bool* degenerate) const { return QuantParams::from_range(min_, max_, degenerate); }

QuantParams calibrate(std::span<const Tensor> stream, float momentum) {
  RangeTracker tracker(momentum);
  for (const Tensor& t : stream) tracker.observe(t);
  if (!tracker.initialized()) throw std::invalid_argument("calibrate: empty stream");
  return tracker.params();
}

QuantParams weight_params(const Tensor& w) {
  const auto [lo, hi] = std::minmax_element(w.data().begin(), w.data().end());
  return QuantParams::from_range(*lo, *hi);
}

Requantizer Requantizer::from_real(double m) {
  if (!(m > 0.0) || !std::isfinite(m)) throw std::invalid_argument("Requantizer: multiplier must be positive");
  int exponent = 0;
  const double mantissa = std::frexp(m, &exponent);  // m = mantissa * 2^exponent, mantissa in [0.5, 1)
  std::int64_t q = std::llround(mantissa * static_cast<double>(1ll << 31));
  if (q == (1ll << 31)) {
    q /= 2;
    ++exponent;
  }
  Requantizer r;
  r.multiplier = static_cast<std::int32_t>(q);
  r.shift = 31 - exponent;
  if (r.shift < 1) throw std::invalid_argument("Requantizer: multiplier too large");
  return r;
}

std::int32_t Requantizer::apply(std::int64_t acc) const {
  if (shift >= 63) return 0;
  const std::int64_t prod = acc * multiplier;
  const std::int64_t mag = prod < 0 ? -prod : prod;
  const std::int64_t rounded = (mag + (std::int64_t{1} << (shift - 1))) >> shift;
  return static_cast<std::int32_t>(prod < 0 ? -rounded : rounded);
}

std::vector<std::int32_t> quantize_bias(std::span<const float> bias, float input_scale, float weight_scale) {
  std::vector<std::int32_t> q(bias.size());
  const double s = static_cast<double>(input_scale) * weight_scale;
  for (std::size_t i = 0; i < bias.size(); ++i) q[i] = static_cast<std::int32_t>(std::llround(bias[i] / s));
  return q;
}

// ---------------------------------------------------------------------------
// Integer kernels

namespace {

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

std::uint8_t clamp_code(std::int32_t v, std::int32_t lo, std::int32_t hi) {
  return static_cast<std::uint8_t>(std::clamp(v, lo, hi));
}

}  // namespace

QuantTensor qconv2d(const QuantTensor& x, const QuantTensor& w, std::span<const std::int32_t> bias,
                    const ConvSpec& spec, const QuantParams& out, bool relu6) {
  spec.validate(x.shape.c);
  const Shape ws = w.shape;
  if (ws.c * spec.groups != x.shape.c || ws.h != spec.kernel_h || ws.w != spec.kernel_w || ws.n % spec.groups != 0) {
    throw ShapeError("qconv2d: weight shape " + ws.str() + " incompatible with input " + x.shape.str());
  }
  if (!bias.empty() && static_cast<int>(bias.size()) != ws.n) throw ShapeError("qconv2d: bias length mismatch");
  const ConvGeometry g = conv_geometry(x.shape.h, x.shape.w, spec);
  const int c_out = ws.n;
  const int cin_per_group = ws.c;
  const int cout_per_group = c_out / spec.groups;
  const int taps = spec.kernel_h * spec.kernel_w;
  const int in_w = x.shape.w;
  const std::size_t in_plane = x.shape.plane();
  const std::size_t out_plane = static_cast<std::size_t>(g.out_h) * g.out_w;

  const Requantizer rq = Requantizer::from_real(static_cast<double>(x.params.scale) * w.params.scale / out.scale);
  std::int32_t lo = 0;
  std::int32_t hi = 255;
  if (relu6) {
    lo = std::max<std::int32_t>(lo, out.quantize(0.0f));
    hi = std::min<std::int32_t>(hi, out.quantize(6.0f));
  }

  // Zero-point-centred operands; padded taps contribute (zx - zx) * w = 0 and are skipped.
  std::vector<std::int16_t> xc(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) xc[i] = static_cast<std::int16_t>(x.data[i] - x.params.zero_point);
  std::vector<std::int32_t> wc(w.size());
  for (std::size_t i = 0; i < w.size(); ++i) wc[i] = static_cast<std::int32_t>(w.data[i]) - w.params.zero_point;

  QuantTensor result;
  result.shape = {x.shape.n, c_out, g.out_h, g.out_w};
  result.params = out;
  result.data.resize(result.shape.count());
  std::vector<std::int32_t> acc(out_plane);

  for (int n = 0; n < x.shape.n; ++n) {
    for (int co = 0; co < c_out; ++co) {
      std::fill(acc.begin(), acc.end(), bias.empty() ? 0 : bias[co]);
      const int group = co / cout_per_group;
      for (int cig = 0; cig < cin_per_group; ++cig) {
        const std::int16_t* src =
            xc.data() + (static_cast<std::size_t>(n) * x.shape.c + group * cin_per_group + cig) * in_plane;
        const std::int32_t* wk = wc.data() + (static_cast<std::size_t>(co) * cin_per_group + cig) * taps;
        for (int ky = 0; ky < spec.kernel_h; ++ky) {
          const TapRange rows = tap_range(x.shape.h, g.out_h, spec.stride, ky * spec.dilation - g.pad_top);
          for (int kx = 0; kx < spec.kernel_w; ++kx) {
            const TapRange cols = tap_range(in_w, g.out_w, spec.stride, kx * spec.dilation - g.pad_left);
            const std::int32_t wv = wk[ky * spec.kernel_w + kx];
            if (wv == 0) continue;
            for (int oy = rows.begin; oy < rows.end; ++oy) {
              const std::int16_t* s = src + static_cast<std::ptrdiff_t>(oy * spec.stride + rows.offset) * in_w + cols.offset;
              std::int32_t* d = acc.data() + static_cast<std::ptrdiff_t>(oy) * g.out_w;
              if (spec.stride == 1) {
                for (int ox = cols.begin; ox < cols.end; ++ox) d[ox] += wv * s[ox];
              } else {
                for (int ox = cols.begin; ox < cols.end; ++ox) d[ox] += wv * s[ox * spec.stride];
              }
            }
          }
        }
      }
      std::uint8_t* dst = result.plane(n, co);
      for (std::size_t i = 0; i < out_plane; ++i) {
        dst[i] = clamp_code(out.zero_point + rq.apply(acc[i]), lo, hi);
      }
    }
  }
  return result;
}

QuantTensor qconv_depthwise(const QuantTensor& x, const QuantTensor& w, std::span<const std::int32_t> bias,
                            const ConvSpec& spec, const QuantParams& out, bool relu6) {
  if (spec.groups != x.shape.c) throw ShapeError("qconv_depthwise: groups must equal input channels");
  return qconv2d(x, w, bias, spec, out, relu6);
}

QuantTensor qconv_pointwise(const QuantTensor& x, const QuantTensor& w, std::span<const std::int32_t> bias,
                            const QuantParams& out, bool relu6) {
  return qconv2d(x, w, bias, ConvSpec{}, out, relu6);
}

namespace {

void requantize_into(const QuantTensor& src, const QuantParams& out, std::uint8_t* dst, std::size_t count) {
  if (src.params == out) {
    std::copy_n(src.data.data(), count, dst);
    return;
  }
  const Requantizer rq = Requantizer::from_real(static_cast<double>(src.params.scale) / out.scale);
  for (std::size_t i = 0; i < count; ++i) {
    dst[i] = clamp_code(out.zero_point + rq.apply(static_cast<std::int32_t>(src.data[i]) - src.params.zero_point), 0, 255);
  }
}

}  // namespace

QuantTensor qconcat(const QuantTensor& a, const QuantTensor& b, const QuantParams& out) {
  if (a.shape.n != b.shape.n || a.shape.h != b.shape.h || a.shape.w != b.shape.w) {
    throw ShapeError("qconcat: " + a.shape.str() + " vs " + b.shape.str());
  }
  QuantTensor ra, rb;
  ra.shape = a.shape;
  ra.params = out;
  ra.data.resize(a.size());
  requantize_into(a, out, ra.data.data(), a.size());
  rb.shape = b.shape;
  rb.params = out;
  rb.data.resize(b.size());
  requantize_into(b, out, rb.data.data(), b.size());

  QuantTensor result;
  result.shape = {a.shape.n, a.shape.c + b.shape.c, a.shape.h, a.shape.w};
  result.params = out;
  result.data.resize(result.shape.count());
  const std::size_t pa = a.shape.plane() * a.shape.c;
  const std::size_t pb = b.shape.plane() * b.shape.c;
  for (int n = 0; n < a.shape.n; ++n) {
    std::uint8_t* dst = result.plane(n, 0);
    std::copy_n(ra.data.data() + n * pa, pa, dst);
    std::copy_n(rb.data.data() + n * pb, pb, dst + pa);
  }
  return result;
}

QuantTensor qresize_bilinear(const QuantTensor& x, int out_h, int out_w) {
  const ResizeAxis ry = resize_axis(x.shape.h, out_h, false);
  const ResizeAxis rx = resize_axis(x.shape.w, out_w, false);
  std::vector<std::uint16_t> wy(out_h), wx(out_w);
  for (int i = 0; i < out_h; ++i) wy[i] = static_cast<std::uint16_t>(std::lround(ry.frac[i] * 256.0f));
  for (int i = 0; i < out_w; ++i) wx[i] = static_cast<std::uint16_t>(std::lround(rx.frac[i] * 256.0f));

  QuantTensor result;
  result.shape = {x.shape.n, x.shape.c, out_h, out_w};
  result.params = x.params;
  result.data.resize(result.shape.count());
  const int in_w = x.shape.w;
  for (int n = 0; n < x.shape.n; ++n) {
    for (int c = 0; c < x.shape.c; ++c) {
      const std::uint8_t* src = x.plane(n, c);
      std::uint8_t* dst = result.plane(n, c);
      for (int oy = 0; oy < out_h; ++oy) {
        const std::uint8_t* r0 = src + static_cast<std::size_t>(ry.lo[oy]) * in_w;
        const std::uint8_t* r1 = src + static_cast<std::size_t>(ry.hi[oy]) * in_w;
        const std::uint32_t fy = wy[oy];
        for (int ox = 0; ox < out_w; ++ox) {
          const std::uint32_t fx = wx[ox];
          const std::uint16_t top = static_cast<std::uint16_t>(r0[rx.lo[ox]] * (256 - fx) + r0[rx.hi[ox]] * fx);
          const std::uint16_t bottom = static_cast<std::uint16_t>(r1[rx.lo[ox]] * (256 - fx) + r1[rx.hi[ox]] * fx);
          const std::uint32_t v = top * (256 - fy) + bottom * fy;
          dst[static_cast<std::size_t>(oy) * out_w + ox] = static_cast<std::uint8_t>((v + 32768u) >> 16);
        }
      }
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// Softmax table

SoftmaxLUT build_softmax_lut(const QuantParams& logit_params) {
  // Every code pair laid out as one (1, 2, 256, 256) logit map and pushed
  // through the float softmax, so the table equals the direct per-pixel path.
  Tensor logits({1, 2, 256, 256});
  for (int q0 = 0; q0 < 256; ++q0) {
    for (int q1 = 0; q1 < 256; ++q1) {
      logits.at(0, 0, q0, q1) = logit_params.dequantize(static_cast<std::uint8_t>(q0));
      logits.at(0, 1, q0, q1) = logit_params.dequantize(static_cast<std::uint8_t>(q1));
    }
  }
  const Tensor probs = softmax2(logits);
  const QuantParams out = probability_params();
  SoftmaxLUT lut;
  lut.logit_params = logit_params;
  lut.table.resize(65536);
  const float* fg = probs.plane(0, 1);
  for (std::size_t i = 0; i < lut.table.size(); ++i) lut.table[i] = out.quantize(fg[i]);
  return lut;
}

QuantTensor SoftmaxLUT::apply(const QuantTensor& logits) const {
  if (logits.shape.c != 2) throw ShapeError("SoftmaxLUT: expected 2 logit channels, got " + logits.shape.str());
  QuantTensor out;
  out.shape = {logits.shape.n, 1, logits.shape.h, logits.shape.w};
  out.params = probability_params();
  out.data.resize(out.shape.count());
  const std::size_t plane = logits.shape.plane();
  for (int n = 0; n < logits.shape.n; ++n) {
    const std::uint8_t* a = logits.plane(n, 0);
    const std::uint8_t* b = logits.plane(n, 1);
    std::uint8_t* dst = out.plane(n, 0);
    for (std::size_t i = 0; i < plane; ++i) dst[i] = lookup(a[i], b[i]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Plan

InferencePlan build_inference_plan(const MMNetGraph& model) {
  const Graph& g = model.graph;
  std::vector<std::vector<int>> consumers(g.size());
  for (int i = 0; i < g.size(); ++i) {
    for (int in : g.node(i).inputs) consumers[in].push_back(i);
  }
  std::vector<bool> live(g.size(), false);
  live[model.softmax_node] = true;
  for (int i = model.softmax_node; i >= 0; --i) {
    if (!live[i]) continue;
    for (int in : g.node(i).inputs) live[in] = true;
  }

  const auto sole_consumer = [&](int node, OpKind kind) -> int {
    if (consumers[node].size() == 1 && g.node(consumers[node][0]).kind == kind) return consumers[node][0];
    return -1;
  };

  InferencePlan plan;
  std::vector<int> op_of(g.size(), -1);
  std::vector<bool> absorbed(g.size(), false);
  for (int i = 0; i < g.size(); ++i) {
    if (!live[i] || absorbed[i]) continue;
    const GraphNode& n = g.node(i);
    FusedOp op;
    op.name = n.name;
    op.channels = n.channels;
    for (int in : n.inputs) op.inputs.push_back(op_of.at(in));
    int last = i;
    switch (n.kind) {
      case OpKind::input:
        op.kind = FusedKind::input;
        break;
      case OpKind::conv: {
        op.kind = FusedKind::conv;
        op.conv = n.conv;
        op.in_channels = n.in_channels;
        op.conv_bias = n.bias;
        const int bn = sole_consumer(i, OpKind::batch_norm);
        if (bn >= 0) {
          op.batch_norm = g.node(bn).name;
          absorbed[bn] = true;
          last = bn;
          const int act = sole_consumer(bn, OpKind::relu6);
          if (act >= 0) {
            op.relu6 = true;
            absorbed[act] = true;
            last = act;
          }
        } else {
          const int act = sole_consumer(i, OpKind::relu6);
          if (act >= 0) {
            op.relu6 = true;
            absorbed[act] = true;
            last = act;
          }
        }
        break;
      }
      case OpKind::concat:
        op.kind = FusedKind::concat;
        break;
      case OpKind::resize:
        op.kind = FusedKind::resize;
        op.resize_factor = n.resize_factor;
        break;
      case OpKind::softmax2:
        op.kind = FusedKind::softmax2;
        break;
      case OpKind::batch_norm:
      case OpKind::relu6:
        throw ConfigError("build_inference_plan: unfusable node " + n.name);
    }
    op.graph_node = last;
    plan.ops.push_back(std::move(op));
    const int index = static_cast<int>(plan.ops.size()) - 1;
    op_of[i] = index;
    op_of[last] = index;
    if (last != i) {
      for (int k = i; k <= last; ++k) {
        if (absorbed[k] || k == i) op_of[k] = index;
      }
    }
    if (last == model.logits_node || i == model.logits_node) plan.logits = index;
    if (i == model.softmax_node) plan.output = index;
  }
  return plan;
}

std::map<std::string, FoldedConv> fold_batch_norm(const InferencePlan& plan, const ModelWeights& weights) {
  std::map<std::string, FoldedConv> folded;
  for (const FusedOp& op : plan.ops) {
    if (op.kind != FusedKind::conv) continue;
    FoldedConv f;
    f.weight = weights.at(op.name + ".weight");
    f.bias.assign(op.channels, 0.0f);
    if (op.conv_bias) {
      const auto b = weights.at(op.name + ".bias").data();
      std::copy(b.begin(), b.end(), f.bias.begin());
    }
    if (!op.batch_norm.empty()) {
      const auto gamma = weights.at(op.batch_norm + ".gamma").data();
      const auto beta = weights.at(op.batch_norm + ".beta").data();
      const auto mean = weights.at(op.batch_norm + ".running_mean").data();
      const auto var = weights.at(op.batch_norm + ".running_var").data();
      const std::size_t per_out = f.weight.size() / op.channels;
      for (int c = 0; c < op.channels; ++c) {
        const float k = gamma[c] / std::sqrt(var[c] + kBatchNormEpsilon);
        float* wp = f.weight.data().data() + c * per_out;
        for (std::size_t i = 0; i < per_out; ++i) wp[i] *= k;
        f.bias[c] = beta[c] + (f.bias[c] - mean[c]) * k;
      }
    }
    folded[op.name] = std::move(f);
  }
  return folded;
}

Tensor run_folded(const InferencePlan& plan, const std::map<std::string, FoldedConv>& folded, const Tensor& image,
                  const OpObserver& observer) {
  std::vector<Tensor> values(plan.ops.size());
  for (std::size_t i = 0; i < plan.ops.size(); ++i) {
    const FusedOp& op = plan.ops[i];
    switch (op.kind) {
      case FusedKind::input:
        values[i] = image;
        break;
      case FusedKind::conv: {
        const FoldedConv& f = folded.at(op.name);
        values[i] = conv2d(values[op.inputs[0]], f.weight, f.bias, op.conv);
        if (op.relu6) values[i] = relu6(values[i]);
        break;
      }
      case FusedKind::concat:
        values[i] = concat_channels(values[op.inputs[0]], values[op.inputs[1]]);
        break;
      case FusedKind::resize: {
        const Tensor& s = values[op.inputs[0]];
        values[i] = bilinear_resize(s, s.h() * op.resize_factor, s.w() * op.resize_factor, false);
        break;
      }
      case FusedKind::softmax2:
        values[i] = softmax2(values[op.inputs[0]]);
        break;
    }
    if (observer) observer(static_cast<int>(i), values[i]);
  }
  return slice_channels(values[plan.output], 1, 1);
}

// ---------------------------------------------------------------------------
// Quantized model

QuantTensor QuantizedModel::forward_codes(const Tensor& image, ExecCounters* counters) const {
  const int s = config.input_size;
  if (image.c() != 3 || image.h() != s || image.w() != s) {
    throw ShapeError("quantized forward: expected (n,3," + std::to_string(s) + "," + std::to_string(s) +
                     ") image, got " + image.shape().str());
  }
  ExecCounters local;
  ExecCounters& cnt = counters ? *counters : local;
  std::vector<QuantTensor> values(plan.ops.size());
  std::vector<int> last(plan.ops.size(), -1);
  for (std::size_t i = 0; i < plan.ops.size(); ++i) {
    for (int in : plan.ops[i].inputs) last[in] = static_cast<int>(i);
  }
  for (std::size_t i = 0; i < plan.ops.size(); ++i) {
    const FusedOp& op = plan.ops[i];
    switch (op.kind) {
      case FusedKind::input:
        values[i] = quantize(image, activations[i]);
        break;
      case FusedKind::conv: {
        const QuantizedConv& qc = convs.at(op.name);
        const QuantTensor& x = values[op.inputs[0]];
        if (op.conv.kernel_h == 1 && op.conv.kernel_w == 1 && op.conv.groups == 1 && op.conv.stride == 1) {
          values[i] = qconv_pointwise(x, qc.weight, qc.bias, activations[i], op.relu6);
        } else if (op.conv.depthwise(op.in_channels)) {
          values[i] = qconv_depthwise(x, qc.weight, qc.bias, op.conv, activations[i], op.relu6);
        } else {
          values[i] = qconv2d(x, qc.weight, qc.bias, op.conv, activations[i], op.relu6);
        }
        ++cnt.int8_convs;
        break;
      }
      case FusedKind::concat:
        values[i] = qconcat(values[op.inputs[0]], values[op.inputs[1]], activations[i]);
        ++cnt.int8_concats;
        break;
      case FusedKind::resize: {
        const QuantTensor& x = values[op.inputs[0]];
        values[i] = qresize_bilinear(x, x.shape.h * op.resize_factor, x.shape.w * op.resize_factor);
        ++cnt.int8_resizes;
        break;
      }
      case FusedKind::softmax2:
        values[i] = lut.apply(values[op.inputs[0]]);
        cnt.lut_lookups += static_cast<std::int64_t>(values[i].size());
        break;
    }
    for (int in : op.inputs) {
      if (last[in] == static_cast<int>(i)) values[in] = QuantTensor();
    }
  }
  return std::move(values[plan.output]);
}

Tensor QuantizedModel::forward(const Tensor& image, ExecCounters* counters) const {
  return dequantize(forward_codes(image, counters));
}

QuantizedModel quantize_model(const MMNetGraph& model, const ModelWeights& weights,
                              std::span<const Tensor> calibration, const QuantizeOptions& options,
                              std::vector<std::string>* warnings) {
  if (calibration.empty()) throw std::invalid_argument("quantize_model: calibration stream is empty");
  QuantizedModel q;
  q.config = model.config;
  q.plan = build_inference_plan(model);
  const auto folded = fold_batch_norm(q.plan, weights);

  std::vector<RangeTracker> ranges(q.plan.ops.size(), RangeTracker(options.momentum));
  for (const Tensor& image : calibration) {
    run_folded(q.plan, folded, image, [&](int op, const Tensor& v) { ranges[op].observe(v); });
  }

  q.activations.resize(q.plan.ops.size());
  for (std::size_t i = 0; i < q.plan.ops.size(); ++i) {
    const FusedOp& op = q.plan.ops[i];
    switch (op.kind) {
      case FusedKind::input:
        q.activations[i] = image_params();
        break;
      case FusedKind::resize:
        q.activations[i] = q.activations[op.inputs[0]];
        break;
      case FusedKind::softmax2:
        q.activations[i] = probability_params();
        break;
      case FusedKind::conv:
      case FusedKind::concat: {
        bool degenerate = false;
        q.activations[i] = ranges[i].params(&degenerate);
        if (degenerate && warnings) warnings->push_back("degenerate activation range at " + op.name + "; widened");
        break;
      }
    }
  }

  for (std::size_t i = 0; i < q.plan.ops.size(); ++i) {
    const FusedOp& op = q.plan.ops[i];
    if (op.kind != FusedKind::conv) continue;
    const FoldedConv& f = folded.at(op.name);
    bool degenerate = false;
    const auto [lo, hi] = std::minmax_element(f.weight.data().begin(), f.weight.data().end());
    const QuantParams wp = QuantParams::from_range(*lo, *hi, &degenerate);
    if (degenerate && warnings) warnings->push_back("degenerate weight range at " + op.name + "; widened");
    QuantizedConv qc;
    qc.weight = quantize(f.weight, wp);
    qc.bias = quantize_bias(f.bias, q.activations[op.inputs[0]].scale, wp.scale);
    q.convs[op.name] = std::move(qc);
  }
  q.lut = build_softmax_lut(q.activations[q.plan.logits]);
  return q;
}

// ---------------------------------------------------------------------------
// Quantization-aware training

QatState::QatState(const MMNetGraph& model, float momentum) {
  const InferencePlan plan = build_inference_plan(model);
  for (const FusedOp& op : plan.ops) {
    if (op.kind == FusedKind::conv || op.kind == FusedKind::concat || op.kind == FusedKind::resize) {
      ranges_.emplace(op.graph_node, RangeTracker(momentum));
    }
  }
  hooks_.weight = [](ad::Tape& t, ad::Var w, const std::string&) { return fake_quant(t, w, weight_params(t.value(w))); };
  hooks_.activation = [this](ad::Tape& t, ad::Var v, int node) {
    const auto it = ranges_.find(node);
    if (it == ranges_.end()) return v;
    it->second.observe(t.value(v));
    return fake_quant(t, v, it->second.params());
  };
}

}  // namespace mmnet
