#include "mmnet/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace mmnet::ad {

Parameter::Parameter(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}

void Parameter::zero_grad() {
  if (grad.shape() != value.shape()) {
    grad = Tensor(value.shape());
  } else {
    grad.fill(0.0f);
  }
}

Var Tape::constant(Tensor value) {
  Node node;
  node.value = std::move(value);
  node.op = "constant";
  nodes_.push_back(std::move(node));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

Var Tape::variable(Tensor value) {
  Node node;
  node.value = std::move(value);
  node.requires_grad = true;
  node.op = "variable";
  nodes_.push_back(std::move(node));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

Var Tape::parameter(Parameter& param) {
  Node node;
  node.value = param.value;
  node.param = &param;
  node.requires_grad = true;
  node.op = "parameter";
  nodes_.push_back(std::move(node));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

Var Tape::record(Tensor value, std::vector<Var> inputs, BackwardFn backward, const char* op) {
  Node node;
  node.value = std::move(value);
  node.op = op;
  for (Var in : inputs) {
    if (!in.valid() || in.id >= static_cast<int>(nodes_.size())) {
      throw ContractError(std::string(op) + ": input does not precede the recorded node");
    }
    node.requires_grad = node.requires_grad || nodes_[in.id].requires_grad;
  }
  node.inputs = std::move(inputs);
  if (node.requires_grad) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

Var Tape::record_scalar(double value, std::vector<Var> inputs, BackwardFn backward, const char* op) {
  const Var v = record(Tensor({1, 1, 1, 1}, static_cast<float>(value)), std::move(inputs), std::move(backward), op);
  nodes_[v.id].exact = value;
  nodes_[v.id].exact_valid = true;
  return v;
}

double Tape::scalar(Var v) const {
  const Node& n = nodes_.at(v.id);
  if (n.value.size() != 1) throw ContractError(std::string("scalar: node '") + n.op + "' holds " + std::to_string(n.value.size()) + " elements");
  return n.exact_valid ? n.exact : n.value.data()[0];
}

void Tape::accumulate(Var v, const Tensor& g) {
  Node& node = nodes_.at(v.id);
  if (!node.requires_grad) return;
  if (g.shape() != node.value.shape()) {
    throw ContractError(std::string("gradient shape ") + g.shape().str() + " does not match " +
                        node.value.shape().str() + " at " + node.op);
  }
  accumulate(v, g.data());
}

void Tape::accumulate(Var v, std::span<const float> g) {
  Node& node = nodes_.at(v.id);
  if (!node.requires_grad) return;
  if (g.size() != node.value.size()) throw ContractError("gradient length mismatch");
  if (node.grad.empty()) {
    node.grad = Tensor(node.value.shape(), std::vector<float>(g.begin(), g.end()));
    return;
  }
  auto dst = node.grad.data();
  for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
}

std::size_t Tape::backward(Var loss) {
  if (!loss.valid() || loss.id >= static_cast<int>(nodes_.size())) throw ContractError("backward: invalid loss node");
  if (nodes_[loss.id].value.size() != 1) {
    throw ContractError("backward: loss must be scalar, got shape " + nodes_[loss.id].value.shape().str());
  }
  for (auto& node : nodes_) node.grad = Tensor();
  accumulate(loss, Tensor({1, 1, 1, 1}, 1.0f));
  std::size_t visited = 0;
  for (int i = loss.id; i >= 0; --i) {
    Node& node = nodes_[i];
    if (node.grad.empty()) continue;
    ++visited;
    if (node.backward) node.backward(*this, i);
    if (node.param != nullptr) {
      Parameter& p = *node.param;
      if (p.grad.shape() != p.value.shape()) p.zero_grad();
      auto dst = p.grad.data();
      auto src = node.grad.data();
      for (std::size_t k = 0; k < src.size(); ++k) dst[k] += src[k];
    }
  }
  return visited;
}

Var conv2d(Tape& t, Var x, Var weights, std::optional<Var> bias, const ConvSpec& spec) {
  std::span<const float> b;
  if (bias) b = t.value(*bias).data();
  Tensor out = mmnet::conv2d(t.value(x), t.value(weights), b, spec);
  std::vector<Var> inputs{x, weights};
  if (bias) inputs.push_back(*bias);
  return t.record(
      std::move(out), inputs,
      [x, weights, bias, spec](Tape& tp, int self) {
        const Tensor& g = tp.grad(Var{self});
        const Tensor& xv = tp.value(x);
        const Tensor& wv = tp.value(weights);
        if (tp.requires_grad(x)) tp.accumulate(x, conv2d_backward_input(g, wv, xv.shape(), spec));
        if (tp.requires_grad(weights)) tp.accumulate(weights, conv2d_backward_weights(g, xv, wv.shape(), spec));
        if (bias && tp.requires_grad(*bias)) {
          const std::vector<float> db = conv2d_backward_bias(g);
          tp.accumulate(*bias, std::span<const float>(db));
        }
      },
      "conv2d");
}

Var batch_norm(Tape& t, Var x, Var gamma, Var beta, float epsilon, const RunningStats* stats) {
  const Tensor& xv = t.value(x);
  std::vector<double> mean, var;
  channel_moments(xv, mean, var);
  const int channels = xv.c();
  const auto gv = t.value(gamma).data();
  const auto bv = t.value(beta).data();
  if (static_cast<int>(gv.size()) != channels || static_cast<int>(bv.size()) != channels) {
    throw ShapeError("batch_norm: parameter length does not match " + xv.shape().str());
  }
  // Statistics stay in double so a small input change does not shift whole
  // channels by an f32 rounding step.
  std::vector<double> inv_std_d(channels);
  std::vector<float> inv_std(channels);
  for (int c = 0; c < channels; ++c) {
    inv_std_d[c] = 1.0 / std::sqrt(var[c] + static_cast<double>(epsilon));
    inv_std[c] = static_cast<float>(inv_std_d[c]);
  }

  // x_hat is kept for the backward pass.
  Tensor x_hat(xv.shape());
  Tensor out(xv.shape());
  const std::size_t plane = xv.shape().plane();
  for (int n = 0; n < xv.n(); ++n) {
    for (int c = 0; c < channels; ++c) {
      const float* src = xv.plane(n, c);
      float* xh = x_hat.plane(n, c);
      float* dst = out.plane(n, c);
      for (std::size_t i = 0; i < plane; ++i) {
        const double normalized = (src[i] - mean[c]) * inv_std_d[c];
        xh[i] = static_cast<float>(normalized);
        dst[i] = static_cast<float>(normalized * gv[c] + bv[c]);
      }
    }
  }
  if (stats != nullptr) {
    for (int c = 0; c < channels; ++c) {
      stats->mean[c] = stats->momentum * stats->mean[c] + (1.0f - stats->momentum) * static_cast<float>(mean[c]);
      stats->var[c] = stats->momentum * stats->var[c] + (1.0f - stats->momentum) * static_cast<float>(var[c]);
    }
  }
  return t.record(
      std::move(out), {x, gamma, beta},
      [x, gamma, beta, x_hat = std::move(x_hat), inv_std = std::move(inv_std)](Tape& tp, int self) {
        const Tensor& g = tp.grad(Var{self});
        const int C = g.c();
        const std::size_t pl = g.shape().plane();
        const double count = static_cast<double>(pl) * g.n();
        std::vector<double> sum_g(C, 0.0), sum_gx(C, 0.0);
        for (int n = 0; n < g.n(); ++n) {
          for (int c = 0; c < C; ++c) {
            const float* gp = g.plane(n, c);
            const float* xh = x_hat.plane(n, c);
            for (std::size_t i = 0; i < pl; ++i) {
              sum_g[c] += gp[i];
              sum_gx[c] += static_cast<double>(gp[i]) * xh[i];
            }
          }
        }
        if (tp.requires_grad(gamma)) {
          std::vector<float> dg(sum_gx.begin(), sum_gx.end());
          tp.accumulate(gamma, std::span<const float>(dg));
        }
        if (tp.requires_grad(beta)) {
          std::vector<float> db(sum_g.begin(), sum_g.end());
          tp.accumulate(beta, std::span<const float>(db));
        }
        if (tp.requires_grad(x)) {
          const auto gam = tp.value(gamma).data();
          Tensor dx(g.shape());
          for (int n = 0; n < g.n(); ++n) {
            for (int c = 0; c < C; ++c) {
              const float* gp = g.plane(n, c);
              const float* xh = x_hat.plane(n, c);
              float* d = dx.plane(n, c);
              const double k = gam[c] * inv_std[c];
              const double mg = sum_g[c] / count;
              const double mgx = sum_gx[c] / count;
              for (std::size_t i = 0; i < pl; ++i) {
                d[i] = static_cast<float>(k * (gp[i] - mg - xh[i] * mgx));
              }
            }
          }
          tp.accumulate(x, dx);
        }
      },
      "batch_norm");
}

Var batch_norm_frozen(Tape& t, Var x, Var gamma, Var beta, std::span<const float> mean,
                      std::span<const float> var, float epsilon) {
  const Tensor& xv = t.value(x);
  const int channels = xv.c();
  std::vector<float> inv_std(channels), m(mean.begin(), mean.end());
  for (int c = 0; c < channels; ++c) inv_std[c] = 1.0f / std::sqrt(var[c] + epsilon);
  const auto gv = t.value(gamma).data();
  const auto bv = t.value(beta).data();
  std::vector<float> scale(channels), shift(channels);
  for (int c = 0; c < channels; ++c) {
    scale[c] = gv[c] * inv_std[c];
    shift[c] = bv[c] - m[c] * scale[c];
  }
  Tensor out = channel_affine(xv, scale, shift);
  return t.record(
      std::move(out), {x, gamma, beta},
      [x, gamma, beta, inv_std = std::move(inv_std), m = std::move(m)](Tape& tp, int self) {
        const Tensor& g = tp.grad(Var{self});
        const Tensor& xv2 = tp.value(x);
        const int C = g.c();
        const std::size_t pl = g.shape().plane();
        const auto gam = tp.value(gamma).data();
        std::vector<float> dg(C, 0.0f), db(C, 0.0f);
        Tensor dx(g.shape());
        for (int n = 0; n < g.n(); ++n) {
          for (int c = 0; c < C; ++c) {
            const float* gp = g.plane(n, c);
            const float* xp = xv2.plane(n, c);
            float* d = dx.plane(n, c);
            double sg = 0.0, sgx = 0.0;
            for (std::size_t i = 0; i < pl; ++i) {
              sg += gp[i];
              sgx += static_cast<double>(gp[i]) * (xp[i] - m[c]) * inv_std[c];
              d[i] = gp[i] * gam[c] * inv_std[c];
            }
            db[c] += static_cast<float>(sg);
            dg[c] += static_cast<float>(sgx);
          }
        }
        tp.accumulate(x, dx);
        tp.accumulate(gamma, std::span<const float>(dg));
        tp.accumulate(beta, std::span<const float>(db));
      },
      "batch_norm_frozen");
}

Var relu6(Tape& t, Var x) {
  return t.record(
      mmnet::relu6(t.value(x)), {x},
      [x](Tape& tp, int self) {
        const Tensor& g = tp.grad(Var{self});
        const auto xv = tp.value(x).data();
        Tensor dx(g.shape());
        auto d = dx.data();
        const auto gv = g.data();
        for (std::size_t i = 0; i < d.size(); ++i) d[i] = (xv[i] > 0.0f && xv[i] < 6.0f) ? gv[i] : 0.0f;
        tp.accumulate(x, dx);
      },
      "relu6");
}

Var concat_channels(Tape& t, Var a, Var b) {
  const int ca = t.value(a).c();
  const int cb = t.value(b).c();
  return t.record(
      mmnet::concat_channels(t.value(a), t.value(b)), {a, b},
      [a, b, ca, cb](Tape& tp, int self) {
        const Tensor& g = tp.grad(Var{self});
        if (tp.requires_grad(a)) tp.accumulate(a, mmnet::slice_channels(g, 0, ca));
        if (tp.requires_grad(b)) tp.accumulate(b, mmnet::slice_channels(g, ca, cb));
      },
      "concat_channels");
}

Var slice_channels(Tape& t, Var x, int begin, int count) {
  return t.record(
      mmnet::slice_channels(t.value(x), begin, count), {x},
      [x, begin, count](Tape& tp, int self) {
        const Tensor& g = tp.grad(Var{self});
        const Shape xs = tp.value(x).shape();
        Tensor dx(xs);
        const std::size_t plane = xs.plane();
        for (int n = 0; n < xs.n; ++n) {
          std::copy_n(g.plane(n, 0), plane * count, dx.plane(n, begin));
        }
        tp.accumulate(x, dx);
      },
      "slice_channels");
}

Var bilinear_resize(Tape& t, Var x, int out_h, int out_w, bool align_corners) {
  return t.record(
      mmnet::bilinear_resize(t.value(x), out_h, out_w, align_corners), {x},
      [x, align_corners](Tape& tp, int self) {
        tp.accumulate(x, bilinear_resize_backward(tp.grad(Var{self}), tp.value(x).shape(), align_corners));
      },
      "bilinear_resize");
}

Var softmax2(Tape& t, Var x) {
  return t.record(
      mmnet::softmax2(t.value(x)), {x},
      [x](Tape& tp, int self) {
        const Tensor& g = tp.grad(Var{self});
        const Tensor& y = tp.value(Var{self});
        Tensor dx(g.shape());
        const std::size_t plane = g.shape().plane();
        for (int n = 0; n < g.n(); ++n) {
          const float* y0 = y.plane(n, 0);
          const float* y1 = y.plane(n, 1);
          const float* g0 = g.plane(n, 0);
          const float* g1 = g.plane(n, 1);
          float* d0 = dx.plane(n, 0);
          float* d1 = dx.plane(n, 1);
          for (std::size_t i = 0; i < plane; ++i) {
            // With two channels the Jacobian reduces to y0*y1 * [[1,-1],[-1,1]].
            const float k = y0[i] * y1[i] * (g0[i] - g1[i]);
            d0[i] = k;
            d1[i] = -k;
          }
        }
        tp.accumulate(x, dx);
      },
      "softmax2");
}

Var sobel_gradients(Tape& t, Var alpha) {
  return t.record(
      mmnet::sobel_gradients(t.value(alpha)), {alpha},
      [alpha](Tape& tp, int self) { tp.accumulate(alpha, sobel_gradients_adjoint(tp.grad(Var{self}))); },
      "sobel_gradients");
}

Var add(Tape& t, Var a, Var b) {
  const Tensor& av = t.value(a);
  const Tensor& bv = t.value(b);
  if (av.shape() != bv.shape()) throw ShapeError("add: " + av.shape().str() + " vs " + bv.shape().str());
  auto backward = [a, b](Tape& tp, int self) {
    const Tensor& g = tp.grad(Var{self});
    tp.accumulate(a, g);
    tp.accumulate(b, g);
  };
  if (av.size() == 1) return t.record_scalar(t.scalar(a) + t.scalar(b), {a, b}, backward, "add");
  Tensor out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] = av.data()[i] + bv.data()[i];
  return t.record(std::move(out), {a, b}, backward, "add");
}

Var scale(Tape& t, Var x, float s) {
  auto backward = [x, s](Tape& tp, int self) {
    const Tensor& g = tp.grad(Var{self});
    Tensor dx(g.shape());
    for (std::size_t i = 0; i < dx.size(); ++i) dx.data()[i] = g.data()[i] * s;
    tp.accumulate(x, dx);
  };
  if (t.value(x).size() == 1) return t.record_scalar(t.scalar(x) * s, {x}, backward, "scale");
  Tensor out(t.value(x).shape());
  const auto src = t.value(x).data();
  for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] = src[i] * s;
  return t.record(std::move(out), {x}, backward, "scale");
}

Var sum(Tape& t, Var x) {
  double total = 0.0;
  for (float v : t.value(x).data()) total += v;
  return t.record_scalar(
      total, {x},
      [x](Tape& tp, int self) {
        const float g = tp.grad(Var{self}).data()[0];
        tp.accumulate(x, Tensor(tp.value(x).shape(), g));
      },
      "sum");
}

Var dot(Tape& t, Var x, const Tensor& w) {
  const Tensor& xv = t.value(x);
  if (xv.shape() != w.shape()) throw ShapeError("dot: " + xv.shape().str() + " vs " + w.shape().str());
  double total = 0.0;
  for (std::size_t i = 0; i < xv.size(); ++i) total += static_cast<double>(xv.data()[i]) * w.data()[i];
  return t.record_scalar(
      total, {x},
      [x, w](Tape& tp, int self) {
        const float g = tp.grad(Var{self}).data()[0];
        Tensor dx(w.shape());
        for (std::size_t i = 0; i < dx.size(); ++i) dx.data()[i] = g * w.data()[i];
        tp.accumulate(x, dx);
      },
      "dot");
}

Var mul(Tape& t, Var a, Var b) {
  const Tensor& av = t.value(a);
  const Tensor& bv = t.value(b);
  if (av.shape() != bv.shape()) throw ShapeError("mul: " + av.shape().str() + " vs " + bv.shape().str());
  Tensor out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] = av.data()[i] * bv.data()[i];
  return t.record(
      std::move(out), {a, b},
      [a, b](Tape& tp, int self) {
        const Tensor& g = tp.grad(Var{self});
        const Tensor& av2 = tp.value(a);
        const Tensor& bv2 = tp.value(b);
        Tensor da(g.shape()), db(g.shape());
        for (std::size_t i = 0; i < g.size(); ++i) {
          da.data()[i] = g.data()[i] * bv2.data()[i];
          db.data()[i] = g.data()[i] * av2.data()[i];
        }
        tp.accumulate(a, da);
        tp.accumulate(b, db);
      },
      "mul");
}

namespace {

double evaluate(const LossBuilder& f) {
  Tape tape;
  const Var loss = f(tape);
  if (tape.value(loss).size() != 1) throw ContractError("grad_check: loss must be scalar");
  return tape.scalar(loss);
}

}  // namespace

GradCheckReport grad_check(const LossBuilder& f, std::span<Parameter* const> params,
                           const GradCheckOptions& options) {
  for (Parameter* p : params) p->zero_grad();
  {
    Tape tape;
    const Var loss = f(tape);
    tape.backward(loss);
  }

  std::vector<std::pair<std::size_t, std::size_t>> coords;
  std::size_t total = 0;
  for (Parameter* p : params) total += p->value.size();
  if (total <= options.samples) {
    for (std::size_t k = 0; k < params.size(); ++k) {
      for (std::size_t i = 0; i < params[k]->value.size(); ++i) coords.emplace_back(k, i);
    }
  } else {
    std::mt19937_64 rng(options.seed);
    std::vector<std::size_t> flat(total);
    std::iota(flat.begin(), flat.end(), 0);
    std::shuffle(flat.begin(), flat.end(), rng);
    flat.resize(options.samples);
    std::sort(flat.begin(), flat.end());
    for (std::size_t idx : flat) {
      std::size_t k = 0;
      while (idx >= params[k]->value.size()) idx -= params[k++]->value.size();
      coords.emplace_back(k, idx);
    }
  }

  GradCheckReport report;
  for (auto [k, i] : coords) {
    Parameter& p = *params[k];
    float& slot = p.value.data()[i];
    const float original = slot;
    const float plus = static_cast<float>(original + options.step);
    const float minus = static_cast<float>(original - options.step);
    slot = plus;
    const double f_plus = evaluate(f);
    slot = minus;
    const double f_minus = evaluate(f);
    slot = original;
    const double numeric = (f_plus - f_minus) / (static_cast<double>(plus) - static_cast<double>(minus));
    const double analytic = p.grad.data()[i];
    const double err = std::abs(analytic - numeric) / std::max(1.0, std::abs(numeric));
    ++report.checked;
    report.max_error = std::max(report.max_error, err);
    if (!(err <= options.tolerance)) report.failures.push_back({p.name, i, analytic, numeric, err});
  }
  return report;
}

}  // namespace mmnet::ad
