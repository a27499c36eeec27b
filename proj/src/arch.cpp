#include "mmnet/arch.hpp"

#include <cmath>
#include <random>
#include <sstream>

#include "mmnet/hash.hpp"

namespace mmnet {

void MMNetConfig::validate() const {
  if (!(width_multiplier > 0.0f) || !std::isfinite(width_multiplier)) {
    throw ConfigError("width_multiplier must be > 0");
  }
  if (input_size < 16 || input_size % 16 != 0) {
    throw ConfigError("input_size must be a positive multiple of 16, got " + std::to_string(input_size));
  }
  if (channel_rounding < 1) throw ConfigError("channel_rounding must be >= 1");
}

int scale_channels(int base, float alpha, int rounding) {
  if (base < 1) throw ConfigError("scale_channels: base must be >= 1");
  const double scaled = static_cast<double>(base) * static_cast<double>(alpha);
  if (rounding > 1) {
    const long multiples = std::lround(scaled / rounding);
    return std::max(rounding, static_cast<int>(multiples) * rounding);
  }
  return std::max(1, static_cast<int>(std::lround(scaled)));
}

std::string_view to_string(BlockKind kind) {
  switch (kind) {
    case BlockKind::initial: return "initial";
    case BlockKind::encoder: return "encoder";
    case BlockKind::decoder: return "decoder";
    case BlockKind::refinement: return "refinement";
    case BlockKind::enhancement: return "enhancement";
    case BlockKind::final_block: return "final";
    case BlockKind::aux_head: return "aux_head";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// Graph construction

int Graph::add(GraphNode node) {
  for (int in : node.inputs) {
    if (in < 0 || in >= size()) throw ConfigError("graph input does not precede node " + node.name);
  }
  nodes_.push_back(std::move(node));
  return size() - 1;
}

int Graph::input(int channels) {
  GraphNode n;
  n.kind = OpKind::input;
  n.name = "input";
  n.channels = channels;
  return add(std::move(n));
}

int Graph::conv(const std::string& name, int x, int out_channels, const ConvSpec& spec, bool bias) {
  GraphNode n;
  n.kind = OpKind::conv;
  n.name = name;
  n.inputs = {x};
  n.in_channels = channels(x);
  n.channels = out_channels;
  n.conv = spec;
  n.bias = bias;
  spec.validate(n.in_channels);
  return add(std::move(n));
}

int Graph::batch_norm(const std::string& name, int x) {
  GraphNode n;
  n.kind = OpKind::batch_norm;
  n.name = name;
  n.inputs = {x};
  n.channels = channels(x);
  return add(std::move(n));
}

int Graph::relu6(int x) {
  GraphNode n;
  n.kind = OpKind::relu6;
  n.name = nodes_.at(x).name + ".relu6";
  n.inputs = {x};
  n.channels = channels(x);
  return add(std::move(n));
}

int Graph::concat(int a, int b) {
  GraphNode n;
  n.kind = OpKind::concat;
  n.name = "concat(" + nodes_.at(a).name + "," + nodes_.at(b).name + ")";
  n.inputs = {a, b};
  n.channels = channels(a) + channels(b);
  return add(std::move(n));
}

int Graph::resize(int x, int factor) {
  GraphNode n;
  n.kind = OpKind::resize;
  n.name = nodes_.at(x).name + ".up" + std::to_string(factor);
  n.inputs = {x};
  n.channels = channels(x);
  n.resize_factor = factor;
  return add(std::move(n));
}

int Graph::softmax2(int x) {
  if (channels(x) != 2) throw ConfigError("softmax2 needs a 2-channel input");
  GraphNode n;
  n.kind = OpKind::softmax2;
  n.name = nodes_.at(x).name + ".softmax";
  n.inputs = {x};
  n.channels = 2;
  return add(std::move(n));
}

int Graph::conv_bn_relu6(const std::string& name, int x, int out_channels, const ConvSpec& spec) {
  const int c = conv(name, x, out_channels, spec, false);
  return relu6(batch_norm(name + ".bn", c));
}

int Graph::conv_bn(const std::string& name, int x, int out_channels, const ConvSpec& spec) {
  return batch_norm(name + ".bn", conv(name, x, out_channels, spec, false));
}

namespace {

ConvSpec pointwise() { return ConvSpec{}; }

ConvSpec depthwise3x3(int channels, int stride, int dilation) {
  ConvSpec s;
  s.kernel_h = s.kernel_w = 3;
  s.stride = stride;
  s.dilation = dilation;
  s.groups = channels;
  return s;
}

int multi_branch(Graph& g, const std::string& name, int x, int expand, int out, const std::vector<int>& rates,
                 std::optional<int> stride) {
  if (rates.empty()) throw ConfigError(name + ": dilation rates must be nonempty");
  int merged = -1;
  for (std::size_t b = 0; b < rates.size(); ++b) {
    const std::string branch = name + ".b" + std::to_string(b);
    int y = g.conv_bn_relu6(branch + ".expand", x, expand, pointwise());
    if (stride) y = g.conv_bn_relu6(branch + ".dw", y, expand, depthwise3x3(expand, *stride, 1));
    y = g.conv_bn_relu6(branch + ".dilated", y, expand, depthwise3x3(expand, 1, rates[b]));
    merged = merged < 0 ? y : g.concat(merged, y);
  }
  return g.conv_bn(name + ".project", merged, out, pointwise());
}

}  // namespace

int Graph::encoder_block(const std::string& name, int x, int expand_channels, int out_channels,
                         const std::vector<int>& rates, int stride) {
  if (stride != 1 && stride != 2) throw ConfigError(name + ": stride must be 1 or 2");
  return multi_branch(*this, name, x, expand_channels, out_channels, rates, stride);
}

int Graph::enhancement_block(const std::string& name, int x, int expand_channels, int out_channels,
                             const std::vector<int>& rates) {
  return multi_branch(*this, name, x, expand_channels, out_channels, rates, std::nullopt);
}

int Graph::refinement_block(const std::string& name, int x, int out_channels) {
  const int y = conv_bn_relu6(name + ".dw", x, channels(x), depthwise3x3(channels(x), 1, 1));
  return conv_bn_relu6(name + ".pw", y, out_channels, pointwise());
}

int Graph::decoder_block(const std::string& name, int x, int out_channels, int factor, std::optional<int> skip) {
  if (factor != 2 && factor != 4) throw ConfigError(name + ": upsample factor must be 2 or 4");
  const int y = resize(conv_bn_relu6(name + ".conv", x, out_channels, pointwise()), factor);
  return skip ? concat(y, *skip) : y;
}

std::vector<Shape> Graph::infer_shapes(const Shape& input) const {
  std::vector<Shape> shapes(nodes_.size());
  for (int i = 0; i < size(); ++i) {
    const GraphNode& n = nodes_[i];
    switch (n.kind) {
      case OpKind::input:
        if (input.c != n.channels) throw ShapeError("graph input expects " + std::to_string(n.channels) + " channels");
        shapes[i] = input;
        break;
      case OpKind::conv: {
        const Shape s = shapes[n.inputs[0]];
        const ConvGeometry g = conv_geometry(s.h, s.w, n.conv);
        shapes[i] = {s.n, n.channels, g.out_h, g.out_w};
        break;
      }
      case OpKind::batch_norm:
      case OpKind::relu6:
      case OpKind::softmax2:
        shapes[i] = shapes[n.inputs[0]];
        break;
      case OpKind::concat: {
        const Shape a = shapes[n.inputs[0]];
        const Shape b = shapes[n.inputs[1]];
        if (a.n != b.n || a.h != b.h || a.w != b.w) {
          throw ShapeError(n.name + ": cannot concatenate " + a.str() + " and " + b.str());
        }
        shapes[i] = {a.n, a.c + b.c, a.h, a.w};
        break;
      }
      case OpKind::resize: {
        const Shape s = shapes[n.inputs[0]];
        shapes[i] = {s.n, s.c, s.h * n.resize_factor, s.w * n.resize_factor};
        break;
      }
    }
  }
  return shapes;
}

std::string Graph::description() const {
  static constexpr const char* kinds[] = {"input", "conv", "batch_norm", "relu6", "concat", "resize", "softmax2"};
  std::ostringstream os;
  for (int i = 0; i < size(); ++i) {
    const GraphNode& n = nodes_[i];
    os << i << ' ' << kinds[static_cast<int>(n.kind)] << ' ' << n.name << " in=[";
    for (std::size_t k = 0; k < n.inputs.size(); ++k) os << (k ? "," : "") << n.inputs[k];
    os << "] c=" << n.channels;
    if (n.kind == OpKind::conv) {
      os << " k=" << n.conv.kernel_h << 'x' << n.conv.kernel_w << " s=" << n.conv.stride << " d=" << n.conv.dilation
         << " g=" << n.conv.groups << " bias=" << n.bias;
    }
    if (n.kind == OpKind::resize) os << " factor=" << n.resize_factor;
    os << '\n';
  }
  return os.str();
}

std::string MMNetGraph::description() const {
  std::ostringstream os;
  os << "mmnet width_multiplier=" << config.width_multiplier << " input_size=" << config.input_size
     << " rounding=" << config.channel_rounding << " skip=" << config.skip_connections << '\n';
  os << graph.description();
  return os.str();
}

std::uint64_t MMNetGraph::architecture_hash() const { return fnv1a64(description()); }

namespace {

struct EncoderRow {
  int expand;
  int out;
  std::vector<int> rates;
  int stride;
};

std::string rates_detail(const std::vector<int>& rates, int stride) {
  std::string s = "DR [";
  for (std::size_t i = 0; i < rates.size(); ++i) s += (i ? ", " : "") + std::to_string(rates[i]);
  return s + "], S" + std::to_string(stride);
}

}  // namespace

MMNetGraph build_mmnet(const MMNetConfig& config) {
  config.validate();
  const auto ch = [&](int base) { return scale_channels(base, config.width_multiplier, config.channel_rounding); };

  MMNetGraph m;
  m.config = config;
  Graph& g = m.graph;

  const int input = g.input(3);
  ConvSpec initial;
  initial.kernel_h = initial.kernel_w = 3;
  initial.stride = 2;
  int x = g.conv_bn_relu6("initial", input, ch(32), initial);
  m.blocks.push_back({BlockKind::initial, "initial", {}, 2, 3, 0, ch(32), std::nullopt, std::nullopt});
  m.block_outputs.push_back({"Initial Block", "Conv 3x3, S2", x});

  const std::vector<EncoderRow> encoders = {
      {16, 16, {1, 2, 4, 8}, 2}, {16, 24, {1, 2, 4, 8}, 1}, {24, 24, {1, 2, 4, 8}, 1}, {24, 24, {1, 2, 4, 8}, 1},
      {32, 40, {1, 2, 4}, 2},    {64, 40, {1, 2, 4}, 1},    {64, 40, {1, 2, 4}, 1},    {64, 40, {1, 2, 4}, 1},
      {80, 80, {1, 2}, 2},       {120, 80, {1, 2}, 1},
  };
  std::vector<int> encoder_out;
  std::vector<int> encoder_block_index;
  for (std::size_t i = 0; i < encoders.size(); ++i) {
    const EncoderRow& row = encoders[i];
    const std::string name = "encoder" + std::to_string(i + 1);
    const int in_ch = g.channels(x);
    x = g.encoder_block(name, x, ch(row.expand), ch(row.out), row.rates, row.stride);
    encoder_out.push_back(x);
    encoder_block_index.push_back(static_cast<int>(m.blocks.size()));
    m.blocks.push_back({BlockKind::encoder, name, row.rates, row.stride, in_ch, ch(row.expand), ch(row.out),
                        std::nullopt, std::nullopt});
    m.block_outputs.push_back({"Encoder " + std::to_string(i + 1), rates_detail(row.rates, row.stride), x});
  }

  m.aux_logits_node = g.conv("aux_head", encoder_out[9], 2, pointwise(), true);
  m.blocks.push_back({BlockKind::aux_head, "aux_head", {}, 1, g.channels(encoder_out[9]), 0, 2, std::nullopt,
                      std::nullopt});

  struct DecoderRow {
    int out;
    int refine;
    int skip_encoder;  // 1-based
  };
  const std::vector<DecoderRow> decoders = {{64, 64, 5}, {40, 40, 1}};
  for (std::size_t i = 0; i < decoders.size(); ++i) {
    const DecoderRow& row = decoders[i];
    const std::string name = "decoder" + std::to_string(i + 1);
    std::optional<int> skip;
    std::optional<int> skip_block;
    if (config.skip_connections) {
      const int src = encoder_out[row.skip_encoder - 1];
      const int src_ch = g.channels(src);
      skip = g.refinement_block(name + ".refine", src, ch(row.refine));
      skip_block = static_cast<int>(m.blocks.size());
      m.blocks.push_back({BlockKind::refinement, name + ".refine", {}, 1, src_ch, 0, ch(row.refine),
                          encoder_block_index[row.skip_encoder - 1], std::nullopt});
    }
    const int in_ch = g.channels(x);
    x = g.decoder_block(name, x, ch(row.out), 2, skip);
    m.blocks.push_back({BlockKind::decoder, name, {}, 1, in_ch, 0, g.channels(x), skip_block, 2});
    std::string detail = "Upsample x2";
    if (config.skip_connections) detail += " (Skip " + std::to_string(row.skip_encoder) + ")";
    m.block_outputs.push_back({"Decoder " + std::to_string(i + 1), detail, x});
  }

  for (int i = 1; i <= 2; ++i) {
    const std::string name = "enhancement" + std::to_string(i);
    const int in_ch = g.channels(x);
    x = g.enhancement_block(name, x, ch(40), ch(40), {1, 2, 4});
    m.blocks.push_back({BlockKind::enhancement, name, {1, 2, 4}, 1, in_ch, ch(40), ch(40), std::nullopt,
                        std::nullopt});
    m.block_outputs.push_back({"Enhancement " + std::to_string(i), rates_detail({1, 2, 4}, 1), x});
  }

  {
    const int in_ch = g.channels(x);
    x = g.decoder_block("decoder3", x, ch(16), 4, std::nullopt);
    m.blocks.push_back({BlockKind::decoder, "decoder3", {}, 1, in_ch, 0, ch(16), std::nullopt, 4});
    m.block_outputs.push_back({"Decoder 3", "Upsample x4", x});
  }

  m.logits_node = g.conv("final", x, 2, pointwise(), true);
  m.softmax_node = g.softmax2(m.logits_node);
  m.blocks.push_back({BlockKind::final_block, "final", {}, 1, g.channels(x), 0, 2, std::nullopt, std::nullopt});
  m.block_outputs.push_back({"Final Block", "Conv 1x1, Softmax", m.softmax_node});
  return m;
}

// ---------------------------------------------------------------------------
// Weights

const Tensor& ModelWeights::at(const std::string& name) const {
  const auto it = tensors.find(name);
  if (it == tensors.end()) throw ConfigError("missing weight tensor '" + name + "'");
  return it->second;
}

Tensor& ModelWeights::at(const std::string& name) {
  const auto it = tensors.find(name);
  if (it == tensors.end()) throw ConfigError("missing weight tensor '" + name + "'");
  return it->second;
}

bool is_running_stat(std::string_view name) {
  return name.ends_with(".running_mean") || name.ends_with(".running_var");
}

namespace {

Shape conv_weight_shape(const GraphNode& n) {
  return {n.channels, n.in_channels / n.conv.groups, n.conv.kernel_h, n.conv.kernel_w};
}

}  // namespace

ModelWeights init_weights(const Graph& graph, std::uint64_t seed) {
  ModelWeights w;
  std::mt19937_64 rng(seed);
  for (const GraphNode& n : graph.nodes()) {
    if (n.kind == OpKind::conv) {
      const Shape ws = conv_weight_shape(n);
      const float fan_in = static_cast<float>(ws.c * ws.h * ws.w);
      std::uniform_real_distribution<float> dist(-std::sqrt(6.0f / fan_in), std::sqrt(6.0f / fan_in));
      Tensor t(ws);
      for (float& v : t.data()) v = dist(rng);
      w.tensors[n.name + ".weight"] = std::move(t);
      if (n.bias) w.tensors[n.name + ".bias"] = Tensor({1, n.channels, 1, 1}, 0.0f);
    } else if (n.kind == OpKind::batch_norm) {
      w.tensors[n.name + ".gamma"] = Tensor({1, n.channels, 1, 1}, 1.0f);
      w.tensors[n.name + ".beta"] = Tensor({1, n.channels, 1, 1}, 0.0f);
      w.tensors[n.name + ".running_mean"] = Tensor({1, n.channels, 1, 1}, 0.0f);
      w.tensors[n.name + ".running_var"] = Tensor({1, n.channels, 1, 1}, 1.0f);
    }
  }
  return w;
}

void check_weights(const Graph& graph, const ModelWeights& weights) {
  const auto expect = [&](const std::string& name, const Shape& s) {
    if (weights.at(name).shape() != s) {
      throw ConfigError("weight '" + name + "' has shape " + weights.at(name).shape().str() + ", expected " + s.str());
    }
  };
  for (const GraphNode& n : graph.nodes()) {
    if (n.kind == OpKind::conv) {
      expect(n.name + ".weight", conv_weight_shape(n));
      if (n.bias) expect(n.name + ".bias", {1, n.channels, 1, 1});
    } else if (n.kind == OpKind::batch_norm) {
      for (const char* suffix : {".gamma", ".beta", ".running_mean", ".running_var"}) {
        expect(n.name + suffix, {1, n.channels, 1, 1});
      }
    }
  }
}

std::size_t param_count(const ModelWeights& weights) {
  std::size_t total = 0;
  for (const auto& [name, t] : weights.tensors) {
    if (!is_running_stat(name)) total += t.size();
  }
  return total;
}

// ---------------------------------------------------------------------------
// Float inference

namespace {

std::vector<int> last_use(const Graph& graph, const std::vector<int>& outputs) {
  std::vector<int> last(graph.size(), -1);
  for (int i = 0; i < graph.size(); ++i) {
    for (int in : graph.node(i).inputs) last[in] = i;
  }
  for (int o : outputs) last[o] = graph.size();
  return last;
}

}  // namespace

std::vector<Tensor> run_graph(const Graph& graph, const ModelWeights& weights, const Tensor& input,
                              const std::vector<int>& outputs, const NodeObserver& observer) {
  std::vector<Tensor> values(graph.size());
  const std::vector<int> last = last_use(graph, outputs);
  for (int i = 0; i < graph.size(); ++i) {
    const GraphNode& n = graph.node(i);
    if (n.kind != OpKind::input && last[i] < 0 && !observer) continue;
    switch (n.kind) {
      case OpKind::input:
        if (input.c() != n.channels) {
          throw ShapeError("graph input expects " + std::to_string(n.channels) + " channels, got " + input.shape().str());
        }
        values[i] = input;
        break;
      case OpKind::conv: {
        std::span<const float> bias;
        if (n.bias) bias = weights.at(n.name + ".bias").data();
        values[i] = conv2d(values[n.inputs[0]], weights.at(n.name + ".weight"), bias, n.conv);
        break;
      }
      case OpKind::batch_norm: {
        const auto gamma = weights.at(n.name + ".gamma").data();
        const auto beta = weights.at(n.name + ".beta").data();
        const auto mean = weights.at(n.name + ".running_mean").data();
        const auto var = weights.at(n.name + ".running_var").data();
        std::vector<float> scale(n.channels), shift(n.channels);
        for (int c = 0; c < n.channels; ++c) {
          scale[c] = gamma[c] / std::sqrt(var[c] + kBatchNormEpsilon);
          shift[c] = beta[c] - mean[c] * scale[c];
        }
        values[i] = channel_affine(values[n.inputs[0]], scale, shift);
        break;
      }
      case OpKind::relu6:
        values[i] = relu6(values[n.inputs[0]]);
        break;
      case OpKind::concat:
        values[i] = concat_channels(values[n.inputs[0]], values[n.inputs[1]]);
        break;
      case OpKind::resize: {
        const Tensor& s = values[n.inputs[0]];
        values[i] = bilinear_resize(s, s.h() * n.resize_factor, s.w() * n.resize_factor, false);
        break;
      }
      case OpKind::softmax2:
        values[i] = softmax2(values[n.inputs[0]]);
        break;
    }
    if (observer) observer(i, values[i]);
    for (int in : n.inputs) {
      if (last[in] == i) values[in] = Tensor();
    }
  }
  std::vector<Tensor> result;
  result.reserve(outputs.size());
  for (int o : outputs) result.push_back(values[o]);
  return result;
}

MMNetOutput forward(const MMNetGraph& model, const ModelWeights& weights, const Tensor& image) {
  const int s = model.config.input_size;
  if (image.c() != 3 || image.h() != s || image.w() != s) {
    throw ShapeError("forward: expected (n,3," + std::to_string(s) + "," + std::to_string(s) + ") image, got " +
                     image.shape().str());
  }
  auto values = run_graph(model.graph, weights, image, {model.softmax_node, model.aux_logits_node});
  return {slice_channels(values[0], 1, 1), std::move(values[1])};
}

std::vector<TraceRow> shape_trace(const MMNetGraph& model) {
  const int s = model.config.input_size;
  const std::vector<Shape> shapes = model.graph.infer_shapes({1, 3, s, s});
  std::vector<TraceRow> rows;
  for (const BlockOutput& b : model.block_outputs) rows.push_back({b.name, b.detail, shapes[b.node]});
  return rows;
}

std::string format_shape_trace(const std::vector<TraceRow>& rows) {
  std::ostringstream os;
  for (const TraceRow& r : rows) {
    os << r.name << "  " << r.detail << "  " << r.shape.h << " x " << r.shape.w << ", " << r.shape.c << '\n';
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Training support

ParameterSet::ParameterSet(const ModelWeights& weights) {
  for (const auto& [name, t] : weights.tensors) {
    if (is_running_stat(name)) continue;
    index_[name] = params_.size();
    params_.emplace_back(name, t);
  }
}

ad::Parameter& ParameterSet::at(const std::string& name) {
  const auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("no trainable parameter '" + name + "'");
  return params_[it->second];
}

void ParameterSet::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

void ParameterSet::store(ModelWeights& weights) const {
  for (const auto& p : params_) weights.at(p.name) = p.value;
}

std::vector<ad::Var> record_graph(ad::Tape& tape, const Graph& graph, ParameterSet& params, ModelWeights& weights,
                                  ad::Var input, const std::vector<int>& outputs, const TapeForwardOptions& options) {
  std::vector<ad::Var> vars(graph.size());
  const auto weight_var = [&](const std::string& name) {
    ad::Var v = tape.parameter(params.at(name));
    if (options.hooks && options.hooks->weight) v = options.hooks->weight(tape, v, name);
    return v;
  };
  for (int i = 0; i < graph.size(); ++i) {
    const GraphNode& n = graph.node(i);
    ad::Var v;
    switch (n.kind) {
      case OpKind::input:
        v = input;
        break;
      case OpKind::conv: {
        std::optional<ad::Var> bias;
        if (n.bias) bias = tape.parameter(params.at(n.name + ".bias"));
        v = ad::conv2d(tape, vars[n.inputs[0]], weight_var(n.name + ".weight"), bias, n.conv);
        break;
      }
      case OpKind::batch_norm: {
        const ad::Var gamma = tape.parameter(params.at(n.name + ".gamma"));
        const ad::Var beta = tape.parameter(params.at(n.name + ".beta"));
        Tensor& mean = weights.at(n.name + ".running_mean");
        Tensor& var = weights.at(n.name + ".running_var");
        if (options.training) {
          const ad::RunningStats stats{mean.data(), var.data(), options.bn_momentum};
          v = ad::batch_norm(tape, vars[n.inputs[0]], gamma, beta, kBatchNormEpsilon, &stats);
        } else {
          v = ad::batch_norm_frozen(tape, vars[n.inputs[0]], gamma, beta, mean.data(), var.data(), kBatchNormEpsilon);
        }
        break;
      }
      case OpKind::relu6:
        v = ad::relu6(tape, vars[n.inputs[0]]);
        break;
      case OpKind::concat:
        v = ad::concat_channels(tape, vars[n.inputs[0]], vars[n.inputs[1]]);
        break;
      case OpKind::resize: {
        const Tensor& s = tape.value(vars[n.inputs[0]]);
        v = ad::bilinear_resize(tape, vars[n.inputs[0]], s.h() * n.resize_factor, s.w() * n.resize_factor, false);
        break;
      }
      case OpKind::softmax2:
        v = ad::softmax2(tape, vars[n.inputs[0]]);
        break;
    }
    if (n.kind != OpKind::input && options.hooks && options.hooks->activation) {
      v = options.hooks->activation(tape, v, i);
    }
    vars[i] = v;
  }
  std::vector<ad::Var> result;
  for (int o : outputs) result.push_back(vars.at(o));
  return result;
}

TapeOutputs record_forward(ad::Tape& tape, const MMNetGraph& model, ParameterSet& params, ModelWeights& weights,
                           ad::Var image, const TapeForwardOptions& options) {
  const auto vars =
      record_graph(tape, model.graph, params, weights, image, {model.softmax_node, model.aux_logits_node}, options);
  return {ad::slice_channels(tape, vars[0], 1, 1), vars[1]};
}

}  // namespace mmnet
