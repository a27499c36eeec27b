#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "mmnet/autodiff.hpp"
#include "mmnet/nn_ops.hpp"
#include "mmnet/tensor.hpp"

namespace mmnet {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct MMNetConfig {
  float width_multiplier = 1.0f;
  int input_size = 256;
  /// Channel counts are rounded to a multiple of this (minimum one multiple).
  int channel_rounding = 8;
  /// Encoder 1 -> decoder 2 and encoder 5 -> decoder 1 paths.
  bool skip_connections = true;

  void validate() const;
  friend bool operator==(const MMNetConfig&, const MMNetConfig&) = default;
};

/// max(rounding, round(base * alpha / rounding) * rounding), or
/// max(1, round(base * alpha)) when rounding <= 1. Halves round away from zero.
int scale_channels(int base, float alpha, int rounding);

enum class BlockKind { initial, encoder, decoder, refinement, enhancement, final_block, aux_head };
std::string_view to_string(BlockKind kind);

struct BlockSpec {
  BlockKind kind = BlockKind::encoder;
  std::string name;
  std::vector<int> dilation_rates;
  int stride = 1;
  int in_channels = 0;
  int expand_channels = 0;
  int out_channels = 0;
  std::optional<int> skip_source;  // index into MMNetGraph::blocks
  std::optional<int> upsample_factor;
};

enum class OpKind { input, conv, batch_norm, relu6, concat, resize, softmax2 };

struct GraphNode {
  OpKind kind = OpKind::input;
  /// Weight prefix for conv and batch_norm nodes.
  std::string name;
  std::vector<int> inputs;
  int channels = 0;  // output channel count
  // conv
  ConvSpec conv;
  int in_channels = 0;
  bool bias = false;
  // resize
  int resize_factor = 1;
};

/// Straight-line dataflow graph; every node's inputs precede it.
class Graph {
 public:
  int input(int channels);
  int conv(const std::string& name, int x, int out_channels, const ConvSpec& spec, bool bias);
  int batch_norm(const std::string& name, int x);
  int relu6(int x);
  int concat(int a, int b);
  int resize(int x, int factor);
  int softmax2(int x);

  /// conv -> BN -> ReLU6 (no conv bias).
  int conv_bn_relu6(const std::string& name, int x, int out_channels, const ConvSpec& spec);
  /// conv -> BN, no activation.
  int conv_bn(const std::string& name, int x, int out_channels, const ConvSpec& spec);

  /// Multi-branch dilated block with a linear bottleneck. Each branch r:
  /// 1x1 expand -> 3x3 depthwise (stride) -> 3x3 depthwise (dilation r), all
  /// with BN + ReLU6; branches are concatenated and projected by a 1x1 conv + BN.
  int encoder_block(const std::string& name, int x, int expand_channels, int out_channels,
                    const std::vector<int>& rates, int stride);
  /// Encoder block without the strided depthwise conv.
  int enhancement_block(const std::string& name, int x, int expand_channels, int out_channels,
                        const std::vector<int>& rates);
  /// 3x3 depthwise + BN + ReLU6, then 1x1 + BN + ReLU6.
  int refinement_block(const std::string& name, int x, int out_channels);
  /// 1x1 + BN + ReLU6, bilinear upsample by `factor`, then concat the refined skip if given.
  int decoder_block(const std::string& name, int x, int out_channels, int factor, std::optional<int> skip);

  const std::vector<GraphNode>& nodes() const { return nodes_; }
  const GraphNode& node(int id) const { return nodes_.at(id); }
  int size() const { return static_cast<int>(nodes_.size()); }
  int channels(int id) const { return nodes_.at(id).channels; }

  /// Output shape of every node for the given input shape.
  std::vector<Shape> infer_shapes(const Shape& input) const;
  std::string description() const;

 private:
  int add(GraphNode node);
  std::vector<GraphNode> nodes_;
};

struct BlockOutput {
  std::string name;
  std::string detail;
  int node = -1;
};

struct MMNetGraph {
  MMNetConfig config;
  Graph graph;
  std::vector<BlockSpec> blocks;
  /// The 17 rows from the initial block through the final softmax.
  std::vector<BlockOutput> block_outputs;
  int logits_node = -1;
  int softmax_node = -1;
  int aux_logits_node = -1;

  std::string description() const;
  std::uint64_t architecture_hash() const;
};

MMNetGraph build_mmnet(const MMNetConfig& config);

/// Named weight tensors. Conv nodes own "<name>.weight" and optionally
/// "<name>.bias"; batch-norm nodes own "<name>.gamma", "<name>.beta",
/// "<name>.running_mean" and "<name>.running_var".
struct ModelWeights {
  std::map<std::string, Tensor> tensors;

  const Tensor& at(const std::string& name) const;
  Tensor& at(const std::string& name);
  bool contains(const std::string& name) const { return tensors.count(name) != 0; }
};

bool is_running_stat(std::string_view name);
inline constexpr float kBatchNormEpsilon = 1e-6f;

/// Fan-in scaled uniform conv weights, zero biases, identity batch norm.
ModelWeights init_weights(const Graph& graph, std::uint64_t seed);
/// Throws ConfigError if any tensor the graph needs is missing or misshapen.
void check_weights(const Graph& graph, const ModelWeights& weights);

/// Element count of all trainable tensors (running statistics excluded).
std::size_t param_count(const ModelWeights& weights);

/// Optional per-node callback during float inference.
using NodeObserver = std::function<void(int node, const Tensor& value)>;

/// Float inference over an arbitrary graph; BN uses running statistics.
/// Returns the values of `outputs` in order.
std::vector<Tensor> run_graph(const Graph& graph, const ModelWeights& weights, const Tensor& input,
                              const std::vector<int>& outputs, const NodeObserver& observer = {});

struct MMNetOutput {
  Tensor alpha;       // (n, 1, S, S) foreground probability
  Tensor aux_logits;  // (n, 2, S/16, S/16)
};

/// image: (n, 3, S, S) with S == config.input_size.
MMNetOutput forward(const MMNetGraph& model, const ModelWeights& weights, const Tensor& image);

struct TraceRow {
  std::string name;
  std::string detail;
  Shape shape;
};
std::vector<TraceRow> shape_trace(const MMNetGraph& model);
/// One line per block: "<name>  <detail>  <h> x <w>, <c>".
std::string format_shape_trace(const std::vector<TraceRow>& rows);

// Training support.

/// Binds trainable weight names to autodiff parameters.
class ParameterSet {
 public:
  explicit ParameterSet(const ModelWeights& weights);
  ad::Parameter& at(const std::string& name);
  std::vector<ad::Parameter>& all() { return params_; }
  const std::vector<ad::Parameter>& all() const { return params_; }
  void zero_grad();
  /// Copies parameter values back into `weights`.
  void store(ModelWeights& weights) const;

 private:
  std::vector<ad::Parameter> params_;
  std::map<std::string, std::size_t> index_;
};

/// Hook applied to weights and activations while recording a forward pass;
/// used to insert fake quantization.
struct TapeHooks {
  std::function<ad::Var(ad::Tape&, ad::Var, const std::string& tensor)> weight;
  std::function<ad::Var(ad::Tape&, ad::Var, int node)> activation;
};

struct TapeForwardOptions {
  /// Batch statistics (and running-stat updates into `weights`) when true.
  bool training = true;
  float bn_momentum = 0.9f;
  const TapeHooks* hooks = nullptr;
};

/// Records the graph on `tape`; returns the tape vars of `outputs`.
std::vector<ad::Var> record_graph(ad::Tape& tape, const Graph& graph, ParameterSet& params,
                                  ModelWeights& weights, ad::Var input, const std::vector<int>& outputs,
                                  const TapeForwardOptions& options = {});

struct TapeOutputs {
  ad::Var alpha;       // foreground channel of the softmax
  ad::Var aux_logits;
};
TapeOutputs record_forward(ad::Tape& tape, const MMNetGraph& model, ParameterSet& params,
                           ModelWeights& weights, ad::Var image, const TapeForwardOptions& options = {});

}  // namespace mmnet
