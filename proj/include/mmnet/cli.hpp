#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "mmnet/arch.hpp"
#include "mmnet/model_file.hpp"
#include "mmnet/quantization.hpp"

namespace mmnet {

/// A float, checkpoint or quantized model file ready for inference. Float
/// weights run through the batch-norm-folded plan, the same graph the
/// quantizer sees.
class InferenceModel {
 public:
  static InferenceModel load(const std::filesystem::path& path);
  static InferenceModel from_float(const MMNetGraph& graph, const ModelWeights& weights);
  static InferenceModel from_quantized(const MMNetGraph& graph, QuantizedModel q);

  bool quantized() const { return quantized_; }
  const MMNetGraph& graph() const { return graph_; }
  int input_size() const { return graph_.config.input_size; }

  /// image (n, 3, S, S) -> alpha (n, 1, S, S).
  Tensor run(const Tensor& image, ExecCounters* counters = nullptr) const;
  /// Any-size (1, 3, h, w) image -> alpha at the model size or back at (h, w).
  Tensor matte(const Tensor& image, bool original_size) const;

 private:
  MMNetGraph graph_;
  bool quantized_ = false;
  InferencePlan plan_;
  std::map<std::string, FoldedConv> folded_;
  QuantizedModel q_;
};

struct BenchReport {
  int runs = 0;
  int warmup = 0;
  int threads = 1;
  std::vector<double> run_ms;
  double mean_ms = 0.0;
  double std_ms = 0.0;
  /// Every timed run produced the same alpha bytes.
  bool deterministic = true;
  std::uint64_t output_hash = 0;
  ExecCounters counters;  // summed over timed runs
};

/// Times `runs` inferences on a fixed seeded input after `warmup` untimed ones.
/// Only the forward pass is inside the timing window.
BenchReport run_bench(const InferenceModel& model, int runs, int warmup, std::uint64_t seed);

std::uint64_t tensor_hash(const Tensor& t);

/// Entry point of the command-line tool. Exit codes: 0 success, 1 computation
/// failure, 2 bad input or arguments.
int cli_main(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace mmnet
