#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <deque>
#include <vector>

#include "mmnet/nn_ops.hpp"
#include "mmnet/tensor.hpp"

namespace mmnet::ad {

class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// A trainable tensor and its accumulated gradient.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;

  Parameter() = default;
  Parameter(std::string name, Tensor value);
  void zero_grad();
};

/// Handle to a node recorded on a Tape.
struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

class Tape;

/// Called during backward with the node's id; reads tape.grad(self) and
/// accumulates into the inputs via tape.accumulate().
using BackwardFn = std::function<void(Tape&, int self)>;

/// Reverse-mode record. Nodes are appended in evaluation order, so every
/// node's inputs precede it; backward walks the list once in reverse.
class Tape {
 public:
  Var constant(Tensor value);
  /// A leaf whose gradient is retained on the tape (readable via grad()).
  Var variable(Tensor value);
  /// A leaf bound to an external parameter; backward adds into param.grad.
  Var parameter(Parameter& param);

  Var record(Tensor value, std::vector<Var> inputs, BackwardFn backward, const char* op);
  /// Records a one-element node and keeps `value` at double precision as well,
  /// so reductions can be read back without f32 rounding.
  Var record_scalar(double value, std::vector<Var> inputs, BackwardFn backward, const char* op);

  const Tensor& value(Var v) const { return nodes_.at(v.id).value; }
  /// Gradient of v, or an empty tensor if nothing flowed into it.
  const Tensor& grad(Var v) const { return nodes_.at(v.id).grad; }
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }
  const std::vector<Var>& inputs(Var v) const { return nodes_.at(v.id).inputs; }
  /// Double value of a one-element node (exact for record_scalar nodes).
  double scalar(Var v) const;
  bool has_exact_scalar(Var v) const { return nodes_.at(v.id).exact_valid; }

  void accumulate(Var v, const Tensor& g);
  void accumulate(Var v, std::span<const float> g);

  /// Seeds d(loss)/d(loss) = 1 and propagates. Throws ContractError unless
  /// `loss` holds exactly one element. Returns the number of nodes visited.
  std::size_t backward(Var loss);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    std::vector<Var> inputs;
    BackwardFn backward;
    Parameter* param = nullptr;
    bool requires_grad = false;
    const char* op = "";
    double exact = 0.0;
    bool exact_valid = false;
  };
  // Deque so references returned by value()/grad() survive later records.
  std::deque<Node> nodes_;
};

// Differentiable operators.
Var conv2d(Tape& t, Var x, Var weights, std::optional<Var> bias, const ConvSpec& spec);

/// Running statistics updated as a side effect of training-mode batch norm.
struct RunningStats {
  std::span<float> mean;
  std::span<float> var;
  float momentum = 0.9f;
};

/// Training-mode batch norm; `stats` (if non-null) receives the running-stat
/// update, which is not part of the differentiated graph.
Var batch_norm(Tape& t, Var x, Var gamma, Var beta, float epsilon, const RunningStats* stats);
/// Inference-mode batch norm with fixed statistics.
Var batch_norm_frozen(Tape& t, Var x, Var gamma, Var beta, std::span<const float> mean,
                      std::span<const float> var, float epsilon);

/// Gradient 1 on the open interval (0, 6) and 0 elsewhere, including the kinks.
Var relu6(Tape& t, Var x);
Var concat_channels(Tape& t, Var a, Var b);
Var slice_channels(Tape& t, Var x, int begin, int count);
Var bilinear_resize(Tape& t, Var x, int out_h, int out_w, bool align_corners = false);
Var softmax2(Tape& t, Var x);
Var sobel_gradients(Tape& t, Var alpha);

Var add(Tape& t, Var a, Var b);
Var scale(Tape& t, Var x, float s);
Var sum(Tape& t, Var x);
/// sum(x * w) with a constant weight tensor.
Var dot(Tape& t, Var x, const Tensor& w);
Var mul(Tape& t, Var a, Var b);

struct GradCheckOptions {
  double step = 1e-3;
  double tolerance = 1e-3;
  /// Coordinates sampled across all parameters; all are checked when the
  /// total element count is smaller.
  std::size_t samples = 50;
  std::uint64_t seed = 0;
};

struct GradCheckFailure {
  std::string parameter;
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double error = 0.0;
};

struct GradCheckReport {
  std::size_t checked = 0;
  double max_error = 0.0;
  std::vector<GradCheckFailure> failures;
  bool passed() const { return checked > 0 && failures.empty(); }
};

/// Builds a scalar loss on a fresh tape from the current parameter values.
using LossBuilder = std::function<Var(Tape&)>;

/// Compares backward() against central differences, with the per-coordinate
/// error |g_analytic - g_fd| / max(1, |g_fd|). The difference quotient uses
/// the step actually representable in f32 and is formed in f64.
GradCheckReport grad_check(const LossBuilder& f, std::span<Parameter* const> params,
                           const GradCheckOptions& options = {});

}  // namespace mmnet::ad
