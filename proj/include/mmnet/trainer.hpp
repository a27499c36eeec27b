#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "mmnet/arch.hpp"
#include "mmnet/autodiff.hpp"
#include "mmnet/data.hpp"
#include "mmnet/model_file.hpp"
#include "mmnet/objectives.hpp"

namespace mmnet {

class NonFiniteGradient : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct AdamConfig {
  float lr = 1e-4f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
  float weight_decay = 4e-7f;
  /// Decay applied directly to the parameter (true) or added to the gradient as L2 (false).
  bool decoupled_weight_decay = true;
};

struct AdamState {
  std::map<std::string, Tensor> m;
  std::map<std::string, Tensor> v;
  std::int64_t step = 0;
};

/// One bias-corrected Adam update over `params` using their accumulated grads.
/// Throws NonFiniteGradient naming the first offending parameter; nothing is
/// modified in that case.
void adam_step(std::span<ad::Parameter> params, AdamState& state, const AdamConfig& cfg);

struct TrainConfig {
  float lr = 1e-4f;
  float weight_decay = 4e-7f;
  bool decoupled_weight_decay = true;
  int batch_size = 32;
  std::int64_t max_steps = 1000;
  std::uint64_t seed = 0;
  LossWeights loss_weights;
  bool augment = false;
  AugmentConfig augment_config;
  /// Write a checkpoint every this many steps (0 disables).
  std::int64_t checkpoint_every = 0;
  std::filesystem::path checkpoint_path;
  /// Fake-quantize weights and fused-op activations during training.
  bool quantization_aware = false;
  float bn_momentum = 0.9f;

  /// Throws std::invalid_argument naming the offending field.
  void validate() const;
  AdamConfig adam() const;
};

/// Parses the JSON training configuration; unknown keys and bad values throw
/// std::invalid_argument naming the field.
TrainConfig parse_train_config(const std::string& json_text, MMNetConfig* model = nullptr);

struct StepRecord {
  std::int64_t step = 0;  // 1-based index of the completed update
  LossBreakdown loss;     // measured on the batch before the update
};

struct TrainReport {
  LossBreakdown initial;
  std::vector<StepRecord> steps;
  std::int64_t final_step = 0;
};

struct TrainState {
  ModelWeights weights;
  AdamState adam;
  std::int64_t step = 0;
};

/// Dataset indices of the batch used at `step`: epoch-wise permutations derived from (seed, epoch).
std::vector<int> batch_indices(std::uint64_t seed, std::int64_t step, int batch_size, int dataset_size);

/// Images (n, 3, S, S) and mattes (n, 1, S, S) for `step`.
struct Batch {
  Tensor image;
  Tensor alpha;
};
Batch make_batch(std::span<const Sample> data, const TrainConfig& cfg, int input_size, std::int64_t step);

using StepCallback = std::function<void(const StepRecord&)>;

/// Runs updates from state.step up to cfg.max_steps. Samples must already be
/// input_size x input_size unless augmentation is enabled.
TrainReport train_loop(const MMNetGraph& model, TrainState& state, std::span<const Sample> data,
                       const TrainConfig& cfg, const StepCallback& on_step = {});

/// Loss of the batch for `step` under training-mode batch norm without touching `state`.
LossBreakdown evaluate_batch(const MMNetGraph& model, const TrainState& state, std::span<const Sample> data,
                             const TrainConfig& cfg, std::int64_t step);

void save_checkpoint(const std::filesystem::path& path, const MMNetGraph& model, const TrainState& state);
/// Throws ModelFileError(hash_mismatch) if the checkpoint was written for another architecture.
TrainState load_checkpoint(const std::filesystem::path& path, const MMNetGraph& model);
ModelFile checkpoint_file(const MMNetGraph& model, const TrainState& state);
TrainState state_from_file(const ModelFile& file, const MMNetGraph& model);

}  // namespace mmnet
