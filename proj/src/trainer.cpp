#include "mmnet/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>

#include "json.hpp"
#include "mmnet/quantization.hpp"

namespace mmnet {

void adam_step(std::span<ad::Parameter> params, AdamState& state, const AdamConfig& cfg) {
  for (const ad::Parameter& p : params) {
    if (!all_finite(p.grad)) throw NonFiniteGradient("non-finite gradient in parameter '" + p.name + "'");
  }
  ++state.step;
  const double bc1 = 1.0 - std::pow(static_cast<double>(cfg.beta1), static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(static_cast<double>(cfg.beta2), static_cast<double>(state.step));
  const float decay = 1.0f - cfg.lr * cfg.weight_decay;
  for (ad::Parameter& p : params) {
    Tensor& m = state.m[p.name];
    Tensor& v = state.v[p.name];
    if (m.shape() != p.value.shape()) m = Tensor(p.value.shape());
    if (v.shape() != p.value.shape()) v = Tensor(p.value.shape());
    auto w = p.value.data();
    const auto g = p.grad.data();
    auto ms = m.data();
    auto vs = v.data();
    for (std::size_t i = 0; i < w.size(); ++i) {
      float gi = g[i];
      if (cfg.decoupled_weight_decay) {
        w[i] *= decay;
      } else {
        gi += cfg.weight_decay * w[i];
      }
      ms[i] = cfg.beta1 * ms[i] + (1.0f - cfg.beta1) * gi;
      vs[i] = cfg.beta2 * vs[i] + (1.0f - cfg.beta2) * gi * gi;
      const double mhat = ms[i] / bc1;
      const double vhat = vs[i] / bc2;
      w[i] -= static_cast<float>(cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps));
    }
  }
}

void TrainConfig::validate() const {
  const auto fail = [](const std::string& field, const std::string& why) {
    throw std::invalid_argument("invalid config field '" + field + "': " + why);
  };
  if (!(lr > 0.0f) || !std::isfinite(lr)) fail("lr", "must be > 0");
  if (!(weight_decay >= 0.0f) || !std::isfinite(weight_decay)) fail("weight_decay", "must be >= 0");
  if (batch_size < 1) fail("batch_size", "must be >= 1");
  if (max_steps < 0) fail("steps", "must be >= 0");
  if (checkpoint_every < 0) fail("checkpoint_every", "must be >= 0");
  if (!(bn_momentum >= 0.0f && bn_momentum < 1.0f)) fail("bn_momentum", "must lie in [0, 1)");
  try {
    loss_weights.validate();
  } catch (const std::invalid_argument& e) {
    fail("loss_weights", e.what());
  }
  try {
    augment_config.validate();
  } catch (const std::invalid_argument& e) {
    fail("augment_config", e.what());
  }
}

AdamConfig TrainConfig::adam() const {
  AdamConfig a;
  a.lr = lr;
  a.weight_decay = weight_decay;
  a.decoupled_weight_decay = decoupled_weight_decay;
  return a;
}

TrainConfig parse_train_config(const std::string& json_text, MMNetConfig* model) {
  using nlohmann::json;
  json doc;
  try {
    doc = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw std::invalid_argument(std::string("config is not valid JSON: ") + e.what());
  }
  if (!doc.is_object()) throw std::invalid_argument("config must be a JSON object");
  TrainConfig cfg;
  const auto get = [](const json& obj, const std::string& key, const std::string& field, auto& out) {
    if (!obj.contains(key)) return;
    try {
      out = obj.at(key).get<std::remove_reference_t<decltype(out)>>();
    } catch (const json::exception&) {
      throw std::invalid_argument("invalid config field '" + field + "': wrong type");
    }
  };
  for (const auto& [key, value] : doc.items()) {
    static const char* known[] = {"lr",       "weight_decay",     "decoupled_weight_decay", "batch_size",
                                  "steps",    "seed",             "loss_weights",           "augment",
                                  "checkpoint_every", "quantization_aware", "bn_momentum", "model"};
    if (std::find(std::begin(known), std::end(known), key) == std::end(known)) {
      throw std::invalid_argument("invalid config field '" + key + "': unknown key");
    }
    (void)value;
  }
  get(doc, "lr", "lr", cfg.lr);
  get(doc, "weight_decay", "weight_decay", cfg.weight_decay);
  get(doc, "decoupled_weight_decay", "decoupled_weight_decay", cfg.decoupled_weight_decay);
  get(doc, "batch_size", "batch_size", cfg.batch_size);
  get(doc, "steps", "steps", cfg.max_steps);
  get(doc, "seed", "seed", cfg.seed);
  get(doc, "augment", "augment", cfg.augment);
  get(doc, "checkpoint_every", "checkpoint_every", cfg.checkpoint_every);
  get(doc, "quantization_aware", "quantization_aware", cfg.quantization_aware);
  get(doc, "bn_momentum", "bn_momentum", cfg.bn_momentum);
  if (doc.contains("loss_weights")) {
    const json& lw = doc.at("loss_weights");
    if (!lw.is_object()) throw std::invalid_argument("invalid config field 'loss_weights': must be an object");
    for (const auto& [key, value] : lw.items()) {
      float* slot = key == "alpha"           ? &cfg.loss_weights.alpha
                    : key == "compositional" ? &cfg.loss_weights.compositional
                    : key == "kl"            ? &cfg.loss_weights.kl
                    : key == "gradient"      ? &cfg.loss_weights.gradient
                    : key == "aux"           ? &cfg.loss_weights.aux
                                             : nullptr;
      const std::string field = "loss_weights." + key;
      if (slot == nullptr) throw std::invalid_argument("invalid config field '" + field + "': unknown key");
      if (!value.is_number()) throw std::invalid_argument("invalid config field '" + field + "': wrong type");
      *slot = value.get<float>();
      if (!(*slot >= 0.0f)) throw std::invalid_argument("invalid config field '" + field + "': must be >= 0");
    }
  }
  if (doc.contains("model")) {
    const json& m = doc.at("model");
    if (!m.is_object()) throw std::invalid_argument("invalid config field 'model': must be an object");
    MMNetConfig mc = model ? *model : MMNetConfig{};
    for (const auto& [key, value] : m.items()) {
      if (key != "width_multiplier" && key != "input_size" && key != "skip_connections") {
        throw std::invalid_argument("invalid config field 'model." + key + "': unknown key");
      }
      (void)value;
    }
    get(m, "width_multiplier", "model.width_multiplier", mc.width_multiplier);
    get(m, "input_size", "model.input_size", mc.input_size);
    get(m, "skip_connections", "model.skip_connections", mc.skip_connections);
    try {
      mc.validate();
    } catch (const ConfigError& e) {
      throw std::invalid_argument(std::string("invalid config field 'model': ") + e.what());
    }
    if (model) *model = mc;
  }
  cfg.validate();
  return cfg;
}

std::vector<int> batch_indices(std::uint64_t seed, std::int64_t step, int batch_size, int dataset_size) {
  if (dataset_size <= 0) throw std::invalid_argument("batch_indices: empty dataset");
  std::vector<int> out(batch_size);
  std::int64_t cached_epoch = -1;
  std::vector<int> perm(dataset_size);
  for (int i = 0; i < batch_size; ++i) {
    const std::int64_t pos = step * batch_size + i;
    const std::int64_t epoch = pos / dataset_size;
    if (epoch != cached_epoch) {
      std::iota(perm.begin(), perm.end(), 0);
      std::mt19937_64 rng = sample_rng(seed, static_cast<std::uint64_t>(epoch));
      std::shuffle(perm.begin(), perm.end(), rng);
      cached_epoch = epoch;
    }
    out[i] = perm[pos % dataset_size];
  }
  return out;
}

Batch make_batch(std::span<const Sample> data, const TrainConfig& cfg, int input_size, std::int64_t step) {
  const std::vector<int> idx = batch_indices(cfg.seed, step, cfg.batch_size, static_cast<int>(data.size()));
  std::vector<Tensor> images, alphas;
  AugmentConfig ac = cfg.augment_config;
  ac.target_size = input_size;
  for (int i = 0; i < cfg.batch_size; ++i) {
    const Sample& s = data[idx[i]];
    if (cfg.augment) {
      std::mt19937_64 rng =
          sample_rng(cfg.seed ^ 0xa5a5a5a5a5a5a5a5ull, static_cast<std::uint64_t>(step * cfg.batch_size + i));
      Sample a = augment(s, ac, rng);
      images.push_back(std::move(a.image));
      alphas.push_back(std::move(a.alpha));
    } else {
      if (s.image.h() != input_size || s.image.w() != input_size) {
        Sample r = resize_sample(s, input_size, input_size);
        images.push_back(std::move(r.image));
        alphas.push_back(std::move(r.alpha));
      } else {
        images.push_back(s.image);
        alphas.push_back(s.alpha);
      }
    }
  }
  return {stack_batch(images), stack_batch(alphas)};
}

namespace {

LossBreakdown run_step(const MMNetGraph& model, ParameterSet& params, ModelWeights& weights, const Batch& batch,
                       const TrainConfig& cfg, const TapeHooks* hooks, bool backward) {
  ad::Tape tape;
  TapeForwardOptions opts;
  opts.training = true;
  opts.bn_momentum = cfg.bn_momentum;
  opts.hooks = hooks;
  const ad::Var image = tape.constant(batch.image);
  const TapeOutputs out = record_forward(tape, model, params, weights, image, opts);
  const LossVars lv = loss_combined(tape, out.alpha, out.aux_logits, batch.alpha, batch.image, cfg.loss_weights);
  const LossBreakdown b = breakdown(tape, lv);
  if (backward) tape.backward(lv.total);
  return b;
}

}  // namespace

LossBreakdown evaluate_batch(const MMNetGraph& model, const TrainState& state, std::span<const Sample> data,
                             const TrainConfig& cfg, std::int64_t step) {
  ModelWeights scratch = state.weights;
  ParameterSet params(scratch);
  const Batch batch = make_batch(data, cfg, model.config.input_size, step);
  return run_step(model, params, scratch, batch, cfg, nullptr, false);
}

TrainReport train_loop(const MMNetGraph& model, TrainState& state, std::span<const Sample> data,
                       const TrainConfig& cfg, const StepCallback& on_step) {
  cfg.validate();
  if (data.empty()) throw std::invalid_argument("train_loop: training data is empty");
  check_weights(model.graph, state.weights);
  TrainReport report;
  report.initial = evaluate_batch(model, state, data, cfg, state.step);
  report.final_step = state.step;

  ParameterSet params(state.weights);
  std::optional<QatState> qat;
  if (cfg.quantization_aware) qat.emplace(model);
  const AdamConfig adam = cfg.adam();
  while (state.step < cfg.max_steps) {
    const Batch batch = make_batch(data, cfg, model.config.input_size, state.step);
    params.zero_grad();
    const LossBreakdown loss =
        run_step(model, params, state.weights, batch, cfg, qat ? &qat->hooks() : nullptr, true);
    adam_step(params.all(), state.adam, adam);
    ++state.step;
    params.store(state.weights);
    StepRecord rec{state.step, loss};
    report.steps.push_back(rec);
    if (on_step) on_step(rec);
    if (cfg.checkpoint_every > 0 && !cfg.checkpoint_path.empty() && state.step % cfg.checkpoint_every == 0) {
      save_checkpoint(cfg.checkpoint_path, model, state);
    }
  }
  report.final_step = state.step;
  return report;
}

ModelFile checkpoint_file(const MMNetGraph& model, const TrainState& state) {
  ModelFile f = make_float_file(model, state.weights);
  f.kind = ModelKind::checkpoint;
  f.metadata["train.step"] = std::to_string(state.step);
  f.metadata["adam.step"] = std::to_string(state.adam.step);
  for (const auto& [name, t] : state.adam.m) f.add("adam.m." + name, t);
  for (const auto& [name, t] : state.adam.v) f.add("adam.v." + name, t);
  return f;
}

TrainState state_from_file(const ModelFile& file, const MMNetGraph& model) {
  if (file.architecture_hash != model.architecture_hash()) {
    throw ModelFileError(ModelFileErrorKind::hash_mismatch,
                         "architecture mismatch: checkpoint was written for a different network configuration");
  }
  TrainState s;
  s.weights = weights_from_file(file, model.graph);
  if (file.kind == ModelKind::checkpoint) {
    const auto num = [&](const std::string& key) -> std::int64_t {
      const auto it = file.metadata.find(key);
      if (it == file.metadata.end()) throw ModelFileError(ModelFileErrorKind::malformed, "checkpoint lacks " + key);
      return std::stoll(it->second);
    };
    s.step = num("train.step");
    s.adam.step = num("adam.step");
    for (const TensorRecord& r : file.tensors) {
      if (r.name.rfind("adam.m.", 0) == 0) s.adam.m[r.name.substr(7)] = file.f32(r.name);
      if (r.name.rfind("adam.v.", 0) == 0) s.adam.v[r.name.substr(7)] = file.f32(r.name);
    }
  } else if (file.kind != ModelKind::float_weights) {
    throw ModelFileError(ModelFileErrorKind::wrong_kind, "expected a float model or checkpoint");
  }
  return s;
}

void save_checkpoint(const std::filesystem::path& path, const MMNetGraph& model, const TrainState& state) {
  checkpoint_file(model, state).save(path);
}

TrainState load_checkpoint(const std::filesystem::path& path, const MMNetGraph& model) {
  return state_from_file(ModelFile::load(path), model);
}

}  // namespace mmnet
