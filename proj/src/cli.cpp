#include "mmnet/cli.hpp"

#include <charconv>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iostream>
#include <random>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "mmnet/data.hpp"
#include "mmnet/hash.hpp"
#include "mmnet/nn_ops.hpp"
#include "mmnet/objectives.hpp"
#include "mmnet/trainer.hpp"

namespace mmnet {

using nlohmann::json;

InferenceModel InferenceModel::load(const std::filesystem::path& path) {
  const ModelFile file = ModelFile::load(path);
  const MMNetGraph graph = verify_architecture(file);
  if (file.kind == ModelKind::quantized) return from_quantized(graph, quantized_from_file(file, graph));
  return from_float(graph, state_from_file(file, graph).weights);
}

InferenceModel InferenceModel::from_float(const MMNetGraph& graph, const ModelWeights& weights) {
  check_weights(graph.graph, weights);
  InferenceModel m;
  m.graph_ = graph;
  m.plan_ = build_inference_plan(graph);
  m.folded_ = fold_batch_norm(m.plan_, weights);
  return m;
}

InferenceModel InferenceModel::from_quantized(const MMNetGraph& graph, QuantizedModel q) {
  InferenceModel m;
  m.graph_ = graph;
  m.quantized_ = true;
  m.q_ = std::move(q);
  return m;
}

Tensor InferenceModel::run(const Tensor& image, ExecCounters* counters) const {
  const int s = input_size();
  if (image.c() != 3 || image.h() != s || image.w() != s) {
    throw ShapeError("model expects (n, 3, " + std::to_string(s) + ", " + std::to_string(s) + ") input, got " +
                     image.shape().str());
  }
  if (quantized_) return q_.forward(image, counters);
  if (counters) ++counters->float_ops;
  return run_folded(plan_, folded_, image);
}

Tensor InferenceModel::matte(const Tensor& image, bool original_size) const {
  const int s = input_size();
  const Tensor input = image.h() == s && image.w() == s ? image : bilinear_resize(image, s, s, false);
  Tensor alpha = run(input);
  if (original_size && (image.h() != s || image.w() != s)) alpha = bilinear_resize(alpha, image.h(), image.w(), false);
  for (float& v : alpha.data()) v = std::clamp(v, 0.0f, 1.0f);
  return alpha;
}

std::uint64_t tensor_hash(const Tensor& t) {
  const auto d = t.data();
  return fnv1a64(std::string_view(reinterpret_cast<const char*>(d.data()), d.size() * sizeof(float)));
}

BenchReport run_bench(const InferenceModel& model, int runs, int warmup, std::uint64_t seed) {
  if (runs < 2) throw std::invalid_argument("bench: --runs must be >= 2");
  if (warmup < 0) throw std::invalid_argument("bench: --warmup must be >= 0");
  const int s = model.input_size();
  Tensor input({1, 3, s, s});
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  for (float& v : input.data()) v = u(rng);

  BenchReport r;
  r.runs = runs;
  r.warmup = warmup;
  for (int i = 0; i < warmup; ++i) model.run(input);
  using clock = std::chrono::steady_clock;
  for (int i = 0; i < runs; ++i) {
    ExecCounters c;
    const auto t0 = clock::now();
    const Tensor alpha = model.run(input, &c);
    const auto t1 = clock::now();
    r.run_ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
    const std::uint64_t h = tensor_hash(alpha);
    if (i == 0) r.output_hash = h;
    r.deterministic = r.deterministic && h == r.output_hash;
    r.counters.int8_convs += c.int8_convs;
    r.counters.int8_concats += c.int8_concats;
    r.counters.int8_resizes += c.int8_resizes;
    r.counters.lut_lookups += c.lut_lookups;
    r.counters.float_ops += c.float_ops;
  }
  double sum = 0.0;
  for (double v : r.run_ms) sum += v;
  r.mean_ms = sum / runs;
  double sq = 0.0;
  for (double v : r.run_ms) sq += (v - r.mean_ms) * (v - r.mean_ms);
  r.std_ms = std::sqrt(sq / (runs - 1));
  return r;
}

namespace {

// Bad input or arguments: exit code 2.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shortest decimal that round-trips the float, so 0.35f logs as 0.35.
double num(float v) {
  char buf[32];
  const auto end = std::to_chars(buf, buf + sizeof buf, v).ptr;
  return std::strtod(std::string(buf, end).c_str(), nullptr);
}

void emit(std::ostream& os, const json& record) { os << record.dump() << '\n' << std::flush; }

void log(std::ostream& os, const std::string& level, const std::string& msg, json extra = json::object()) {
  extra["level"] = level;
  extra["msg"] = msg;
  emit(os, extra);
}

json counters_json(const ExecCounters& c) {
  return {{"int8_convs", c.int8_convs},     {"int8_concats", c.int8_concats}, {"int8_resizes", c.int8_resizes},
          {"lut_lookups", c.lut_lookups},   {"float_ops", c.float_ops}};
}

json loss_json(const LossBreakdown& b) {
  return {{"alpha", b.alpha}, {"compositional", b.compositional}, {"kl", b.kl},
          {"gradient", b.gradient}, {"aux", b.aux}, {"total", b.total}};
}

std::string read_text(const std::filesystem::path& p) {
  std::ifstream in(p);
  if (!in) throw UsageError(p.string() + ": cannot open");
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<Sample> load_samples(const std::string& dir, int synthetic, int size, std::uint64_t seed) {
  if (!dir.empty()) {
    std::vector<Sample> s = load_dataset(dir);
    if (s.empty()) throw UsageError(dir + ": dataset is empty (expected <id>.png with <id>_matte.png)");
    return s;
  }
  if (synthetic <= 0) throw UsageError("either --data DIR or --synthetic N (N > 0) is required");
  return synth_samples(synthetic, size, size, seed);
}

MMNetConfig model_config(float width, int size) {
  MMNetConfig c;
  c.width_multiplier = width;
  c.input_size = size;
  return c;
}

struct Options {
  // shared
  std::string model, out, data, log_path, resume, config_path, image;
  int synthetic = 0;
  std::uint64_t seed = 0;
  float width = 1.0f;
  int input_size = 256;
  // per command
  bool original_size = true;
  bool use_ground_truth = false;
  int runs = 100, warmup = 10, threads = 1;
  bool allow_multithread = false;
  std::int64_t steps = -1;
};

int cmd_init(const Options& o, std::ostream& out) {
  const MMNetGraph g = build_mmnet(model_config(o.width, o.input_size));
  const ModelWeights w = init_weights(g.graph, o.seed);
  make_float_file(g, w).save(o.out);
  emit(out, {{"event", "init"}, {"out", o.out}, {"width_multiplier", num(o.width)}, {"input_size", o.input_size},
             {"params", param_count(w)}, {"architecture_hash", g.architecture_hash()}});
  return 0;
}

int cmd_trace(const Options& o, std::ostream& out) {
  const MMNetGraph g = build_mmnet(model_config(o.width, o.input_size));
  out << format_shape_trace(shape_trace(g));
  emit(out, {{"event", "trace"}, {"width_multiplier", num(o.width)}, {"input_size", o.input_size},
             {"params", param_count(init_weights(g.graph, 0))}});
  return 0;
}

int cmd_train(const Options& o, std::ostream& out, std::ostream& err) {
  MMNetConfig mc = model_config(0.35f, 64);
  TrainConfig cfg = o.config_path.empty() ? TrainConfig{} : parse_train_config(read_text(o.config_path), &mc);
  if (o.steps >= 0) cfg.max_steps = o.steps;
  cfg.checkpoint_path = o.out;
  cfg.validate();
  const MMNetGraph g = build_mmnet(mc);
  const std::vector<Sample> data = load_samples(o.data, o.synthetic, mc.input_size, cfg.seed);
  TrainState state;
  if (!o.resume.empty()) {
    state = load_checkpoint(o.resume, g);
    log(err, "info", "resumed", {{"from", o.resume}, {"step", state.step}});
  } else {
    state.weights = init_weights(g.graph, cfg.seed);
  }
  std::ofstream log_file;
  if (!o.log_path.empty()) {
    log_file.open(o.log_path, std::ios::trunc);
    if (!log_file) throw UsageError(o.log_path + ": cannot open for writing");
  }
  const auto record = [&](const json& j) {
    emit(out, j);
    if (log_file) emit(log_file, j);
  };
  record({{"event", "start"}, {"samples", data.size()}, {"width_multiplier", num(mc.width_multiplier)},
          {"input_size", mc.input_size}, {"batch_size", cfg.batch_size}, {"steps", cfg.max_steps},
          {"lr", num(cfg.lr)}, {"weight_decay", num(cfg.weight_decay)}, {"seed", cfg.seed}});
  const TrainReport report = train_loop(g, state, data, cfg, [&](const StepRecord& r) {
    json j = loss_json(r.loss);
    j["step"] = r.step;
    record(j);
  });
  save_checkpoint(o.out, g, state);
  json done = {{"event", "done"}, {"step", report.final_step}, {"checkpoint", o.out}};
  done["initial"] = loss_json(report.initial);
  record(done);
  return 0;
}

int cmd_quantize(const Options& o, std::ostream& out, std::ostream& err) {
  const ModelFile file = ModelFile::load(o.model);
  const MMNetGraph g = verify_architecture(file);
  const ModelWeights w = state_from_file(file, g).weights;
  const int s = g.config.input_size;
  const std::vector<Sample> data = load_samples(o.data, o.synthetic, s, o.seed);
  std::vector<Tensor> images;
  for (const Sample& sm : data) {
    images.push_back(sm.image.h() == s && sm.image.w() == s ? sm.image : bilinear_resize(sm.image, s, s, false));
  }
  std::vector<std::string> warnings;
  QuantizedModel q = quantize_model(g, w, images, {}, &warnings);
  for (const std::string& msg : warnings) log(err, "warning", msg);
  make_quantized_file(g, q).save(o.out);

  // Drift of the integer path against the float model on the calibration images.
  const InferenceModel fm = InferenceModel::from_float(g, w);
  double drift = 0.0;
  std::size_t count = 0;
  for (const Tensor& img : images) {
    const Tensor a = fm.run(img), b = q.forward(img);
    for (std::size_t i = 0; i < a.size(); ++i) drift += std::abs(a.data()[i] - b.data()[i]);
    count += a.size();
  }
  emit(out, {{"event", "quantize"}, {"out", o.out}, {"calibration_images", images.size()},
             {"degenerate_ranges", warnings.size()}, {"mean_abs_alpha_diff", drift / count},
             {"input_bytes", std::filesystem::file_size(o.model)},
             {"quantized_bytes", make_quantized_file(g, q).serialize().size()}});
  return 0;
}

int cmd_infer(const Options& o, std::ostream& out) {
  const InferenceModel m = InferenceModel::load(o.model);
  Tensor image;
  try {
    image = read_png(o.image, 3);
  } catch (const DataError& e) {
    throw UsageError(e.what());
  }
  const Tensor alpha = m.matte(image, o.original_size);
  write_png(o.out, alpha);
  emit(out, {{"event", "infer"}, {"out", o.out}, {"height", alpha.h()}, {"width", alpha.w()},
             {"quantized", m.quantized()}});
  return 0;
}

int cmd_eval(const Options& o, std::ostream& out) {
  std::optional<InferenceModel> m;
  if (!o.use_ground_truth) {
    if (o.model.empty()) throw UsageError("eval: --model is required unless --use-ground-truth is given");
    m = InferenceModel::load(o.model);
  }
  const std::vector<Sample> data = load_dataset(o.data);
  if (data.empty()) throw UsageError(o.data + ": dataset is empty, nothing to evaluate");
  double grad_sum = 0.0, mad_sum = 0.0;
  for (const Sample& s : data) {
    const Tensor pred = m ? m->matte(s.image, true) : s.alpha;
    const double grad = metric_gradient_error(pred, s.alpha);
    const double mad = metric_mad(pred, s.alpha);
    grad_sum += grad;
    mad_sum += mad;
    emit(out, {{"id", s.id}, {"height", s.alpha.h()}, {"width", s.alpha.w()}, {"gradient_e3", grad * 1e3},
               {"mad_e2", mad * 1e2}});
  }
  const double n = static_cast<double>(data.size());
  emit(out, {{"event", "eval"}, {"images", data.size()}, {"gradient_e3", grad_sum / n * 1e3},
             {"mad_e2", mad_sum / n * 1e2}, {"units", {{"gradient_e3", "1e-3"}, {"mad_e2", "1e-2"}}}});
  return 0;
}

int cmd_bench(const Options& o, std::ostream& out, std::ostream& err) {
  if (o.threads != 1 && !o.allow_multithread) {
    throw UsageError("bench: --threads must be 1 (single-thread protocol); pass --allow-multithread to override");
  }
  if (o.threads != 1) log(err, "warning", "inference engine is single-threaded; timing uses one thread");
  const InferenceModel m = InferenceModel::load(o.model);
  const BenchReport r = run_bench(m, o.runs, o.warmup, o.seed);
  emit(out, {{"event", "bench"}, {"model", o.model}, {"quantized", m.quantized()}, {"runs", r.runs},
             {"warmup", r.warmup}, {"threads", r.threads}, {"input_size", m.input_size()},
             {"width_multiplier", num(m.graph().config.width_multiplier)}, {"mean_ms", r.mean_ms}, {"std_ms", r.std_ms},
             {"std_below_mean", r.std_ms < r.mean_ms}, {"deterministic", r.deterministic},
             {"output_hash", r.output_hash}, {"counters", counters_json(r.counters)}, {"run_ms", r.run_ms}});
  out << "latency " << r.mean_ms << " +- " << r.std_ms << " ms over " << r.runs << " runs\n";
  return 0;
}

}  // namespace

int cli_main(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"mobile matting network: train, quantize, run and benchmark"};
  app.name("mmnet");
  app.require_subcommand(1);
  Options o;

  auto* init = app.add_subcommand("init", "write a randomly initialized float model");
  init->add_option("--width", o.width, "width multiplier")->capture_default_str();
  init->add_option("--input-size", o.input_size, "square input size")->capture_default_str();
  init->add_option("--seed", o.seed)->capture_default_str();
  init->add_option("--out", o.out)->required();

  auto* trace = app.add_subcommand("trace", "print per-block output shapes and the parameter count");
  trace->add_option("--width", o.width)->capture_default_str();
  trace->add_option("--input-size", o.input_size)->capture_default_str();

  auto* train = app.add_subcommand("train", "train from a JSON config");
  train->add_option("--config", o.config_path, "JSON training config");
  auto* train_data = train->add_option("--data", o.data, "dataset directory");
  train->add_option("--synthetic", o.synthetic, "train on N synthetic fixtures")->excludes(train_data);
  train->add_option("--steps", o.steps, "override the configured step count");
  train->add_option("--resume", o.resume, "checkpoint to continue from");
  train->add_option("--log", o.log_path, "also write the step log here");
  train->add_option("--out", o.out, "checkpoint path")->required();

  auto* quant = app.add_subcommand("quantize", "fold batch norm, calibrate and write an 8-bit model");
  quant->add_option("--model", o.model, "float model or checkpoint")->required();
  auto* quant_data = quant->add_option("--data", o.data, "calibration dataset directory");
  quant->add_option("--synthetic", o.synthetic, "calibrate on N synthetic fixtures")->excludes(quant_data);
  quant->add_option("--seed", o.seed, "fixture seed")->capture_default_str();
  quant->add_option("--out", o.out)->required();

  auto* infer = app.add_subcommand("infer", "compute an alpha matte for one image");
  infer->add_option("--model", o.model)->required();
  infer->add_option("--image", o.image)->required();
  infer->add_option("--out", o.out, "8-bit grayscale PNG")->required();
  infer->add_flag("--original-size,!--model-size", o.original_size,
                  "resize the matte back to the image resolution (default) or keep the model resolution");

  auto* eval = app.add_subcommand("eval", "gradient error (x1e-3) and MAD (x1e-2) over a dataset");
  eval->add_option("--model", o.model);
  eval->add_option("--data", o.data)->required();
  eval->add_flag("--use-ground-truth", o.use_ground_truth, "score the ground truth against itself");

  auto* bench = app.add_subcommand("bench", "single-thread latency over repeated runs");
  bench->add_option("--model", o.model)->required();
  bench->add_option("--runs", o.runs)->capture_default_str();
  bench->add_option("--warmup", o.warmup)->capture_default_str();
  bench->add_option("--threads", o.threads)->capture_default_str();
  bench->add_flag("--allow-multithread", o.allow_multithread);
  bench->add_option("--seed", o.seed, "input seed")->capture_default_str();

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 2;
  }

  try {
    if (init->parsed()) return cmd_init(o, out);
    if (trace->parsed()) return cmd_trace(o, out);
    if (train->parsed()) return cmd_train(o, out, err);
    if (quant->parsed()) return cmd_quantize(o, out, err);
    if (infer->parsed()) return cmd_infer(o, out);
    if (eval->parsed()) return cmd_eval(o, out);
    if (bench->parsed()) return cmd_bench(o, out, err);
  } catch (const UsageError& e) {
    log(err, "error", e.what());
    return 2;
  } catch (const ModelFileError& e) {
    log(err, "error", e.what());
    return 2;
  } catch (const DataError& e) {
    log(err, "error", e.what());
    return 2;
  } catch (const std::invalid_argument& e) {
    log(err, "error", e.what());
    return 2;
  } catch (const std::exception& e) {
    log(err, "error", e.what());
    return 1;
  }
  return 2;
}

}  // namespace mmnet
