#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>
#include <unistd.h>

#include "mmnet/cli.hpp"
#include "mmnet/data.hpp"

namespace mmnet {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

struct Invocation {
  int code;
  std::string out, err;

  // Last line of stdout that parses as a JSON object with this event.
  json event(const std::string& name) const {
    std::istringstream in(out);
    std::string line;
    json found;
    while (std::getline(in, line)) {
      if (line.empty() || line[0] != '{') continue;
      const json j = json::parse(line);
      if (j.value("event", "") == name) found = j;
    }
    return found;
  }
};

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("mmnet_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()) + "_" +
            std::to_string(::getpid()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  std::string path(const std::string& name) const { return (dir_ / name).string(); }

  Invocation run(std::vector<std::string> args) const {
    std::ostringstream out, err;
    const int code = cli_main(args, out, err);
    return {code, out.str(), err.str()};
  }

  std::string write(const std::string& name, const std::string& text) const {
    std::ofstream(path(name)) << text;
    return path(name);
  }

  std::string bytes(const std::string& name) const {
    std::ifstream in(path(name), std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  }

  fs::path dir_;
};

TEST_F(Cli, ArgumentErrorsExitWithTwo) {
  EXPECT_EQ(run({}).code, 2);
  EXPECT_EQ(run({"frobnicate"}).code, 2);
  EXPECT_EQ(run({"infer", "--model", "x"}).code, 2);
  EXPECT_EQ(run({"--help"}).code, 0);
}

TEST_F(Cli, MissingModelNamesPath) {
  const std::string missing = path("absent.mmnet");
  const Invocation r = run({"infer", "--model", missing, "--image", path("in.png"), "--out", path("out.png")});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find(missing), std::string::npos) << r.err;
  EXPECT_EQ(json::parse(r.err).at("level"), "error");
}

TEST_F(Cli, TraceReportsShapesAndParameters) {
  const Invocation r = run({"trace", "--width", "1.0", "--input-size", "256"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("Final Block"), std::string::npos);
  EXPECT_NE(r.out.find("256 x 256, 2"), std::string::npos);
  EXPECT_EQ(r.event("trace").at("params"), 202444);
}

TEST_F(Cli, BenchRunsExactlyOneHundredSingleThreadTimings) {
  ASSERT_EQ(run({"init", "--width", "0.35", "--input-size", "32", "--out", path("m.mmnet")}).code, 0);
  EXPECT_EQ(run({"bench", "--model", path("m.mmnet"), "--threads", "2"}).code, 2);

  const Invocation r = run({"bench", "--model", path("m.mmnet")});
  ASSERT_EQ(r.code, 0) << r.err;
  const json b = r.event("bench");
  EXPECT_EQ(b.at("runs"), 100);
  EXPECT_EQ(b.at("warmup"), 10);
  EXPECT_EQ(b.at("threads"), 1);
  EXPECT_EQ(b.at("run_ms").size(), 100u);
  EXPECT_TRUE(b.at("deterministic").get<bool>());
  EXPECT_LT(b.at("std_ms").get<double>(), b.at("mean_ms").get<double>());
  double sum = 0.0;
  for (double v : b.at("run_ms")) sum += v;
  EXPECT_NEAR(b.at("mean_ms").get<double>(), sum / 100, 1e-9 * sum);
  EXPECT_NE(r.out.find("+-"), std::string::npos);
}

TEST_F(Cli, TrainQuantizeInferAndBenchTheIntegerPath) {
  const std::string cfg =
      write("cfg.json", R"({"lr": 0.001, "batch_size": 2, "model": {"width_multiplier": 0.35, "input_size": 64}})");
  const Invocation t = run({"train", "--config", cfg, "--synthetic", "4", "--steps", "50", "--out", path("ck.mmnet"),
                     "--log", path("train.log")});
  ASSERT_EQ(t.code, 0) << t.err;
  EXPECT_TRUE(fs::exists(path("ck.mmnet")));
  EXPECT_EQ(t.event("done").at("step"), 50);
  std::ifstream log(path("train.log"));
  int steps = 0;
  for (std::string line; std::getline(log, line);) {
    const json j = json::parse(line);
    if (j.contains("step") && !j.contains("event")) {
      ++steps;
      for (const char* key : {"alpha", "compositional", "kl", "gradient", "aux", "total"}) EXPECT_TRUE(j.contains(key));
    }
  }
  EXPECT_EQ(steps, 50);

  const Invocation q = run({"quantize", "--model", path("ck.mmnet"), "--synthetic", "4", "--out", path("q.mmnet")});
  ASSERT_EQ(q.code, 0) << q.err;
  // The reported drift must match a recomputation from the two files.
  {
    const InferenceModel fm = InferenceModel::load(path("ck.mmnet"));
    const InferenceModel qm = InferenceModel::load(path("q.mmnet"));
    EXPECT_TRUE(qm.quantized());
    double drift = 0.0;
    std::size_t count = 0;
    for (const Sample& s : synth_samples(4, 64, 64, 0)) {
      const Tensor a = fm.run(s.image), b = qm.run(s.image);
      for (std::size_t i = 0; i < a.size(); ++i) drift += std::abs(a.data()[i] - b.data()[i]);
      count += a.size();
    }
    EXPECT_NEAR(q.event("quantize").at("mean_abs_alpha_diff").get<double>(), drift / count, 1e-9);
  }

  const Invocation b = run({"bench", "--model", path("q.mmnet"), "--runs", "5", "--warmup", "1"});
  ASSERT_EQ(b.code, 0) << b.err;
  const json c = b.event("bench").at("counters");
  EXPECT_EQ(c.at("float_ops"), 0);
  EXPECT_GT(c.at("int8_convs").get<int>(), 0);
  EXPECT_EQ(c.at("lut_lookups"), 5 * 64 * 64);
  EXPECT_TRUE(b.event("bench").at("quantized").get<bool>());

  write_png(path("photo.png"), synth_samples(1, 60, 80, 3)[0].image);
  for (const char* out : {"a1.png", "a2.png"}) {
    ASSERT_EQ(run({"infer", "--model", path("q.mmnet"), "--image", path("photo.png"), "--out", path(out)}).code, 0);
  }
  EXPECT_EQ(bytes("a1.png"), bytes("a2.png"));
  EXPECT_EQ(read_png(path("a1.png"), 1).shape(), (Shape{1, 1, 60, 80}));
  ASSERT_EQ(run({"infer", "--model", path("q.mmnet"), "--image", path("photo.png"), "--out", path("s.png"),
                 "--model-size"})
                .code,
            0);
  EXPECT_EQ(read_png(path("s.png"), 1).shape(), (Shape{1, 1, 64, 64}));
}

TEST_F(Cli, InferRestoresEvaluationResolution) {
  ASSERT_EQ(run({"init", "--width", "0.35", "--input-size", "256", "--out", path("m.mmnet")}).code, 0);
  write_png(path("big.png"), synth_samples(1, 600, 800, 4)[0].image);
  const Invocation r = run({"infer", "--model", path("m.mmnet"), "--image", path("big.png"), "--out", path("alpha.png")});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(read_png(path("alpha.png"), 1).shape(), (Shape{1, 1, 600, 800}));
  write("garbage.png", "no image here");
  EXPECT_EQ(run({"infer", "--model", path("m.mmnet"), "--image", path("garbage.png"), "--out", path("x.png")}).code, 2);
}

TEST_F(Cli, ResumedTrainingMatchesUninterruptedRun) {
  const std::string cfg = write(
      "cfg.json", R"({"lr": 0.001, "batch_size": 2, "seed": 3, "model": {"width_multiplier": 0.35, "input_size": 32}})");
  const auto train = [&](std::vector<std::string> extra) {
    std::vector<std::string> args{"train", "--config", cfg, "--synthetic", "4"};
    args.insert(args.end(), extra.begin(), extra.end());
    return run(args);
  };
  ASSERT_EQ(train({"--steps", "6", "--out", path("full.mmnet")}).code, 0);
  ASSERT_EQ(train({"--steps", "3", "--out", path("half.mmnet")}).code, 0);
  const Invocation resumed = train({"--steps", "6", "--resume", path("half.mmnet"), "--out", path("resumed.mmnet")});
  ASSERT_EQ(resumed.code, 0) << resumed.err;
  EXPECT_EQ(bytes("full.mmnet"), bytes("resumed.mmnet"));
}

TEST_F(Cli, InvalidConfigFieldIsNamed) {
  const std::string cfg = write("bad.json", R"({"batch_size": 2, "momentum": 0.5})");
  const Invocation r = run({"train", "--config", cfg, "--synthetic", "2", "--out", path("x.mmnet")});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("momentum"), std::string::npos) << r.err;
}

TEST_F(Cli, EvalReportsScaledMetrics) {
  fs::create_directories(path("data"));
  fs::create_directories(path("empty"));
  for (const Sample& s : synth_samples(2, 60, 80, 9)) save_sample(path("data"), s);

  const Invocation gt = run({"eval", "--data", path("data"), "--use-ground-truth"});
  ASSERT_EQ(gt.code, 0) << gt.err;
  const json summary = gt.event("eval");
  EXPECT_EQ(summary.at("images"), 2);
  EXPECT_EQ(summary.at("gradient_e3").get<double>(), 0.0);
  EXPECT_EQ(summary.at("mad_e2").get<double>(), 0.0);
  EXPECT_EQ(summary.at("units").at("gradient_e3"), "1e-3");
  EXPECT_EQ(summary.at("units").at("mad_e2"), "1e-2");

  const Invocation empty = run({"eval", "--data", path("empty"), "--use-ground-truth"});
  EXPECT_EQ(empty.code, 2);
  EXPECT_NE(empty.err.find("empty"), std::string::npos);

  ASSERT_EQ(run({"init", "--width", "0.35", "--input-size", "32", "--out", path("m.mmnet")}).code, 0);
  const Invocation m = run({"eval", "--model", path("m.mmnet"), "--data", path("data")});
  ASSERT_EQ(m.code, 0) << m.err;
  const double mad = m.event("eval").at("mad_e2");
  EXPECT_GT(mad, 0.0);
  EXPECT_LE(mad, 100.0);
}

}  // namespace
}  // namespace mmnet
