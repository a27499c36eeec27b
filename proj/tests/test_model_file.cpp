#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>

#include <unistd.h>

#include "mmnet/data.hpp"
#include "mmnet/model_file.hpp"
#include "mmnet/quantization.hpp"
#include "test_util.hpp"

namespace mmnet {
namespace {

namespace fs = std::filesystem;
using testing::random_tensor;

MMNetGraph tiny_model() {
  MMNetConfig c;
  c.width_multiplier = 0.35f;
  c.input_size = 32;
  return build_mmnet(c);
}

ModelFileErrorKind parse_error(std::span<const std::uint8_t> bytes) {
  try {
    ModelFile::parse(bytes);
  } catch (const ModelFileError& e) {
    return e.kind();
  }
  ADD_FAILURE() << "parse accepted corrupted bytes";
  return ModelFileErrorKind::io;
}

TEST(ModelFile, FloatRoundTripIsBitExact) {
  const MMNetGraph m = tiny_model();
  const ModelWeights w = init_weights(m.graph, 3);
  ModelFile f = make_float_file(m, w);
  f.metadata["note"] = "round trip";
  const auto bytes = f.serialize();
  EXPECT_EQ(std::memcmp(bytes.data(), "MMNETMF\0", 8), 0);

  const ModelFile back = ModelFile::parse(bytes);
  EXPECT_EQ(back.serialize(), bytes);
  EXPECT_EQ(back.metadata.at("note"), "round trip");
  EXPECT_EQ(back.config.width_multiplier, 0.35f);
  EXPECT_EQ(back.config.input_size, 32);
  const MMNetGraph rebuilt = verify_architecture(back);
  const ModelWeights loaded = weights_from_file(back, rebuilt.graph);
  ASSERT_EQ(loaded.tensors.size(), w.tensors.size());
  for (const auto& [name, t] : w.tensors) {
    EXPECT_EQ(loaded.at(name).shape(), t.shape());
    EXPECT_EQ(loaded.at(name).values(), t.values()) << name;
  }
}

TEST(ModelFile, MixedDtypesRoundTrip) {
  ModelFile f;
  std::mt19937_64 rng(4);
  const Tensor t = random_tensor({2, 3, 4, 5}, rng);
  QuantTensor q = quantize(t, QuantParams::from_range(-1.0f, 1.0f));
  const std::vector<std::int32_t> ints{-7, 0, 1 << 30, -(1 << 30)};
  f.add("f", t);
  f.add("q", q);
  f.add("i", std::span<const std::int32_t>(ints));
  f.quant_params["act"] = QuantParams::from_range(0.0f, 6.0f);
  const ModelFile back = ModelFile::parse(f.serialize());
  EXPECT_EQ(back.f32("f").values(), t.values());
  EXPECT_EQ(back.u8("q").data, q.data);
  EXPECT_EQ(back.u8("q").params, q.params);
  EXPECT_EQ(back.i32("i"), ints);
  EXPECT_EQ(back.quant_params.at("act"), QuantParams::from_range(0.0f, 6.0f));
  EXPECT_EQ(f.payload_bytes(), t.size() * 4 + q.data.size() + ints.size() * 4);
  EXPECT_THROW(back.require("missing"), ModelFileError);
  EXPECT_THROW(back.u8("f"), ModelFileError);
}

TEST(ModelFile, BadMagicIsDistinct) {
  auto bytes = make_float_file(tiny_model(), init_weights(tiny_model().graph, 1)).serialize();
  bytes[2] ^= 0x20;
  EXPECT_EQ(parse_error(bytes), ModelFileErrorKind::bad_magic);
  const std::uint8_t png_header[] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n', 0, 0, 0, 0};
  EXPECT_EQ(parse_error(png_header), ModelFileErrorKind::bad_magic);
}

TEST(ModelFile, PayloadCorruptionFailsChecksum) {
  const auto good = make_float_file(tiny_model(), init_weights(tiny_model().graph, 1)).serialize();
  std::mt19937_64 rng(5);
  for (int k = 0; k < 20; ++k) {
    auto bytes = good;
    // Stay inside the payload: it dominates the file and ends 8 bytes before the end.
    const std::size_t pos = bytes.size() - 9 - rng() % (bytes.size() / 2);
    bytes[pos] ^= static_cast<std::uint8_t>(1u << (rng() % 8));
    EXPECT_EQ(parse_error(bytes), ModelFileErrorKind::checksum) << pos;
  }
  // Any single-byte corruption past the magic is rejected somehow.
  for (std::size_t pos = 8; pos < 400; pos += 7) {
    auto bytes = good;
    bytes[pos] ^= 0x5a;
    EXPECT_THROW(ModelFile::parse(bytes), ModelFileError) << pos;
  }
}

TEST(ModelFile, TruncationIsReported) {
  const auto good = make_float_file(tiny_model(), init_weights(tiny_model().graph, 1)).serialize();
  for (std::size_t len : {std::size_t{0}, std::size_t{5}, std::size_t{12}, std::size_t{40}, good.size() / 3,
                          good.size() / 2, good.size() - 9, good.size() - 1}) {
    EXPECT_EQ(parse_error(std::span(good).first(len)), ModelFileErrorKind::truncated) << len;
  }
  auto longer = good;
  longer.push_back(0);
  EXPECT_EQ(parse_error(longer), ModelFileErrorKind::malformed);
}

TEST(ModelFile, VersionAndHashAreChecked) {
  const MMNetGraph m = tiny_model();
  auto bytes = make_float_file(m, init_weights(m.graph, 1)).serialize();
  bytes[8] = 99;
  EXPECT_EQ(parse_error(bytes), ModelFileErrorKind::unsupported_version);

  ModelFile f = make_float_file(m, init_weights(m.graph, 1));
  f.architecture_hash ^= 1;
  const ModelFile back = ModelFile::parse(f.serialize());
  try {
    verify_architecture(back);
    FAIL() << "expected hash mismatch";
  } catch (const ModelFileError& e) {
    EXPECT_EQ(e.kind(), ModelFileErrorKind::hash_mismatch);
  }
}

TEST(ModelFile, MissingFileNamesPath) {
  const fs::path p = fs::temp_directory_path() / "mmnet_does_not_exist.mmnet";
  try {
    ModelFile::load(p);
    FAIL() << "expected io error";
  } catch (const ModelFileError& e) {
    EXPECT_EQ(e.kind(), ModelFileErrorKind::io);
    EXPECT_NE(std::string(e.what()).find(p.string()), std::string::npos);
  }
}

TEST(ModelFile, QuantizedRoundTripInfersIdentically) {
  const MMNetGraph m = tiny_model();
  const ModelWeights w = init_weights(m.graph, 6);
  const auto samples = synth_samples(3, 32, 32, 2);
  std::vector<Tensor> calibration;
  for (const Sample& s : samples) calibration.push_back(s.image);
  const QuantizedModel q = quantize_model(m, w, calibration);

  const fs::path path = fs::temp_directory_path() / ("mmnet_q_" + std::to_string(::getpid()) + ".mmnet");
  make_quantized_file(m, q).save(path);
  const ModelFile file = ModelFile::load(path);
  fs::remove(path);
  EXPECT_EQ(file.kind, ModelKind::quantized);
  const QuantizedModel back = quantized_from_file(file, verify_architecture(file));
  EXPECT_EQ(back.lut.table, q.lut.table);
  for (const Sample& s : samples) EXPECT_EQ(back.forward(s.image).values(), q.forward(s.image).values());
  EXPECT_THROW(quantized_from_file(make_float_file(m, w), m), ModelFileError);
}

TEST(ModelFile, QuantizedWeightPayloadIsAtLeastThreeTimesSmaller) {
  for (float alpha : {0.35f, 1.0f}) {
    MMNetConfig c;
    c.width_multiplier = alpha;
    c.input_size = 32;
    const MMNetGraph m = build_mmnet(c);
    const ModelWeights w = init_weights(m.graph, 7);
    std::mt19937_64 rng(8);
    const std::vector<Tensor> calibration{random_tensor({1, 3, 32, 32}, rng, 0.0f, 1.0f)};
    const QuantizedModel q = quantize_model(m, w, calibration);
    const ModelFile ff = make_float_file(m, w);
    const ModelFile qf = make_quantized_file(m, q);
    const auto weight_bytes = [](const ModelFile& f) {
      std::size_t total = 0;
      for (const TensorRecord& r : f.tensors) {
        if (r.name.ends_with(".weight")) total += r.bytes.size();
      }
      return total;
    };
    EXPECT_GE(weight_bytes(ff), 3 * weight_bytes(qf)) << alpha;
    EXPECT_LT(qf.serialize().size(), ff.serialize().size()) << alpha;
  }
}

}  // namespace
}  // namespace mmnet
