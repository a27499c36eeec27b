#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>

#include <unistd.h>

#include "mmnet/data.hpp"
#include "mmnet/nn_ops.hpp"
#include "test_util.hpp"

namespace mmnet {
namespace {

namespace fs = std::filesystem;
using testing::random_tensor;
using testing::tensor_max;
using testing::tensor_min;

class ScratchDir {
 public:
  ScratchDir() {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    path_ = fs::temp_directory_path() /
            ("mmnet_" + std::string(info->name()) + "_" + std::to_string(::getpid()));
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~ScratchDir() { fs::remove_all(path_); }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

// Values on the 8-bit grid survive a PNG round trip exactly.
Tensor byte_grid_tensor(const Shape& s, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> u(0, 255);
  Tensor t(s);
  for (float& v : t.data()) v = static_cast<float>(u(rng)) / 255.0f;
  return t;
}

TEST(Composite, Examples) {
  std::mt19937_64 rng(1);
  const Tensor fg = random_tensor({1, 3, 4, 5}, rng, 0.0f, 1.0f);
  const Tensor bg = random_tensor({1, 3, 4, 5}, rng, 0.0f, 1.0f);
  EXPECT_EQ(composite(fg, bg, Tensor({1, 1, 4, 5}, 1.0f)).values(), fg.values());
  EXPECT_EQ(composite(fg, bg, Tensor({1, 1, 4, 5}, 0.0f)).values(), bg.values());
  const Tensor mid = composite(Tensor({1, 3, 4, 5}, 1.0f), Tensor({1, 3, 4, 5}, 0.0f), Tensor({1, 1, 4, 5}, 0.5f));
  for (float v : mid.data()) EXPECT_EQ(v, 0.5f);

  const Tensor alpha = random_tensor({1, 1, 4, 5}, rng, 0.0f, 1.0f);
  const Tensor out = composite(fg, bg, alpha);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < 4; ++y)
      for (int x = 0; x < 5; ++x) {
        const float a = alpha.at(0, 0, y, x);
        EXPECT_NEAR(out.at(0, c, y, x), a * fg.at(0, c, y, x) + (1 - a) * bg.at(0, c, y, x), 1e-6);
      }
  EXPECT_THROW(composite(fg, bg, Tensor({1, 1, 4, 4})), ShapeError);
  EXPECT_THROW(composite(fg, Tensor({1, 3, 5, 5}), alpha), ShapeError);
}

TEST(Png, RoundTripIsLossless) {
  ScratchDir dir;
  std::mt19937_64 rng(2);
  const Tensor rgb = byte_grid_tensor({1, 3, 7, 11}, rng);
  const Tensor gray = byte_grid_tensor({1, 1, 5, 3}, rng);
  write_png(dir.path() / "rgb.png", rgb);
  write_png(dir.path() / "gray.png", gray);
  EXPECT_EQ(read_png(dir.path() / "rgb.png", 3).values(), rgb.values());
  EXPECT_EQ(read_png(dir.path() / "gray.png", 1).values(), gray.values());
  EXPECT_EQ(to_bytes(read_png(dir.path() / "rgb.png", 3)), to_bytes(rgb));
}

TEST(Png, UndecodableFileNamesPath) {
  ScratchDir dir;
  const fs::path bad = dir.path() / "broken.png";
  std::ofstream(bad) << "not a png";
  try {
    read_png(bad, 3);
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("broken.png"), std::string::npos) << e.what();
  }
}

TEST(Dataset, EmptyDirectoryGivesNoSamples) {
  ScratchDir dir;
  EXPECT_TRUE(load_dataset(dir.path()).empty());
  EXPECT_THROW(load_dataset(dir.path() / "missing"), DataError);
}

TEST(Dataset, PairsLoadInSortedOrderAndRoundTrip) {
  ScratchDir dir;
  std::mt19937_64 rng(3);
  std::vector<Sample> saved;
  for (const char* id : {"zeta", "alpha", "m01"}) {
    Sample s{id, byte_grid_tensor({1, 3, 6, 9}, rng), byte_grid_tensor({1, 1, 6, 9}, rng)};
    save_sample(dir.path(), s);
    saved.push_back(s);
  }
  std::ofstream(dir.path() / "notes.txt") << "ignored";
  const auto loaded = load_dataset(dir.path());
  ASSERT_EQ(loaded.size(), 3u);
  EXPECT_EQ(loaded[0].id, "alpha");
  EXPECT_EQ(loaded[1].id, "m01");
  EXPECT_EQ(loaded[2].id, "zeta");
  for (const Sample& s : saved) {
    const auto it = std::find_if(loaded.begin(), loaded.end(), [&](const Sample& l) { return l.id == s.id; });
    EXPECT_EQ(to_bytes(it->image), to_bytes(s.image));
    EXPECT_EQ(to_bytes(it->alpha), to_bytes(s.alpha));
  }
}

TEST(Dataset, UnpairedFilesNameTheId) {
  ScratchDir dir;
  std::mt19937_64 rng(4);
  write_png(dir.path() / "lonely.png", byte_grid_tensor({1, 3, 4, 4}, rng));
  try {
    load_dataset(dir.path());
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("lonely"), std::string::npos) << e.what();
  }
  fs::remove(dir.path() / "lonely.png");
  write_png(dir.path() / "orphan_matte.png", byte_grid_tensor({1, 1, 4, 4}, rng));
  try {
    load_dataset(dir.path());
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("orphan"), std::string::npos) << e.what();
  }
}

TEST(Dataset, SizeMismatchIsRejected) {
  ScratchDir dir;
  std::mt19937_64 rng(5);
  write_png(dir.path() / "a.png", byte_grid_tensor({1, 3, 4, 4}, rng));
  write_png(dir.path() / "a_matte.png", byte_grid_tensor({1, 1, 4, 5}, rng));
  EXPECT_THROW(load_dataset(dir.path()), DataError);
}

TEST(Fixtures, NontrivialDeterministicAndRecomposable) {
  ScratchDir dir;
  const auto fixtures = synth_fixtures(5, 48, 64, 7);
  const auto again = synth_fixtures(5, 48, 64, 7);
  const auto other = synth_fixtures(5, 48, 64, 8);
  ASSERT_EQ(fixtures.size(), 5u);
  for (std::size_t i = 0; i < fixtures.size(); ++i) {
    const Fixture& f = fixtures[i];
    EXPECT_EQ(f.sample.image.shape(), (Shape{1, 3, 48, 64}));
    EXPECT_EQ(f.sample.alpha.shape(), (Shape{1, 1, 48, 64}));
    EXPECT_LT(tensor_min(f.sample.alpha), 0.1f);
    EXPECT_GT(tensor_max(f.sample.alpha), 0.9f);
    EXPECT_GE(tensor_min(f.sample.image), 0.0f);
    EXPECT_LE(tensor_max(f.sample.image), 1.0f);
    EXPECT_EQ(f.sample.image.values(), again[i].sample.image.values());
    EXPECT_EQ(f.sample.alpha.values(), again[i].sample.alpha.values());
    EXPECT_NE(f.sample.alpha.values(), other[i].sample.alpha.values());
    save_sample(dir.path(), f.sample);
  }
  // The stored 8-bit image must still be the composite of its layers.
  const auto stored = load_dataset(dir.path());
  ASSERT_EQ(stored.size(), fixtures.size());
  for (const Fixture& f : fixtures) {
    const auto it = std::find_if(stored.begin(), stored.end(), [&](const Sample& s) { return s.id == f.sample.id; });
    ASSERT_NE(it, stored.end());
    EXPECT_LE(max_abs_diff(composite(f.foreground, f.background, f.sample.alpha), it->image), 1.0f / 255);
  }
  const auto samples = synth_samples(5, 48, 64, 7);
  for (std::size_t i = 0; i < samples.size(); ++i) EXPECT_EQ(samples[i].image.values(), fixtures[i].sample.image.values());
}

TEST(Augment, ConfigValidation) {
  AugmentConfig c;
  EXPECT_NO_THROW(c.validate());
  c.scale_min = 0.9f;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = {};
  c.flip_prob = 1.5f;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = {};
  c.rotation_prob = -0.1f;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = {};
  c.target_size = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(Augment, DrawsRespectRanges) {
  AugmentConfig c;
  std::mt19937_64 rng(9);
  int flips = 0, rotations = 0;
  const int n = 4000;
  for (int i = 0; i < n; ++i) {
    const AugmentDraw d = draw_augment(c, rng);
    EXPECT_GE(d.scale, 1.0f);
    EXPECT_LE(d.scale, 1.15f);
    EXPECT_LE(std::abs(d.rotation_deg), 15.0f);
    const float slack = c.target_size * (d.scale - 1.0f);
    EXPECT_GE(d.offset_x, -slack);
    EXPECT_LE(d.offset_x, slack);
    EXPECT_GE(d.offset_y, -slack);
    EXPECT_LE(d.offset_y, slack);
    flips += d.flip;
    rotations += d.rotation_deg != 0.0f;
  }
  // Binomial(4000, 0.5) lies within 5 standard deviations of 2000.
  EXPECT_NEAR(flips, n / 2, 160);
  EXPECT_NEAR(rotations, n / 2, 160);
}

TEST(Augment, IdentityDrawIsResize) {
  const Sample s = synth_samples(1, 40, 56, 3)[0];
  AugmentConfig c;
  c.target_size = 32;
  const Sample out = apply_augment(s, c, AugmentDraw{});
  const Sample ref = resize_sample(s, 32, 32);
  EXPECT_LE(max_abs_diff(out.image, ref.image), 1e-6f);
  EXPECT_LE(max_abs_diff(out.alpha, ref.alpha), 1e-6f);
}

TEST(Augment, FlipIsAnInvolution) {
  const Sample s = synth_samples(1, 32, 32, 4)[0];
  AugmentConfig c;
  c.target_size = 32;
  AugmentDraw flip;
  flip.flip = true;
  const Sample once = apply_augment(s, c, flip);
  EXPECT_NE(once.image.values(), s.image.values());
  EXPECT_EQ(once.alpha.at(0, 0, 5, 0), s.alpha.at(0, 0, 5, 31));
  const Sample twice = apply_augment(once, c, flip);
  EXPECT_EQ(twice.image.values(), s.image.values());
  EXPECT_EQ(twice.alpha.values(), s.alpha.values());
}

TEST(Augment, SeededStreamsAreReproducible) {
  const Sample s = synth_samples(1, 40, 40, 5)[0];
  AugmentConfig c;
  c.target_size = 32;
  for (std::uint64_t index = 0; index < 4; ++index) {
    auto r1 = sample_rng(17, index);
    auto r2 = sample_rng(17, index);
    const Sample a = augment(s, c, r1);
    const Sample b = augment(s, c, r2);
    EXPECT_EQ(to_bytes(a.image), to_bytes(b.image));
    EXPECT_EQ(to_bytes(a.alpha), to_bytes(b.alpha));
  }
  auto r0 = sample_rng(17, 0);
  auto r1 = sample_rng(17, 1);
  EXPECT_NE(r0(), r1());
}

TEST(Augment, AlphaStaysInUnitRange) {
  std::mt19937_64 rng(6);
  AugmentConfig c;
  c.target_size = 24;
  c.rotation_prob = 1.0f;
  for (int i = 0; i < 50; ++i) {
    Sample s{"r", random_tensor({1, 3, 30, 20}, rng, 0.0f, 1.0f), random_tensor({1, 1, 30, 20}, rng, 0.0f, 1.0f)};
    if (i % 2) s.alpha.fill(1.0f);
    const Sample out = augment(s, c, rng);
    EXPECT_EQ(out.alpha.shape(), (Shape{1, 1, 24, 24}));
    EXPECT_GE(tensor_min(out.alpha), 0.0f);
    EXPECT_LE(tensor_max(out.alpha), 1.0f);
  }
}

TEST(Augment, ImageAndAlphaStayRegistered) {
  AugmentConfig c;
  c.target_size = 64;
  c.rotation_prob = 1.0f;
  std::mt19937_64 rng(10);
  for (const Fixture& f : synth_fixtures(6, 80, 72, 21)) {
    Sample s = f.sample;
    s.alpha = slice_channels(s.image, 0, 1);
    for (int k = 0; k < 4; ++k) {
      const AugmentDraw d = draw_augment(c, rng);
      Tensor in_frame;
      const Sample out = apply_augment(s, c, d, &in_frame);
      const Tensor red = slice_channels(out.image, 0, 1);
      float worst = 0.0f;
      int inside = 0;
      for (std::size_t i = 0; i < red.size(); ++i) {
        if (in_frame.data()[i] == 0.0f) continue;
        ++inside;
        worst = std::max(worst, std::abs(red.data()[i] - out.alpha.data()[i]));
      }
      EXPECT_GT(inside, static_cast<int>(red.size()) / 2);
      EXPECT_LE(worst, 2.0f / 255) << "scale " << d.scale << " rot " << d.rotation_deg;
    }
  }
}

}  // namespace
}  // namespace mmnet
