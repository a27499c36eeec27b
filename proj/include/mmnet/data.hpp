#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "mmnet/tensor.hpp"

namespace mmnet {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// image: (1, 3, h, w) in [0, 1]; alpha: (1, 1, h, w) in [0, 1].
struct Sample {
  std::string id;
  Tensor image;
  Tensor alpha;
};

/// Reads an 8-bit PNG as (1, channels, h, w) scaled to [0, 1]; channels is 1 or 3.
Tensor read_png(const std::filesystem::path& path, int channels);
/// Writes a (1, 1|3, h, w) tensor as 8-bit gray or RGB; values are clamped to [0, 1].
void write_png(const std::filesystem::path& path, const Tensor& image);
std::vector<std::uint8_t> to_bytes(const Tensor& image);

/// I = alpha * fg + (1 - alpha) * bg, per channel.
Tensor composite(const Tensor& fg, const Tensor& bg, const Tensor& alpha);

struct AugmentConfig {
  int target_size = 256;
  float scale_min = 1.0f;
  float scale_max = 1.15f;
  float rotation_prob = 0.5f;
  float max_rotation_deg = 15.0f;
  float flip_prob = 0.5f;

  void validate() const;
};

/// One concrete draw of the random augmentation parameters.
struct AugmentDraw {
  float scale = 1.0f;
  float rotation_deg = 0.0f;
  /// Crop origin inside the scaled frame, in target pixels.
  float offset_x = 0.0f;
  float offset_y = 0.0f;
  bool flip = false;
};

AugmentDraw draw_augment(const AugmentConfig& cfg, std::mt19937_64& rng);

/// Resize to target -> scale -> rotate about the centre -> crop -> horizontal flip,
/// evaluated as one inverse coordinate map with bilinear sampling. Out-of-frame
/// image samples replicate the border; out-of-frame alpha is 0. If `in_frame`
/// is given it receives a (1, 1, T, T) mask of pixels whose source lies inside
/// the frame.
Sample apply_augment(const Sample& s, const AugmentConfig& cfg, const AugmentDraw& draw, Tensor* in_frame = nullptr);
Sample augment(const Sample& s, const AugmentConfig& cfg, std::mt19937_64& rng);

/// Bilinear resize of both image and alpha.
Sample resize_sample(const Sample& s, int height, int width);

/// Independent generator stream for sample `index` under `seed`.
std::mt19937_64 sample_rng(std::uint64_t seed, std::uint64_t index);

/// Pairs `<id>.png` with `<id>_matte.png`, sorted by id. Other files are ignored.
std::vector<Sample> load_dataset(const std::filesystem::path& dir);
void save_sample(const std::filesystem::path& dir, const Sample& s);

struct Fixture {
  Sample sample;
  Tensor foreground;
  Tensor background;
};

/// Soft-edged ellipse mattes composited over textured backgrounds.
std::vector<Fixture> synth_fixtures(int count, int height, int width, std::uint64_t seed);
std::vector<Sample> synth_samples(int count, int height, int width, std::uint64_t seed);

}  // namespace mmnet
