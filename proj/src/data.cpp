#include "mmnet/data.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numbers>

#include "mmnet/nn_ops.hpp"

namespace mmnet {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// PNG

Tensor read_png(const fs::path& path, int channels) {
  if (channels != 1 && channels != 3) throw std::invalid_argument("read_png: channels must be 1 or 3");
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.string().c_str())) {
    throw DataError(path.string() + ": cannot decode PNG (" + img.message + ")");
  }
  img.format = channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  std::vector<std::uint8_t> buf(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, buf.data(), 0, nullptr)) {
    const std::string msg = img.message;
    png_image_free(&img);
    throw DataError(path.string() + ": cannot decode PNG (" + msg + ")");
  }
  const int h = static_cast<int>(img.height);
  const int w = static_cast<int>(img.width);
  Tensor out({1, channels, h, w});
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int c = 0; c < channels; ++c) {
        out.at(0, c, y, x) = buf[(static_cast<std::size_t>(y) * w + x) * channels + c] / 255.0f;
      }
    }
  }
  return out;
}

std::vector<std::uint8_t> to_bytes(const Tensor& image) {
  const int channels = image.c();
  const int h = image.h();
  const int w = image.w();
  std::vector<std::uint8_t> buf(static_cast<std::size_t>(h) * w * channels);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int c = 0; c < channels; ++c) {
        const float v = std::clamp(image.at(0, c, y, x), 0.0f, 1.0f);
        buf[(static_cast<std::size_t>(y) * w + x) * channels + c] = static_cast<std::uint8_t>(std::lround(v * 255.0f));
      }
    }
  }
  return buf;
}

void write_png(const fs::path& path, const Tensor& image) {
  if (image.n() != 1 || (image.c() != 1 && image.c() != 3)) {
    throw ShapeError("write_png: expected (1, 1|3, h, w), got " + image.shape().str());
  }
  const std::vector<std::uint8_t> buf = to_bytes(image);
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(image.w());
  img.height = static_cast<png_uint_32>(image.h());
  img.format = image.c() == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  if (!png_image_write_to_file(&img, path.string().c_str(), 0, buf.data(), 0, nullptr)) {
    throw DataError(path.string() + ": cannot write PNG (" + img.message + ")");
  }
}

// ---------------------------------------------------------------------------
// Compositing

Tensor composite(const Tensor& fg, const Tensor& bg, const Tensor& alpha) {
  if (fg.shape() != bg.shape() || alpha.c() != 1 || alpha.n() != fg.n() || alpha.h() != fg.h() ||
      alpha.w() != fg.w()) {
    throw ShapeError("composite: fg " + fg.shape().str() + ", bg " + bg.shape().str() + ", alpha " +
                     alpha.shape().str());
  }
  Tensor out(fg.shape());
  const std::size_t plane = fg.shape().plane();
  for (int n = 0; n < fg.n(); ++n) {
    const float* a = alpha.plane(n, 0);
    for (int c = 0; c < fg.c(); ++c) {
      const float* f = fg.plane(n, c);
      const float* b = bg.plane(n, c);
      float* o = out.plane(n, c);
      for (std::size_t i = 0; i < plane; ++i) o[i] = a[i] * f[i] + (1.0f - a[i]) * b[i];
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Augmentation

void AugmentConfig::validate() const {
  if (target_size <= 0) throw std::invalid_argument("augment: target_size must be positive");
  if (!(scale_min >= 1.0f) || !(scale_max >= scale_min)) {
    throw std::invalid_argument("augment: scale range must satisfy 1 <= scale_min <= scale_max");
  }
  const auto prob = [](float p) { return p >= 0.0f && p <= 1.0f; };
  if (!prob(rotation_prob) || !prob(flip_prob)) throw std::invalid_argument("augment: probabilities must lie in [0, 1]");
  if (!(max_rotation_deg >= 0.0f)) throw std::invalid_argument("augment: max_rotation_deg must be >= 0");
}

AugmentDraw draw_augment(const AugmentConfig& cfg, std::mt19937_64& rng) {
  cfg.validate();
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  AugmentDraw d;
  d.scale = static_cast<float>(cfg.scale_min + (cfg.scale_max - cfg.scale_min) * unit(rng));
  if (unit(rng) < cfg.rotation_prob) {
    d.rotation_deg = static_cast<float>((2.0 * unit(rng) - 1.0) * cfg.max_rotation_deg);
  }
  const double slack = (static_cast<double>(d.scale) - 1.0) * cfg.target_size;
  d.offset_x = static_cast<float>(slack * unit(rng));
  d.offset_y = static_cast<float>(slack * unit(rng));
  d.flip = unit(rng) < cfg.flip_prob;
  return d;
}

namespace {

float sample_clamped(const float* plane, int h, int w, double y, double x) {
  y = std::clamp(y, 0.0, static_cast<double>(h - 1));
  x = std::clamp(x, 0.0, static_cast<double>(w - 1));
  const int y0 = static_cast<int>(y);
  const int x0 = static_cast<int>(x);
  const int y1 = std::min(y0 + 1, h - 1);
  const int x1 = std::min(x0 + 1, w - 1);
  const float fy = static_cast<float>(y - y0);
  const float fx = static_cast<float>(x - x0);
  const float* r0 = plane + static_cast<std::size_t>(y0) * w;
  const float* r1 = plane + static_cast<std::size_t>(y1) * w;
  const float top = r0[x0] + (r0[x1] - r0[x0]) * fx;
  const float bottom = r1[x0] + (r1[x1] - r1[x0]) * fx;
  return top + (bottom - top) * fy;
}

}  // namespace

Sample apply_augment(const Sample& s, const AugmentConfig& cfg, const AugmentDraw& draw, Tensor* in_frame) {
  cfg.validate();
  const int t = cfg.target_size;
  const Sample r = resize_sample(s, t, t);
  Sample out;
  out.id = s.id;
  out.image = Tensor({1, r.image.c(), t, t});
  out.alpha = Tensor({1, 1, t, t});
  if (in_frame) *in_frame = Tensor({1, 1, t, t});

  const double scale = draw.scale;
  const double centre = 0.5 * scale * t;
  const double theta = draw.rotation_deg * std::numbers::pi / 180.0;
  const double cs = std::cos(theta);
  const double sn = std::sin(theta);
  for (int oy = 0; oy < t; ++oy) {
    for (int ox = 0; ox < t; ++ox) {
      const int fx = draw.flip ? t - 1 - ox : ox;
      // Position in the scaled and rotated frame.
      const double px = fx + 0.5 + draw.offset_x - centre;
      const double py = oy + 0.5 + draw.offset_y - centre;
      // Undo the rotation, then the scaling; result is in resized-image pixel units.
      const double qx = (cs * px + sn * py + centre) / scale - 0.5;
      const double qy = (-sn * px + cs * py + centre) / scale - 0.5;
      const bool inside = qx >= -0.5 && qx <= t - 0.5 && qy >= -0.5 && qy <= t - 0.5;
      for (int c = 0; c < r.image.c(); ++c) {
        out.image.at(0, c, oy, ox) = sample_clamped(r.image.plane(0, c), t, t, qy, qx);
      }
      const float a = inside ? sample_clamped(r.alpha.plane(0, 0), t, t, qy, qx) : 0.0f;
      out.alpha.at(0, 0, oy, ox) = std::clamp(a, 0.0f, 1.0f);
      if (in_frame) in_frame->at(0, 0, oy, ox) = inside ? 1.0f : 0.0f;
    }
  }
  return out;
}

Sample augment(const Sample& s, const AugmentConfig& cfg, std::mt19937_64& rng) {
  return apply_augment(s, cfg, draw_augment(cfg, rng));
}

Sample resize_sample(const Sample& s, int height, int width) {
  Sample out;
  out.id = s.id;
  if (s.image.h() == height && s.image.w() == width) {
    out.image = s.image;
    out.alpha = s.alpha;
    return out;
  }
  out.image = bilinear_resize(s.image, height, width, false);
  out.alpha = bilinear_resize(s.alpha, height, width, false);
  return out;
}

std::mt19937_64 sample_rng(std::uint64_t seed, std::uint64_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32)};
  return std::mt19937_64(seq);
}

// ---------------------------------------------------------------------------
// Dataset directories

std::vector<Sample> load_dataset(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw DataError(dir.string() + ": not a directory");
  std::map<std::string, fs::path> images;
  std::map<std::string, fs::path> mattes;
  const std::string suffix = "_matte";
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (!entry.is_regular_file() || entry.path().extension() != ".png") continue;
    const std::string stem = entry.path().stem().string();
    if (stem.size() > suffix.size() && stem.ends_with(suffix)) {
      mattes[stem.substr(0, stem.size() - suffix.size())] = entry.path();
    } else {
      images[stem] = entry.path();
    }
  }
  for (const auto& [id, path] : mattes) {
    if (!images.count(id)) throw DataError("dataset: matte for '" + id + "' has no image (" + path.string() + ")");
  }
  std::vector<Sample> samples;
  for (const auto& [id, path] : images) {
    const auto m = mattes.find(id);
    if (m == mattes.end()) throw DataError("dataset: image '" + id + "' has no matte (expected " + id + "_matte.png)");
    Sample s;
    s.id = id;
    s.image = read_png(path, 3);
    s.alpha = read_png(m->second, 1);
    if (s.image.h() != s.alpha.h() || s.image.w() != s.alpha.w()) {
      throw DataError("dataset: '" + id + "' image " + s.image.shape().str() + " and matte " + s.alpha.shape().str() +
                      " differ in size");
    }
    samples.push_back(std::move(s));
  }
  return samples;
}

void save_sample(const fs::path& dir, const Sample& s) {
  fs::create_directories(dir);
  write_png(dir / (s.id + ".png"), s.image);
  write_png(dir / (s.id + "_matte.png"), s.alpha);
}

// ---------------------------------------------------------------------------
// Synthetic fixtures

namespace {

struct Wave {
  double fx, fy, phase, amp;
};

Tensor texture(int h, int w, std::mt19937_64& rng, double base_lo, double base_hi, double freq, double amp) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Tensor out({1, 3, h, w});
  for (int c = 0; c < 3; ++c) {
    const double base = base_lo + (base_hi - base_lo) * u(rng);
    std::vector<Wave> waves(3);
    for (Wave& wv : waves) {
      const double angle = 2.0 * std::numbers::pi * u(rng);
      const double f = freq * (0.5 + u(rng)) * 2.0 * std::numbers::pi;
      wv = {f * std::cos(angle), f * std::sin(angle), 2.0 * std::numbers::pi * u(rng), amp * (0.5 + 0.5 * u(rng))};
    }
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const double nx = static_cast<double>(x) / w;
        const double ny = static_cast<double>(y) / h;
        double v = base;
        for (const Wave& wv : waves) v += wv.amp * std::sin(wv.fx * nx + wv.fy * ny + wv.phase);
        out.at(0, c, y, x) = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  }
  return out;
}

struct Ellipse {
  double cx, cy, rx, ry, edge;
};

double ellipse_alpha(const Ellipse& e, double x, double y) {
  const double dx = (x - e.cx) / e.rx;
  const double dy = (y - e.cy) / e.ry;
  const double signed_dist = (1.0 - std::sqrt(dx * dx + dy * dy)) * std::min(e.rx, e.ry);
  const double t = std::clamp(0.5 + signed_dist / e.edge, 0.0, 1.0);
  return t * t * (3.0 - 2.0 * t);
}

}  // namespace

std::vector<Fixture> synth_fixtures(int count, int height, int width, std::uint64_t seed) {
  if (count < 0 || height < 8 || width < 8) throw std::invalid_argument("synth_fixtures: need count >= 0, size >= 8");
  std::vector<Fixture> out;
  out.reserve(count);
  for (int i = 0; i < count; ++i) {
    std::mt19937_64 rng = sample_rng(seed, static_cast<std::uint64_t>(i));
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const double dim = std::min(height, width);
    std::vector<Ellipse> blobs;
    const double edge = std::max(1.5, (0.02 + 0.04 * u(rng)) * dim);
    blobs.push_back({(0.35 + 0.3 * u(rng)) * width, (0.35 + 0.3 * u(rng)) * height, (0.18 + 0.12 * u(rng)) * dim,
                     (0.18 + 0.12 * u(rng)) * dim, edge});
    const int extra = static_cast<int>(u(rng) * 3.0);
    for (int k = 0; k < extra; ++k) {
      blobs.push_back({(0.2 + 0.6 * u(rng)) * width, (0.2 + 0.6 * u(rng)) * height, (0.06 + 0.06 * u(rng)) * dim,
                       (0.06 + 0.06 * u(rng)) * dim, edge});
    }
    Tensor alpha({1, 1, height, width});
    for (int y = 0; y < height; ++y) {
      for (int x = 0; x < width; ++x) {
        double a = 0.0;
        for (const Ellipse& e : blobs) a = std::max(a, ellipse_alpha(e, x + 0.5, y + 0.5));
        alpha.at(0, 0, y, x) = static_cast<float>(a);
      }
    }
    Fixture f;
    f.foreground = texture(height, width, rng, 0.55, 0.9, 1.0, 0.08);
    f.background = texture(height, width, rng, 0.1, 0.5, 6.0, 0.2);
    char id[32];
    std::snprintf(id, sizeof id, "fixture_%04d", i);
    f.sample.id = id;
    f.sample.image = composite(f.foreground, f.background, alpha);
    f.sample.alpha = std::move(alpha);
    out.push_back(std::move(f));
  }
  return out;
}

std::vector<Sample> synth_samples(int count, int height, int width, std::uint64_t seed) {
  std::vector<Sample> out;
  for (Fixture& f : synth_fixtures(count, height, width, seed)) out.push_back(std::move(f.sample));
  return out;
}

}  // namespace mmnet
