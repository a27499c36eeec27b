#include "mmnet/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>

namespace mmnet {

void Shape::validate() const {
  if (n < 1 || c < 1 || h < 1 || w < 1) {
    throw ShapeError("invalid shape " + str() + ": extents must be >= 1");
  }
  std::size_t total = 1;
  for (int e : {n, c, h, w}) {
    const auto extent = static_cast<std::size_t>(e);
    if (total > std::numeric_limits<std::size_t>::max() / sizeof(float) / extent) {
      throw AllocationError("element count of shape " + str() + " overflows");
    }
    total *= extent;
  }
}

std::size_t Shape::count() const {
  return static_cast<std::size_t>(n) * static_cast<std::size_t>(c) * static_cast<std::size_t>(h) *
         static_cast<std::size_t>(w);
}

std::string Shape::str() const {
  return "(" + std::to_string(n) + "," + std::to_string(c) + "," + std::to_string(h) + "," +
         std::to_string(w) + ")";
}

Tensor::Tensor(Shape shape, float fill) : shape_(shape) {
  shape_.validate();
  data_.assign(shape_.count(), fill);
}

Tensor::Tensor(Shape shape, std::vector<float> values) : shape_(shape), data_(std::move(values)) {
  shape_.validate();
  if (data_.size() != shape_.count()) {
    throw ShapeError("buffer of " + std::to_string(data_.size()) + " values does not match shape " +
                     shape_.str());
  }
}

void Tensor::fill(float v) { std::fill(data_.begin(), data_.end(), v); }

Tensor alloc(const Shape& shape, float fill) { return Tensor(shape, fill); }

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  if (a.n() != b.n() || a.h() != b.h() || a.w() != b.w()) {
    throw ShapeError("concat_channels: " + a.shape().str() + " and " + b.shape().str() +
                     " disagree on batch or spatial extent");
  }
  Tensor out({a.n(), a.c() + b.c(), a.h(), a.w()});
  const std::size_t pa = a.shape().plane() * a.c();
  const std::size_t pb = b.shape().plane() * b.c();
  for (int n = 0; n < a.n(); ++n) {
    float* dst = out.plane(n, 0);
    std::memcpy(dst, a.plane(n, 0), pa * sizeof(float));
    std::memcpy(dst + pa, b.plane(n, 0), pb * sizeof(float));
  }
  return out;
}

Tensor slice_channels(const Tensor& x, int begin, int count) {
  if (begin < 0 || count < 1 || begin + count > x.c()) {
    throw ShapeError("slice_channels: range [" + std::to_string(begin) + ", " +
                     std::to_string(begin + count) + ") outside " + x.shape().str());
  }
  Tensor out({x.n(), count, x.h(), x.w()});
  const std::size_t bytes = x.shape().plane() * count * sizeof(float);
  for (int n = 0; n < x.n(); ++n) {
    std::memcpy(out.plane(n, 0), x.plane(n, begin), bytes);
  }
  return out;
}

Tensor pad_zero(const Tensor& x, int top, int bottom, int left, int right) {
  if (top < 0 || bottom < 0 || left < 0 || right < 0) {
    throw ShapeError("pad_zero: negative padding");
  }
  Tensor out({x.n(), x.c(), x.h() + top + bottom, x.w() + left + right});
  for (int n = 0; n < x.n(); ++n) {
    for (int c = 0; c < x.c(); ++c) {
      const float* src = x.plane(n, c);
      float* dst = out.plane(n, c);
      for (int y = 0; y < x.h(); ++y) {
        std::memcpy(dst + static_cast<std::size_t>(y + top) * out.w() + left,
                    src + static_cast<std::size_t>(y) * x.w(), x.w() * sizeof(float));
      }
    }
  }
  return out;
}

Tensor stack_batch(std::span<const Tensor> items) {
  if (items.empty()) throw ShapeError("stack_batch: no tensors");
  const Shape first = items.front().shape();
  int total = 0;
  for (const auto& t : items) {
    const Shape s = t.shape();
    if (s.c != first.c || s.h != first.h || s.w != first.w) {
      throw ShapeError("stack_batch: " + s.str() + " does not match " + first.str());
    }
    total += s.n;
  }
  Tensor out({total, first.c, first.h, first.w});
  float* dst = out.data().data();
  for (const auto& t : items) {
    std::memcpy(dst, t.data().data(), t.size() * sizeof(float));
    dst += t.size();
  }
  return out;
}

Tensor batch_item(const Tensor& x, int n) {
  if (n < 0 || n >= x.n()) throw ShapeError("batch_item: index out of range");
  Tensor out({1, x.c(), x.h(), x.w()});
  std::memcpy(out.data().data(), x.plane(n, 0), out.size() * sizeof(float));
  return out;
}

bool all_finite(const Tensor& x) {
  return std::all_of(x.data().begin(), x.data().end(), [](float v) { return std::isfinite(v); });
}

float max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("max_abs_diff: " + a.shape().str() + " vs " + b.shape().str());
  }
  float m = 0.0f;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  return m;
}

}  // namespace mmnet
