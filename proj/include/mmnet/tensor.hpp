#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace mmnet {

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class AllocationError : public std::length_error {
 public:
  using std::length_error::length_error;
};

/// Extents of a dense (batch, channel, height, width) array.
struct Shape {
  int n = 0;
  int c = 0;
  int h = 0;
  int w = 0;

  /// Throws ShapeError on a non-positive extent and AllocationError when
  /// n*c*h*w does not fit in size_t.
  void validate() const;
  std::size_t count() const;
  std::size_t plane() const { return static_cast<std::size_t>(h) * static_cast<std::size_t>(w); }
  std::string str() const;

  friend bool operator==(const Shape&, const Shape&) = default;
};

/// Contiguous f32 buffer in n, c, h, w order.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, float fill = 0.0f);
  Tensor(Shape shape, std::vector<float> values);

  const Shape& shape() const { return shape_; }
  int n() const { return shape_.n; }
  int c() const { return shape_.c; }
  int h() const { return shape_.h; }
  int w() const { return shape_.w; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<float> data() { return data_; }
  std::span<const float> data() const { return data_; }
  const std::vector<float>& values() const { return data_; }

  std::size_t index(int n, int c, int y, int x) const {
    return ((static_cast<std::size_t>(n) * shape_.c + c) * shape_.h + y) * shape_.w + x;
  }
  float& at(int n, int c, int y, int x) { return data_[index(n, c, y, x)]; }
  float at(int n, int c, int y, int x) const { return data_[index(n, c, y, x)]; }

  float* plane(int n, int c) { return data_.data() + index(n, c, 0, 0); }
  const float* plane(int n, int c) const { return data_.data() + index(n, c, 0, 0); }

  void fill(float v);

 private:
  Shape shape_;
  std::vector<float> data_;
};

Tensor alloc(const Shape& shape, float fill);

/// Channels of `a` followed by channels of `b`; batch and spatial extents must agree.
Tensor concat_channels(const Tensor& a, const Tensor& b);
Tensor slice_channels(const Tensor& x, int begin, int count);

Tensor pad_zero(const Tensor& x, int top, int bottom, int left, int right);

/// Stack single-item tensors along the batch axis.
Tensor stack_batch(std::span<const Tensor> items);
Tensor batch_item(const Tensor& x, int n);

bool all_finite(const Tensor& x);
float max_abs_diff(const Tensor& a, const Tensor& b);

}  // namespace mmnet
