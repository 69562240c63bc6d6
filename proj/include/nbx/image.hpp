#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace nbx {

struct Shape {
  int height = 0;
  int width = 0;
  int channels = 0;

  std::size_t size() const noexcept {
    return static_cast<std::size_t>(height) * static_cast<std::size_t>(width) *
           static_cast<std::size_t>(channels);
  }
  friend bool operator==(const Shape&, const Shape&) = default;
};

std::string to_string(const Shape& shape);

/// Row-major (h, w, c) pixel buffer. Values are continuous reals, nominally in [0, 1].
class Image {
 public:
  Image() = default;
  /// Zero-filled image of the given shape.
  explicit Image(Shape shape);
  /// Throws ShapeError if data.size() != shape.size().
  Image(Shape shape, std::vector<double> data);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t size() const noexcept { return data_.size(); }

  std::span<const double> data() const noexcept { return data_; }
  std::span<double> data() noexcept { return data_; }

  double& operator[](std::size_t i) noexcept { return data_[i]; }
  double operator[](std::size_t i) const noexcept { return data_[i]; }

  double& at(int row, int col, int channel) noexcept {
    return data_[index(row, col, channel)];
  }
  double at(int row, int col, int channel) const noexcept {
    return data_[index(row, col, channel)];
  }

  friend bool operator==(const Image&, const Image&) = default;

 private:
  std::size_t index(int row, int col, int channel) const noexcept {
    return (static_cast<std::size_t>(row) * shape_.width + col) * shape_.channels + channel;
  }

  Shape shape_;
  std::vector<double> data_;
};

/// The l-infinity ball of `radius` around `center`.
struct BoxConstraint {
  Image center;
  double radius = 0.0;
};

/// Componentwise clamp of x into [center - radius, center + radius].
Image project_linf(const Image& x, const BoxConstraint& box);

/// Componentwise clamp into [0, 1].
Image clip_valid(const Image& x);

/// Max componentwise absolute difference.
double linf_dist(const Image& a, const Image& b);

/// Box projection followed by the valid-range clip. This is the exact projection
/// onto the intersection of the two boxes.
Image project_feasible(const Image& x, const BoxConstraint& box);

/// x + scale * direction, elementwise.
Image add_scaled(const Image& x, std::span<const double> direction, double scale);

void require_same_shape(const Image& a, const Image& b, const char* what);

}  // namespace nbx
