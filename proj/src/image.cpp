#include "nbx/image.hpp"

#include <algorithm>
#include <cmath>

#include "nbx/error.hpp"

namespace nbx {

std::string to_string(const Shape& shape) {
  return std::to_string(shape.height) + "x" + std::to_string(shape.width) + "x" +
         std::to_string(shape.channels);
}

Image::Image(Shape shape) : shape_(shape), data_(shape.size(), 0.0) {}

Image::Image(Shape shape, std::vector<double> data) : shape_(shape), data_(std::move(data)) {
  if (shape.height < 0 || shape.width < 0 || shape.channels < 0) {
    throw ShapeError("negative image dimension in " + to_string(shape));
  }
  if (data_.size() != shape_.size()) {
    throw ShapeError("image data has " + std::to_string(data_.size()) +
                     " values but shape " + to_string(shape_) + " needs " +
                     std::to_string(shape_.size()));
  }
}

void require_same_shape(const Image& a, const Image& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(what) + ": shape " + to_string(a.shape()) +
                     " does not match " + to_string(b.shape()));
  }
}

Image project_linf(const Image& x, const BoxConstraint& box) {
  require_same_shape(x, box.center, "project_linf");
  if (!(box.radius >= 0.0)) throw ConfigError("project_linf: negative radius");
  Image out = x;
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double c = box.center[i];
    out[i] = std::clamp(x[i], c - box.radius, c + box.radius);
  }
  return out;
}

Image clip_valid(const Image& x) {
  Image out = x;
  for (double& v : out.data()) v = std::clamp(v, 0.0, 1.0);
  return out;
}

double linf_dist(const Image& a, const Image& b) {
  require_same_shape(a, b, "linf_dist");
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  return worst;
}

Image project_feasible(const Image& x, const BoxConstraint& box) {
  return clip_valid(project_linf(x, box));
}

Image add_scaled(const Image& x, std::span<const double> direction, double scale) {
  if (direction.size() != x.size()) {
    throw ShapeError("add_scaled: direction has " + std::to_string(direction.size()) +
                     " components, image has " + std::to_string(x.size()));
  }
  Image out = x;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += scale * direction[i];
  return out;
}

}  // namespace nbx
