#include "nbx/transforms.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>

#include "nbx/error.hpp"

namespace nbx {

void EotConfig::validate() const {
  if (!(theta_min <= theta_max)) throw ConfigError("eot: theta_min must be <= theta_max");
  if (m_samples < 1) throw ConfigError("eot: m_samples must be >= 1");
  if (vote_samples < 1) throw ConfigError("eot: vote_samples must be >= 1");
  if (!(vote_threshold > 0.0 && vote_threshold <= 1.0)) {
    throw ConfigError("eot: vote_threshold must be in (0, 1]");
  }
}

namespace {

void exact_sincos(double degrees, double& s, double& c) {
  const double turns = degrees / 90.0;
  if (turns == std::floor(turns) && std::abs(turns) < 1e15) {
    static constexpr double kSin[4] = {0.0, 1.0, 0.0, -1.0};
    static constexpr double kCos[4] = {1.0, 0.0, -1.0, 0.0};
    const auto q = static_cast<int>(((static_cast<long long>(turns) % 4) + 4) % 4);
    s = kSin[q];
    c = kCos[q];
    return;
  }
  const double rad = degrees * std::numbers::pi / 180.0;
  s = std::sin(rad);
  c = std::cos(rad);
}

}  // namespace

Image rotate(const Image& x, double degrees) {
  const Shape& shape = x.shape();
  double s = 0.0, c = 1.0;
  exact_sincos(degrees, s, c);
  const double cx = (shape.width - 1) / 2.0;
  const double cy = (shape.height - 1) / 2.0;
  Image out(shape);

  auto sample = [&](int row, int col, int ch) -> double {
    if (row < 0 || row >= shape.height || col < 0 || col >= shape.width) return 0.0;
    return x.at(row, col, ch);
  };

  for (int r = 0; r < shape.height; ++r) {
    for (int col = 0; col < shape.width; ++col) {
      // Row index grows downward, so a visually counterclockwise turn maps the
      // output offset (dx, dy) back to (c dx - s dy, s dx + c dy) in the source.
      const double dx = col - cx;
      const double dy = r - cy;
      const double sx = c * dx - s * dy + cx;
      const double sy = s * dx + c * dy + cy;
      const double fx = std::floor(sx);
      const double fy = std::floor(sy);
      const double ax = sx - fx;
      const double ay = sy - fy;
      const int x0 = static_cast<int>(fx);
      const int y0 = static_cast<int>(fy);
      for (int ch = 0; ch < shape.channels; ++ch) {
        double v = sample(y0, x0, ch) * (1.0 - ax) * (1.0 - ay);
        if (ax != 0.0) v += sample(y0, x0 + 1, ch) * ax * (1.0 - ay);
        if (ay != 0.0) v += sample(y0 + 1, x0, ch) * (1.0 - ax) * ay;
        if (ax != 0.0 && ay != 0.0) v += sample(y0 + 1, x0 + 1, ch) * ax * ay;
        out.at(r, col, ch) = std::clamp(v, 0.0, 1.0);
      }
    }
  }
  return out;
}

double sample_theta(const EotConfig& cfg, Rng& rng) {
  return rng.uniform(cfg.theta_min, cfg.theta_max);
}

double AngleSource::next() {
  if (!cfg_.fixed_angles.empty()) {
    const double a = cfg_.fixed_angles[cursor_ % cfg_.fixed_angles.size()];
    ++cursor_;
    return a;
  }
  return sample_theta(cfg_, rng_);
}

double safe_log(double p) { return std::log(std::max(p, std::numeric_limits<double>::min())); }

double eot_loss(Oracle& oracle, const Image& x, int label, std::span<const double> angles) {
  if (angles.empty()) throw ConfigError("eot_loss: empty angle set");
  double sum = 0.0;
  for (double theta : angles) {
    const auto out = oracle.classify(rotate(x, theta));
    const auto& probs = out.as_full().probs;
    if (label < 0 || static_cast<std::size_t>(label) >= probs.size()) {
      throw ConfigError("eot_loss: label " + std::to_string(label) + " out of range");
    }
    sum += safe_log(probs[static_cast<std::size_t>(label)]);
  }
  return sum / static_cast<double>(angles.size());
}

double eot_loss(Oracle& oracle, const Image& x, int label, const EotConfig& cfg,
                AngleSource& angles) {
  cfg.validate();
  std::vector<double> thetas(static_cast<std::size_t>(cfg.m_samples));
  for (double& t : thetas) t = angles.next();
  return eot_loss(oracle, x, label, thetas);
}

double eot_loss(Oracle& oracle, const Image& x, int label, const EotConfig& cfg, Rng& rng) {
  AngleSource angles(cfg, rng);
  return eot_loss(oracle, x, label, cfg, angles);
}

}  // namespace nbx
