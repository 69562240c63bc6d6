#pragma once

#include <span>
#include <vector>

#include "nbx/image.hpp"
#include "nbx/oracle.hpp"
#include "nbx/rng.hpp"

namespace nbx {

/// Rotation distribution for expectation-over-transformation losses.
struct EotConfig {
  double theta_min = -30.0;  // degrees
  double theta_max = 30.0;
  int m_samples = 10;        // rotations averaged per loss evaluation
  int vote_samples = 100;    // rotations drawn for the success vote
  double vote_threshold = 0.9;
  /// If non-empty, angles are taken cyclically from this pool instead of being drawn.
  std::vector<double> fixed_angles;

  void validate() const;
};

/// Rotates counterclockwise by `degrees` about the continuous centre
/// ((w-1)/2, (h-1)/2). Each output pixel inverse-maps to a source location that is
/// bilinearly interpolated; source pixels outside the image read as 0. Output is
/// clipped to [0, 1]. Multiples of 90 degrees use exact sine and cosine.
Image rotate(const Image& x, double degrees);

/// Uniform draw on [theta_min, theta_max].
double sample_theta(const EotConfig& cfg, Rng& rng);

/// Stream of rotation angles: fresh uniform draws, or the fixed pool in order
/// (wrapping around) when cfg.fixed_angles is set.
class AngleSource {
 public:
  AngleSource(const EotConfig& cfg, Rng& rng) : cfg_(cfg), rng_(rng) {}
  double next();

 private:
  const EotConfig& cfg_;
  Rng& rng_;
  std::size_t cursor_ = 0;
};

/// (1/m) sum_j log P(y | rotate(x, theta_j)). Charges exactly m queries to `oracle`.
/// Probabilities are floored at the smallest normal double before the log.
double eot_loss(Oracle& oracle, const Image& x, int label, const EotConfig& cfg,
                AngleSource& angles);
/// Same objective over an explicit angle set; charges angles.size() queries.
double eot_loss(Oracle& oracle, const Image& x, int label, std::span<const double> angles);
double eot_loss(Oracle& oracle, const Image& x, int label, const EotConfig& cfg, Rng& rng);

/// log of a probability, floored so an underflowed softmax entry stays finite.
double safe_log(double p);

}  // namespace nbx
