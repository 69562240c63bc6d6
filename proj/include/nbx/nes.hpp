#pragma once

#include <cstdint>
#include <exception>
#include <functional>
#include <span>
#include <vector>

#include "nbx/error.hpp"
#include "nbx/image.hpp"
#include "nbx/rng.hpp"

namespace nbx {

/// Isotropic Gaussian search distribution x + sigma * N(0, I), sampled antithetically.
struct NesConfig {
  double sigma = 1e-3;
  int n_samples = 100;
  std::uint64_t seed = 0;
  /// Worker threads for the n loss evaluations. 1 evaluates serially, which is
  /// required when the loss itself is order-sensitive. The sum is always taken in
  /// sample-index order, so results do not depend on completion order.
  int threads = 1;

  /// Throws ConfigError unless sigma > 0 and n_samples is even and >= 2.
  void validate() const;
};

struct GradientEstimate {
  std::vector<double> grad;
  std::int64_t queries_used = 0;
};

/// One query to the black box. Must return a finite value for any image it is given.
using LossFn = std::function<double(const Image&)>;

/// A loss evaluation failed partway through an estimate. `queries_used` counts the
/// evaluations that completed; `cause` is the original exception.
class EstimateInterrupted : public Error {
 public:
  EstimateInterrupted(std::int64_t queries_used, std::exception_ptr cause);

  std::int64_t queries_used() const noexcept { return queries_used_; }
  std::exception_ptr cause() const noexcept { return cause_; }
  [[noreturn]] void rethrow_cause() const { std::rethrow_exception(cause_); }

 private:
  std::int64_t queries_used_;
  std::exception_ptr cause_;
};

/// n vectors of length dim. The first n/2 are i.i.d. standard normal, drawn in
/// order; vector j (1-based, j > n/2) is the negation of vector n - j + 1.
std::vector<std::vector<double>> sample_antithetic(int n, std::size_t dim, Rng& rng);

/// grad = 1/(sigma n) * sum_i eps_i * F(x + sigma eps_i), with eps from
/// sample_antithetic. F(x) itself is never evaluated. Accumulation runs over the
/// antithetic pairs in index order, so a constant loss gives an exactly zero estimate.
GradientEstimate estimate_gradient(const LossFn& loss, const Image& x, const NesConfig& cfg,
                                   Rng& rng);

/// Same, drawing from a fresh Rng(cfg.seed).
GradientEstimate estimate_gradient(const LossFn& loss, const Image& x, const NesConfig& cfg);

/// max over pairs i < j of |v_i . v_j| / (|v_i| |v_j|).
double max_pairwise_cosine(std::span<const std::vector<double>> vecs);

/// max_pairwise_cosine of `count` fresh standard normal vectors in `dim` dimensions.
double gaussian_orthogonality_stat(int count, std::size_t dim, Rng& rng);

/// Norm preservation of the random projection Theta g.
///
/// Theta has rows vecs_i / sqrt(m), so the returned value is
///   |Theta g|^2 / |g|^2 = (1/m) sum_i (vecs_i . g)^2 / |g|^2,
/// whose expectation is exactly 1 when the rows are standard normal.
/// Throws ConfigError for a zero g, ShapeError for a dimension mismatch.
double projection_norm_ratio(std::span<const std::vector<double>> vecs,
                             std::span<const double> g);

double dot(std::span<const double> a, std::span<const double> b);
double cosine_similarity(std::span<const double> a, std::span<const double> b);

}  // namespace nbx
