#include "nbx/nes.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <thread>

namespace nbx {

void NesConfig::validate() const {
  if (!(sigma > 0.0) || !std::isfinite(sigma)) {
    throw ConfigError("nes: sigma must be positive, got " + std::to_string(sigma));
  }
  if (n_samples < 2 || n_samples % 2 != 0) {
    throw ConfigError("nes: n_samples must be even and >= 2, got " +
                      std::to_string(n_samples));
  }
  if (threads < 1) throw ConfigError("nes: threads must be >= 1");
}

EstimateInterrupted::EstimateInterrupted(std::int64_t queries_used, std::exception_ptr cause)
    : Error([&] {
        std::string what = "gradient estimate interrupted after " +
                           std::to_string(queries_used) + " queries";
        try {
          std::rethrow_exception(cause);
        } catch (const std::exception& e) {
          what += ": ";
          what += e.what();
        } catch (...) {
        }
        return what;
      }()),
      queries_used_(queries_used),
      cause_(std::move(cause)) {}

std::vector<std::vector<double>> sample_antithetic(int n, std::size_t dim, Rng& rng) {
  if (n < 2 || n % 2 != 0) {
    throw ConfigError("sample_antithetic: n must be even and >= 2, got " + std::to_string(n));
  }
  if (dim == 0) throw ConfigError("sample_antithetic: dim must be >= 1");
  std::vector<std::vector<double>> eps(static_cast<std::size_t>(n));
  const auto half = static_cast<std::size_t>(n / 2);
  for (std::size_t i = 0; i < half; ++i) {
    eps[i].resize(dim);
    for (double& v : eps[i]) v = rng.normal();
  }
  // 0-based: eps[j] = -eps[n - 1 - j] for j >= n/2.
  for (std::size_t j = half; j < eps.size(); ++j) {
    const auto& mirror = eps[eps.size() - 1 - j];
    eps[j].resize(dim);
    std::transform(mirror.begin(), mirror.end(), eps[j].begin(), [](double v) { return -v; });
  }
  return eps;
}

namespace {

struct SampleOutcome {
  double value = 0.0;
  std::exception_ptr error;
  bool done = false;
};

void evaluate_range(const LossFn& loss, const Image& x, double sigma,
                    const std::vector<std::vector<double>>& eps, std::size_t begin,
                    std::size_t end, std::size_t stride, std::vector<SampleOutcome>& out) {
  for (std::size_t i = begin; i < end; i += stride) {
    try {
      out[i].value = loss(add_scaled(x, eps[i], sigma));
      out[i].done = true;
    } catch (...) {
      out[i].error = std::current_exception();
      // A serial worker stops at its first failure; later samples are never issued.
      return;
    }
  }
}

}  // namespace

GradientEstimate estimate_gradient(const LossFn& loss, const Image& x, const NesConfig& cfg,
                                   Rng& rng) {
  cfg.validate();
  for (double v : x.data()) {
    if (!std::isfinite(v)) throw ConfigError("estimate_gradient: non-finite input component");
  }
  const auto eps = sample_antithetic(cfg.n_samples, x.size(), rng);
  std::vector<SampleOutcome> outcomes(eps.size());

  const auto workers = static_cast<std::size_t>(std::min(cfg.threads, cfg.n_samples));
  if (workers <= 1) {
    evaluate_range(loss, x, cfg.sigma, eps, 0, eps.size(), 1, outcomes);
  } else {
    std::vector<std::jthread> pool;
    pool.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        evaluate_range(loss, x, cfg.sigma, eps, w, eps.size(), workers, outcomes);
      });
    }
  }

  std::int64_t completed = 0;
  std::exception_ptr first_error;
  for (const auto& o : outcomes) {
    if (o.done) ++completed;
    if (o.error && !first_error) first_error = o.error;
  }
  if (first_error) throw EstimateInterrupted(completed, first_error);

  // Summed by antithetic pair, in index order: eps_i F_i + eps_j F_j with
  // eps_j = -eps_i is eps_i (F_i - F_j). A constant loss therefore cancels exactly.
  GradientEstimate est;
  est.grad.assign(x.size(), 0.0);
  const std::size_t n = eps.size();
  for (std::size_t i = 0; i < n / 2; ++i) {
    const double diff = outcomes[i].value - outcomes[n - 1 - i].value;
    for (std::size_t d = 0; d < est.grad.size(); ++d) est.grad[d] += eps[i][d] * diff;
  }
  const double scale = 1.0 / (cfg.sigma * cfg.n_samples);
  for (double& g : est.grad) g *= scale;
  est.queries_used = completed;
  return est;
}

GradientEstimate estimate_gradient(const LossFn& loss, const Image& x, const NesConfig& cfg) {
  Rng rng(cfg.seed);
  return estimate_gradient(loss, x, cfg, rng);
}

double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) {
    throw ShapeError("dot: lengths " + std::to_string(a.size()) + " and " +
                     std::to_string(b.size()) + " differ");
  }
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  const double na = std::sqrt(dot(a, a));
  const double nb = std::sqrt(dot(b, b));
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot(a, b) / (na * nb);
}

double max_pairwise_cosine(std::span<const std::vector<double>> vecs) {
  if (vecs.size() < 2) throw ConfigError("max_pairwise_cosine: need at least two vectors");
  std::vector<double> norms(vecs.size());
  for (std::size_t i = 0; i < vecs.size(); ++i) norms[i] = std::sqrt(dot(vecs[i], vecs[i]));
  double worst = 0.0;
  for (std::size_t i = 0; i < vecs.size(); ++i) {
    for (std::size_t j = i + 1; j < vecs.size(); ++j) {
      const double denom = norms[i] * norms[j];
      if (denom == 0.0) continue;
      worst = std::max(worst, std::abs(dot(vecs[i], vecs[j])) / denom);
    }
  }
  return worst;
}

double gaussian_orthogonality_stat(int count, std::size_t dim, Rng& rng) {
  if (count < 2) throw ConfigError("gaussian_orthogonality_stat: count must be >= 2");
  if (dim == 0) throw ConfigError("gaussian_orthogonality_stat: dim must be >= 1");
  std::vector<std::vector<double>> vecs(static_cast<std::size_t>(count),
                                        std::vector<double>(dim));
  for (auto& v : vecs) {
    for (double& c : v) c = rng.normal();
  }
  return max_pairwise_cosine(vecs);
}

double projection_norm_ratio(std::span<const std::vector<double>> vecs,
                             std::span<const double> g) {
  if (vecs.empty()) throw ConfigError("projection_norm_ratio: no rows");
  const double g2 = dot(g, g);
  if (g2 == 0.0) throw ConfigError("projection_norm_ratio: g must be nonzero");
  double sum = 0.0;
  for (const auto& row : vecs) {
    const double p = dot(row, g);
    sum += p * p;
  }
  return sum / (static_cast<double>(vecs.size()) * g2);
}

}  // namespace nbx
