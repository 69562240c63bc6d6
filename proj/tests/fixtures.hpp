#pragma once

// Small models and reference attacks shared by the unit and acceptance tests.

#include <algorithm>
#include <cstdint>
#include <vector>

#include "nbx/attacks.hpp"
#include "nbx/model.hpp"
#include "nbx/rng.hpp"

namespace nbx::testing {

/// Softmax over a single dense layer: logits = W x + b.
inline MlpModel linear_model(std::uint64_t seed, int dims = 8, int classes = 3) {
  Rng rng(seed);
  DenseLayer layer;
  layer.inputs = dims;
  layer.outputs = classes;
  layer.activation = Activation::kIdentity;
  layer.weights.resize(static_cast<std::size_t>(dims) * classes);
  for (double& w : layer.weights) w = rng.normal();
  layer.biases.assign(static_cast<std::size_t>(classes), 0.0);
  MlpModel model;
  model.input_shape = Shape{1, dims, 1};
  model.num_classes = classes;
  model.layers.push_back(std::move(layer));
  model.validate();
  return model;
}

inline int argmax(const std::vector<double>& v) {
  return static_cast<int>(std::max_element(v.begin(), v.end()) - v.begin());
}

inline int predicted(const MlpModel& model, const Image& x) {
  return argmax(classify_full(model, x));
}

/// Any label other than `avoid`, drawn uniformly.
inline int other_label(Rng& rng, int classes, int avoid) {
  int t = avoid;
  while (t == avoid) t = static_cast<int>(rng.below(static_cast<std::uint64_t>(classes)));
  return t;
}

struct WhiteBoxResult {
  Image adv;
  bool success = false;
  int iterations = 0;
};

/// Targeted PGD driven by exact gradients of log P(target | x).
inline WhiteBoxResult whitebox_targeted(const MlpModel& model, const Image& x, int target,
                                        const AttackConfig& cfg, int max_iterations) {
  const BoxConstraint box{x, cfg.epsilon};
  WhiteBoxResult r{x, predicted(model, x) == target, 0};
  std::vector<double> acc;
  while (!r.success && r.iterations < max_iterations) {
    const auto g = analytic_logprob_grad(model, r.adv, target);
    auto step = pgd_step(r.adv, g, acc, cfg, box);
    r.adv = std::move(step.x);
    acc = std::move(step.accumulator);
    ++r.iterations;
    r.success = predicted(model, r.adv) == target;
  }
  return r;
}

/// Counts every query and forwards it.
class CountingOracle final : public Oracle {
 public:
  explicit CountingOracle(Oracle& inner) : metered_(inner, ledger_) {}
  ClassifierOutput classify(const Image& x) override { return metered_.classify(x); }
  std::int64_t count() const { return ledger_.count(); }

 private:
  QueryLedger ledger_;  // declared first: metered_ binds to it
  BudgetedOracle metered_;
};

}  // namespace nbx::testing
