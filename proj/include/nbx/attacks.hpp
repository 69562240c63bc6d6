#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <set>
#include <span>
#include <vector>

#include "nbx/image.hpp"
#include "nbx/nes.hpp"
#include "nbx/oracle.hpp"
#include "nbx/transforms.hpp"

namespace nbx {

enum class StepRule {
  kSign,   // x + lr * sign(accumulator)
  kPlain,  // x + lr * accumulator
};

/// Knobs of the partial-information (top-k) attack.
struct PartialInfoConfig {
  /// PGD steps taken inside the current epsilon-box between line searches.
  int pgd_steps_per_round = 10;
  /// Multiplicative epsilon shrink tried first by the line search.
  double eps_decay = 0.9;
  /// Rejected shrinks allowed per line search before PGD resumes. Each rejection
  /// backs the factor off halfway towards 1.
  int max_rollbacks = 3;
};

struct AttackConfig {
  double epsilon = 0.05;
  double lr = 0.01;
  double momentum = 0.9;
  StepRule step = StepRule::kSign;
  NesConfig nes;
  std::int64_t max_queries = 1'000'000;
  std::optional<int> target;
  std::optional<int> k;
  std::optional<EotConfig> eot;
  PartialInfoConfig partial;

  void validate() const;
};

struct AttackResult {
  Image adv;
  bool success = false;
  /// Partial information only: the target is in the top-k at the final epsilon
  /// but not necessarily ranked first.
  bool weak_success = false;
  std::int64_t queries = 0;
  std::optional<double> final_target_prob;
  /// l-infinity distance bound the result satisfies.
  double epsilon_achieved = 0.0;
  /// EOT only: fraction of the last success vote classified as the target.
  std::optional<double> adversariality;
  int iterations = 0;
};

/// An accepted iterate of the partial-information attack.
struct PartialInfoState {
  Image x;
  double eps = 0.0;
  int rank_of_target = 0;
};

/// Optional instrumentation hooks.
struct AttackObserver {
  /// Every PGD iterate, after projection.
  std::function<void(const Image&)> on_iterate;
  /// Every accepted partial-information state, including the initial one.
  std::function<void(const PartialInfoState&)> on_accept;
};

struct PgdStepResult {
  Image x;
  std::vector<double> accumulator;
};

/// accumulator <- momentum * accumulator + (1 - momentum) * grad, then an ascent
/// step along it (sign or plain per cfg.step), projected onto `box` and then into
/// [0, 1]. An empty `accumulator` is treated as zero.
PgdStepResult pgd_step(const Image& x, std::span<const double> grad,
                       std::span<const double> accumulator, const AttackConfig& cfg,
                       const BoxConstraint& box);

/// Maximises log P(target | x) until the target is the top label or the budget
/// runs out. Needs an oracle with full outputs.
AttackResult targeted_attack(Oracle& oracle, const Image& x, int target,
                             const AttackConfig& cfg, const AttackObserver* observer = nullptr);

/// Minimises log P(true_label | x) until some other label is on top.
AttackResult untargeted_attack(Oracle& oracle, const Image& x, int true_label,
                               const AttackConfig& cfg,
                               const AttackObserver* observer = nullptr);

/// Highest visible score among `labels`; 0 when none of them is visible.
double label_set_loss(const ClassifierOutput& output, const std::set<int>& labels);

/// Minimises label_set_loss. Succeeds when no label of the set is the top label
/// (full outputs) or none is visible at all (top-k outputs).
AttackResult label_set_attack(Oracle& oracle, const Image& x, const std::set<int>& labels,
                              const AttackConfig& cfg,
                              const AttackObserver* observer = nullptr);

/// Top-k attack starting from `start`, an image the oracle already places `target`
/// in the top k of. Alternates a backtracking line search that shrinks the
/// epsilon-box around `original` while the target stays visible, with PGD steps that
/// raise the target's score inside the last accepted box. Succeeds when the box
/// reaches cfg.epsilon with the target ranked first. Throws ConfigError if `start`
/// fails the top-k check.
AttackResult partial_info_attack(Oracle& oracle, const Image& original, const Image& start,
                                 int target, const AttackConfig& cfg,
                                 const AttackObserver* observer = nullptr);

/// PGD on the expected log-probability of `target` over cfg.eot rotations. Success
/// when at least vote_threshold of vote_samples fresh rotations classify as target.
AttackResult eot_attack(Oracle& oracle, const Image& x, int target, const AttackConfig& cfg,
                        const AttackObserver* observer = nullptr);

}  // namespace nbx
