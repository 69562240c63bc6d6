#include "nbx/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "nbx/error.hpp"

namespace nbx {

void AttackConfig::validate() const {
  if (!(epsilon > 0.0)) throw ConfigError("attack: epsilon must be > 0");
  if (!(lr > 0.0)) throw ConfigError("attack: lr must be > 0");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("attack: momentum must be in [0, 1)");
  nes.validate();
  if (max_queries < nes.n_samples) {
    throw ConfigError("attack: max_queries (" + std::to_string(max_queries) +
                      ") must be >= nes.n_samples (" + std::to_string(nes.n_samples) + ")");
  }
  if (k && *k < 1) throw ConfigError("attack: k must be >= 1");
  if (eot) eot->validate();
  if (partial.pgd_steps_per_round < 1) throw ConfigError("attack: pgd_steps_per_round must be >= 1");
  if (!(partial.eps_decay > 0.0 && partial.eps_decay < 1.0)) {
    throw ConfigError("attack: eps_decay must be in (0, 1)");
  }
  if (partial.max_rollbacks < 1) throw ConfigError("attack: max_rollbacks must be >= 1");
}

PgdStepResult pgd_step(const Image& x, std::span<const double> grad,
                       std::span<const double> accumulator, const AttackConfig& cfg,
                       const BoxConstraint& box) {
  if (grad.size() != x.size()) {
    throw ShapeError("pgd_step: gradient has " + std::to_string(grad.size()) +
                     " components, image has " + std::to_string(x.size()));
  }
  if (!accumulator.empty() && accumulator.size() != x.size()) {
    throw ShapeError("pgd_step: accumulator size mismatch");
  }
  PgdStepResult out;
  out.accumulator.resize(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double prev = accumulator.empty() ? 0.0 : accumulator[i];
    out.accumulator[i] = cfg.momentum * prev + (1.0 - cfg.momentum) * grad[i];
  }
  Image moved = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double a = out.accumulator[i];
    double step = a;
    if (cfg.step == StepRule::kSign) step = a > 0.0 ? 1.0 : (a < 0.0 ? -1.0 : 0.0);
    moved[i] += cfg.lr * step;
  }
  out.x = project_feasible(moved, box);
  return out;
}

double label_set_loss(const ClassifierOutput& output, const std::set<int>& labels) {
  double best = 0.0;
  bool found = false;
  for (int label : labels) {
    if (const auto s = output.score_of(label)) {
      best = found ? std::max(best, *s) : *s;
      found = true;
    }
  }
  return best;
}

namespace {

struct Probe {
  bool success = false;
  std::optional<double> target_prob;
};

// Shared full-information PGD loop. `loss` is maximised; both callbacks query
// through the metered oracle so the ledger sees every call.
struct Objective {
  LossFn loss;
  std::function<Probe(const Image&)> probe;
  /// Called before each gradient estimate, if set.
  std::function<void()> before_estimate;
};

bool is_budget_exhaustion(const std::exception_ptr& error) {
  try {
    std::rethrow_exception(error);
  } catch (const BudgetExhausted&) {
    return true;
  } catch (...) {
    return false;
  }
}

AttackResult run_pgd(QueryLedger& ledger, const Image& original, const AttackConfig& cfg,
                     const Objective& objective, const AttackObserver* observer) {
  const BoxConstraint box{original, cfg.epsilon};
  AttackResult result;
  result.adv = original;
  Rng nes_rng(cfg.nes.seed);
  try {
    Probe p = objective.probe(original);
    result.final_target_prob = p.target_prob;
    result.success = p.success;
    std::vector<double> accumulator;
    Image current = original;
    while (!result.success) {
      if (objective.before_estimate) objective.before_estimate();
      const auto estimate = estimate_gradient(objective.loss, current, cfg.nes, nes_rng);
      auto step = pgd_step(current, estimate.grad, accumulator, cfg, box);
      current = std::move(step.x);
      accumulator = std::move(step.accumulator);
      ++result.iterations;
      if (observer && observer->on_iterate) observer->on_iterate(current);
      p = objective.probe(current);
      result.adv = current;
      result.final_target_prob = p.target_prob;
      result.success = p.success;
    }
  } catch (const EstimateInterrupted& e) {
    if (!is_budget_exhaustion(e.cause())) e.rethrow_cause();
  } catch (const BudgetExhausted&) {
  }
  result.queries = ledger.count();
  result.epsilon_achieved = linf_dist(result.adv, original);
  return result;
}

const std::vector<double>& full_probs(const ClassifierOutput& out, int label) {
  const auto& probs = out.as_full().probs;
  if (label < 0 || static_cast<std::size_t>(label) >= probs.size()) {
    throw ConfigError("label " + std::to_string(label) + " is outside the classifier's " +
                      std::to_string(probs.size()) + " classes");
  }
  return probs;
}

}  // namespace

AttackResult targeted_attack(Oracle& oracle, const Image& x, int target,
                             const AttackConfig& cfg, const AttackObserver* observer) {
  cfg.validate();
  QueryLedger ledger(cfg.max_queries);
  BudgetedOracle metered(oracle, ledger);
  Objective objective;
  objective.loss = [&](const Image& theta) {
    const auto out = metered.classify(clip_valid(theta));
    return safe_log(full_probs(out, target)[static_cast<std::size_t>(target)]);
  };
  objective.probe = [&](const Image& img) {
    const auto out = metered.classify(img);
    const auto& probs = full_probs(out, target);
    return Probe{out.top_label() == target, probs[static_cast<std::size_t>(target)]};
  };
  return run_pgd(ledger, x, cfg, objective, observer);
}

AttackResult untargeted_attack(Oracle& oracle, const Image& x, int true_label,
                               const AttackConfig& cfg, const AttackObserver* observer) {
  cfg.validate();
  QueryLedger ledger(cfg.max_queries);
  BudgetedOracle metered(oracle, ledger);
  Objective objective;
  objective.loss = [&](const Image& theta) {
    const auto out = metered.classify(clip_valid(theta));
    return -safe_log(full_probs(out, true_label)[static_cast<std::size_t>(true_label)]);
  };
  objective.probe = [&](const Image& img) {
    const auto out = metered.classify(img);
    const auto& probs = full_probs(out, true_label);
    return Probe{out.top_label() != true_label, probs[static_cast<std::size_t>(true_label)]};
  };
  return run_pgd(ledger, x, cfg, objective, observer);
}

AttackResult label_set_attack(Oracle& oracle, const Image& x, const std::set<int>& labels,
                              const AttackConfig& cfg, const AttackObserver* observer) {
  cfg.validate();
  if (labels.empty()) throw ConfigError("label_set_attack: empty label set");
  QueryLedger ledger(cfg.max_queries);
  BudgetedOracle metered(oracle, ledger);
  Objective objective;
  objective.loss = [&](const Image& theta) {
    return -label_set_loss(metered.classify(clip_valid(theta)), labels);
  };
  objective.probe = [&](const Image& img) {
    const auto out = metered.classify(img);
    bool success;
    if (out.is_full()) {
      success = !labels.contains(out.top_label());
    } else {
      success = std::none_of(labels.begin(), labels.end(),
                             [&](int l) { return out.score_of(l).has_value(); });
    }
    return Probe{success, label_set_loss(out, labels)};
  };
  return run_pgd(ledger, x, cfg, objective, observer);
}

AttackResult eot_attack(Oracle& oracle, const Image& x, int target, const AttackConfig& cfg,
                        const AttackObserver* observer) {
  cfg.validate();
  if (!cfg.eot) throw ConfigError("eot_attack: cfg.eot is not set");
  const EotConfig& eot = *cfg.eot;
  QueryLedger ledger(cfg.max_queries);
  BudgetedOracle metered(oracle, ledger);
  const Rng root(cfg.nes.seed);
  Rng loss_rng = root.split(1);
  Rng vote_rng = root.split(2);
  AngleSource loss_angles(eot, loss_rng);
  AngleSource vote_angles(eot, vote_rng);
  std::optional<double> adversariality;
  // One angle set per gradient estimate, shared by all NES samples, so the
  // antithetic differences see the same transformations.
  std::vector<double> step_angles(static_cast<std::size_t>(eot.m_samples));

  Objective objective;
  objective.before_estimate = [&] {
    for (double& a : step_angles) a = loss_angles.next();
  };
  objective.loss = [&](const Image& theta) {
    return eot_loss(metered, clip_valid(theta), target, step_angles);
  };
  objective.probe = [&](const Image& img) {
    const int needed = static_cast<int>(std::ceil(eot.vote_threshold * eot.vote_samples - 1e-9));
    const int allowed_misses = eot.vote_samples - needed;
    int hits = 0;
    int misses = 0;
    double prob_sum = 0.0;
    int drawn = 0;
    // Stops early once the threshold is out of reach.
    while (drawn < eot.vote_samples && misses <= allowed_misses) {
      const auto out = metered.classify(rotate(img, vote_angles.next()));
      const auto& probs = full_probs(out, target);
      prob_sum += probs[static_cast<std::size_t>(target)];
      ++drawn;
      if (out.top_label() == target) {
        ++hits;
      } else {
        ++misses;
      }
    }
    adversariality = static_cast<double>(hits) / drawn;
    return Probe{hits >= needed, prob_sum / drawn};
  };
  AttackResult result = run_pgd(ledger, x, cfg, objective, observer);
  result.adversariality = adversariality;
  return result;
}

AttackResult partial_info_attack(Oracle& oracle, const Image& original, const Image& start,
                                 int target, const AttackConfig& cfg,
                                 const AttackObserver* observer) {
  cfg.validate();
  if (!cfg.k) throw ConfigError("partial_info_attack: cfg.k is not set");
  require_same_shape(original, start, "partial_info_attack");
  const int k = *cfg.k;
  const double goal = cfg.epsilon;
  QueryLedger ledger(cfg.max_queries);
  BudgetedOracle metered(oracle, ledger);
  Rng nes_rng(cfg.nes.seed);

  struct View {
    bool visible = false;
    int rank = 0;
    double score = 0.0;
  };
  auto look = [&](const Image& img) {
    const auto out = metered.classify(img);
    View v;
    const auto rank = out.rank_of(target);
    if (rank && *rank < k) {
      v.visible = true;
      v.rank = *rank;
      v.score = *out.score_of(target);
    }
    return v;
  };
  // Proxy objective: the target's visible score. When a perturbed sample pushes the
  // target out of view, its score is at most the lowest visible one.
  const LossFn proxy = [&](const Image& theta) {
    const auto out = metered.classify(clip_valid(theta));
    if (const auto rank = out.rank_of(target); rank && *rank < k) return *out.score_of(target);
    if (out.is_topk()) {
      const auto& entries = out.as_topk().entries;
      return entries.empty() ? 0.0 : entries.back().score;
    }
    return 0.0;
  };

  const View first = look(start);
  if (!first.visible) {
    throw ConfigError("partial_info_attack: starting image does not place label " +
                      std::to_string(target) + " in the top " + std::to_string(k));
  }

  PartialInfoState state{start, std::max(linf_dist(start, original), goal), first.rank};
  double score = first.score;
  AttackResult result;
  auto accept = [&] {
    if (observer && observer->on_accept) observer->on_accept(state);
  };
  auto done = [&] { return state.eps <= goal && state.rank_of_target == 0; };
  accept();

  try {
    while (!done()) {
      if (state.eps > goal) {
        double factor = cfg.partial.eps_decay;
        int rollbacks = 0;
        while (state.eps > goal && rollbacks < cfg.partial.max_rollbacks) {
          const double candidate_eps = std::max(goal, state.eps * factor);
          Image candidate = project_feasible(state.x, {original, candidate_eps});
          const View v = look(candidate);
          if (v.visible) {
            state = {std::move(candidate), candidate_eps, v.rank};
            score = v.score;
            accept();
          } else {
            ++rollbacks;
            factor = 0.5 * (1.0 + factor);
          }
        }
      }
      if (done()) break;

      const BoxConstraint box{original, state.eps};
      std::vector<double> accumulator;
      for (int s = 0; s < cfg.partial.pgd_steps_per_round && !done(); ++s) {
        const auto estimate = estimate_gradient(proxy, state.x, cfg.nes, nes_rng);
        auto step = pgd_step(state.x, estimate.grad, accumulator, cfg, box);
        accumulator = std::move(step.accumulator);
        ++result.iterations;
        if (observer && observer->on_iterate) observer->on_iterate(step.x);
        const View v = look(step.x);
        if (v.visible) {
          state.x = std::move(step.x);
          state.rank_of_target = v.rank;
          score = v.score;
          accept();
        }
      }
    }
  } catch (const EstimateInterrupted& e) {
    if (!is_budget_exhaustion(e.cause())) e.rethrow_cause();
  } catch (const BudgetExhausted&) {
  }

  result.adv = state.x;
  result.epsilon_achieved = state.eps;
  result.success = done();
  result.weak_success = state.eps <= goal;
  result.final_target_prob = score;
  result.queries = ledger.count();
  return result;
}

}  // namespace nbx
