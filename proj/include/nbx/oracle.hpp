#pragma once

#include <atomic>
#include <cstdint>
#include <optional>
#include <span>
#include <variant>
#include <vector>

#include "nbx/image.hpp"

namespace nbx {

struct TopKEntry {
  int label = 0;
  double score = 0.0;
  friend bool operator==(const TopKEntry&, const TopKEntry&) = default;
};

/// Everything an attacker ever sees from a classifier: either the whole
/// probability vector or a truncated, descending (score, then ascending label) list.
class ClassifierOutput {
 public:
  struct Full {
    std::vector<double> probs;
  };
  struct TopK {
    std::vector<TopKEntry> entries;
    int k = 0;
  };

  static ClassifierOutput full(std::vector<double> probs);
  static ClassifierOutput topk(std::vector<TopKEntry> entries, int k);

  bool is_full() const noexcept { return std::holds_alternative<Full>(value_); }
  bool is_topk() const noexcept { return std::holds_alternative<TopK>(value_); }
  /// Throw ConfigError when the output has the other kind.
  const Full& as_full() const;
  const TopK& as_topk() const;

  /// Highest-scoring label (lowest id among ties).
  int top_label() const;
  /// Zero-based rank in descending-score order; nullopt if the label is not visible.
  std::optional<int> rank_of(int label) const;
  /// Visible score of a label; nullopt if absent.
  std::optional<double> score_of(int label) const;

 private:
  explicit ClassifierOutput(std::variant<Full, TopK> v) : value_(std::move(v)) {}
  std::variant<Full, TopK> value_;
};

enum class OutputMode { kFull, kTopK };

/// Strictly increasing affine map applied to top-k scores, emulating services whose
/// scores are neither probabilities nor logits.
struct ScoreTransform {
  double scale = 1.0;
  double offset = 0.0;
  double apply(double s) const noexcept { return scale * s + offset; }
};

/// The k largest probabilities, ties broken by ascending label id. k larger than the
/// number of classes returns every class. The optional transform is applied after
/// selection and never changes the order.
ClassifierOutput truncate_topk(std::span<const double> probs, int k,
                               const std::optional<ScoreTransform>& transform = std::nullopt);

/// Monotone, thread-safe query counter with an optional hard budget.
class QueryLedger {
 public:
  explicit QueryLedger(std::optional<std::int64_t> budget = std::nullopt);

  QueryLedger(const QueryLedger&) = delete;
  QueryLedger& operator=(const QueryLedger&) = delete;

  /// Adds n to the count if that stays within budget; otherwise throws
  /// BudgetExhausted and leaves the count unchanged. Atomic.
  void charge(std::int64_t n = 1);

  std::int64_t count() const noexcept { return count_.load(); }
  const std::optional<std::int64_t>& budget() const noexcept { return budget_; }

 private:
  std::optional<std::int64_t> budget_;
  std::atomic<std::int64_t> count_{0};
};

/// A query-only classifier. Implementations must tolerate concurrent calls.
class Oracle {
 public:
  virtual ~Oracle() = default;
  virtual ClassifierOutput classify(const Image& x) = 0;
};

/// Charges one query to a ledger before forwarding each call.
class BudgetedOracle final : public Oracle {
 public:
  BudgetedOracle(Oracle& inner, QueryLedger& ledger) : inner_(inner), ledger_(ledger) {}

  ClassifierOutput classify(const Image& x) override {
    ledger_.charge(1);
    return inner_.classify(x);
  }

 private:
  Oracle& inner_;
  QueryLedger& ledger_;
};

}  // namespace nbx
