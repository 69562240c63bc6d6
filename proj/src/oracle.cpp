#include "nbx/oracle.hpp"

#include <algorithm>
#include <numeric>
#include <string>

#include "nbx/error.hpp"

namespace nbx {

const char* to_string(OracleErrorKind kind) noexcept {
  switch (kind) {
    case OracleErrorKind::kTransport: return "transport";
    case OracleErrorKind::kHttpStatus: return "http_status";
    case OracleErrorKind::kMalformedBody: return "malformed_body";
    case OracleErrorKind::kRateLimited: return "rate_limited";
  }
  return "unknown";
}

ClassifierOutput ClassifierOutput::full(std::vector<double> probs) {
  return ClassifierOutput(Full{std::move(probs)});
}

ClassifierOutput ClassifierOutput::topk(std::vector<TopKEntry> entries, int k) {
  return ClassifierOutput(TopK{std::move(entries), k});
}

const ClassifierOutput::Full& ClassifierOutput::as_full() const {
  if (const auto* f = std::get_if<Full>(&value_)) return *f;
  throw ConfigError("expected a full probability output, got a top-k list");
}

const ClassifierOutput::TopK& ClassifierOutput::as_topk() const {
  if (const auto* t = std::get_if<TopK>(&value_)) return *t;
  throw ConfigError("expected a top-k output, got a full probability vector");
}

int ClassifierOutput::top_label() const {
  if (const auto* f = std::get_if<Full>(&value_)) {
    if (f->probs.empty()) throw ConfigError("empty classifier output");
    return static_cast<int>(std::max_element(f->probs.begin(), f->probs.end()) -
                            f->probs.begin());
  }
  const auto& t = std::get<TopK>(value_);
  if (t.entries.empty()) throw ConfigError("empty classifier output");
  return t.entries.front().label;
}

std::optional<int> ClassifierOutput::rank_of(int label) const {
  if (const auto* f = std::get_if<Full>(&value_)) {
    if (label < 0 || static_cast<std::size_t>(label) >= f->probs.size()) return std::nullopt;
    const double p = f->probs[static_cast<std::size_t>(label)];
    int rank = 0;
    for (std::size_t j = 0; j < f->probs.size(); ++j) {
      const double q = f->probs[j];
      if (q > p || (q == p && static_cast<int>(j) < label)) ++rank;
    }
    return rank;
  }
  const auto& entries = std::get<TopK>(value_).entries;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    if (entries[i].label == label) return static_cast<int>(i);
  }
  return std::nullopt;
}

std::optional<double> ClassifierOutput::score_of(int label) const {
  if (const auto* f = std::get_if<Full>(&value_)) {
    if (label < 0 || static_cast<std::size_t>(label) >= f->probs.size()) return std::nullopt;
    return f->probs[static_cast<std::size_t>(label)];
  }
  for (const auto& e : std::get<TopK>(value_).entries) {
    if (e.label == label) return e.score;
  }
  return std::nullopt;
}

ClassifierOutput truncate_topk(std::span<const double> probs, int k,
                               const std::optional<ScoreTransform>& transform) {
  if (k < 1) throw ConfigError("truncate_topk: k must be >= 1, got " + std::to_string(k));
  if (transform && !(transform->scale > 0.0)) {
    throw ConfigError("truncate_topk: score transform scale must be positive");
  }
  std::vector<int> order(probs.size());
  std::iota(order.begin(), order.end(), 0);
  const auto keep = std::min(order.size(), static_cast<std::size_t>(k));
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(keep),
                    order.end(), [&](int a, int b) {
                      const double pa = probs[static_cast<std::size_t>(a)];
                      const double pb = probs[static_cast<std::size_t>(b)];
                      return pa > pb || (pa == pb && a < b);
                    });
  std::vector<TopKEntry> entries;
  entries.reserve(keep);
  for (std::size_t i = 0; i < keep; ++i) {
    const double p = probs[static_cast<std::size_t>(order[i])];
    entries.push_back({order[i], transform ? transform->apply(p) : p});
  }
  return ClassifierOutput::topk(std::move(entries), k);
}

QueryLedger::QueryLedger(std::optional<std::int64_t> budget) : budget_(budget) {
  if (budget_ && *budget_ <= 0) throw ConfigError("query budget must be positive");
}

void QueryLedger::charge(std::int64_t n) {
  if (n < 1) throw ConfigError("QueryLedger::charge: n must be >= 1");
  if (!budget_) {
    count_.fetch_add(n);
    return;
  }
  std::int64_t current = count_.load();
  do {
    if (current + n > *budget_) throw BudgetExhausted(current);
  } while (!count_.compare_exchange_weak(current, current + n));
}

}  // namespace nbx
