#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace nbx {

/// Base class of every error raised by the toolkit.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Mismatched image shapes or vector dimensions.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration values (odd sample counts, bad epsilon, ...).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed model/config/image files. The message names the offending field.
class ParseError : public Error {
 public:
  using Error::Error;
};

/// Raised when a query ledger refuses a charge. Terminal for an attack.
class BudgetExhausted : public Error {
 public:
  explicit BudgetExhausted(std::int64_t final_count)
      : Error("query budget exhausted after " + std::to_string(final_count) + " queries"),
        final_count_(final_count) {}

  std::int64_t final_count() const noexcept { return final_count_; }

 private:
  std::int64_t final_count_;
};

enum class OracleErrorKind { kTransport, kHttpStatus, kMalformedBody, kRateLimited };

const char* to_string(OracleErrorKind kind) noexcept;

/// Failure talking to a remote classifier.
class OracleError : public Error {
 public:
  OracleError(OracleErrorKind kind, std::string detail, int status = 0,
              std::int64_t retry_after_ms = -1)
      : Error(std::string(to_string(kind)) + ": " + detail),
        kind_(kind),
        status_(status),
        retry_after_ms_(retry_after_ms) {}

  OracleErrorKind kind() const noexcept { return kind_; }
  int status() const noexcept { return status_; }
  /// Only meaningful for kRateLimited; -1 otherwise.
  std::int64_t retry_after_ms() const noexcept { return retry_after_ms_; }

 private:
  OracleErrorKind kind_;
  int status_;
  std::int64_t retry_after_ms_;
};

}  // namespace nbx
