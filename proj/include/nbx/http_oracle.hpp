#pragma once

#include <chrono>
#include <optional>
#include <string>

#include "nbx/oracle.hpp"

namespace nbx {

/// Remote classifier speaking the /classify protocol (see nbx/wire.hpp).
///
/// Failures raise OracleError: kTransport when no response arrives, kRateLimited on
/// 429 (with the server's retry_after_ms), kHttpStatus on any other non-200 status,
/// kMalformedBody when a 200 body does not decode. Safe to call concurrently; each
/// call opens its own connection.
class HttpOracle final : public Oracle {
 public:
  /// `endpoint` is "http://host:port" with an optional path prefix that /classify is
  /// appended to. `mode` is sent with each request; nullopt lets the service decide.
  explicit HttpOracle(const std::string& endpoint, std::optional<OutputMode> mode = std::nullopt,
                      std::chrono::milliseconds timeout = std::chrono::seconds(30));

  ClassifierOutput classify(const Image& x) override;

  const std::string& host_port() const noexcept { return host_port_; }

 private:
  std::string host_port_;  // "http://host:port"
  std::string prefix_;     // path prefix without a trailing slash
  std::optional<OutputMode> mode_;
  std::chrono::milliseconds timeout_;
};

/// GET {endpoint}/stats. Throws OracleError like HttpOracle::classify.
struct RemoteStats {
  std::int64_t queries = 0;
  std::optional<std::int64_t> budget;
};
RemoteStats fetch_stats(const std::string& endpoint,
                        std::chrono::milliseconds timeout = std::chrono::seconds(30));

}  // namespace nbx
