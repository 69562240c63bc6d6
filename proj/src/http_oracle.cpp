#include "nbx/http_oracle.hpp"

#include "httplib.h"
#include "nbx/error.hpp"
#include "nbx/wire.hpp"

namespace nbx {

namespace {

struct Endpoint {
  std::string host_port;
  std::string prefix;
};

Endpoint split_endpoint(const std::string& url) {
  constexpr std::string_view kScheme = "http://";
  if (url.rfind(kScheme, 0) != 0) {
    throw ConfigError("endpoint must start with http://, got \"" + url + "\"");
  }
  const auto slash = url.find('/', kScheme.size());
  Endpoint e;
  e.host_port = url.substr(0, slash);
  if (e.host_port.size() == kScheme.size()) throw ConfigError("endpoint has no host: \"" + url + "\"");
  if (slash != std::string::npos) e.prefix = url.substr(slash);
  while (!e.prefix.empty() && e.prefix.back() == '/') e.prefix.pop_back();
  return e;
}

httplib::Client make_client(const std::string& host_port, std::chrono::milliseconds timeout) {
  httplib::Client client(host_port);
  client.set_connection_timeout(timeout);
  client.set_read_timeout(timeout);
  client.set_write_timeout(timeout);
  return client;
}

// Maps a non-200 response to the matching OracleError.
[[noreturn]] void raise_status(const httplib::Response& res) {
  const auto body = wire::decode_error(res.body);
  const std::string detail = body ? body->kind + ": " + body->detail
                                  : "HTTP " + std::to_string(res.status);
  if (res.status == 429) {
    throw OracleError(OracleErrorKind::kRateLimited, detail, res.status,
                      body && body->retry_after_ms ? *body->retry_after_ms : -1);
  }
  throw OracleError(OracleErrorKind::kHttpStatus, detail, res.status);
}

}  // namespace

HttpOracle::HttpOracle(const std::string& endpoint, std::optional<OutputMode> mode,
                       std::chrono::milliseconds timeout)
    : mode_(mode), timeout_(timeout) {
  auto e = split_endpoint(endpoint);
  host_port_ = std::move(e.host_port);
  prefix_ = std::move(e.prefix);
}

ClassifierOutput HttpOracle::classify(const Image& x) {
  auto client = make_client(host_port_, timeout_);
  auto res = client.Post(prefix_ + "/classify", wire::encode_request(x, mode_), "application/json");
  if (!res) {
    throw OracleError(OracleErrorKind::kTransport, httplib::to_string(res.error()) + " (" +
                                                       host_port_ + ")");
  }
  if (res->status != 200) raise_status(*res);
  try {
    return wire::decode_output(res->body);
  } catch (const ParseError& e) {
    throw OracleError(OracleErrorKind::kMalformedBody, e.what(), res->status);
  }
}

RemoteStats fetch_stats(const std::string& endpoint, std::chrono::milliseconds timeout) {
  const auto e = split_endpoint(endpoint);
  auto client = make_client(e.host_port, timeout);
  auto res = client.Get(e.prefix + "/stats");
  if (!res) {
    throw OracleError(OracleErrorKind::kTransport, httplib::to_string(res.error()) + " (" +
                                                       e.host_port + ")");
  }
  if (res->status != 200) raise_status(*res);
  try {
    const auto s = wire::decode_stats(res->body);
    return {s.queries, s.budget};
  } catch (const ParseError& err) {
    throw OracleError(OracleErrorKind::kMalformedBody, err.what(), res->status);
  }
}

}  // namespace nbx
