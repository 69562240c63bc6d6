#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>

#include "nbx/model.hpp"
#include "nbx/oracle.hpp"

namespace nbx {

struct BindAddress {
  std::string host = "127.0.0.1";
  int port = 8080;  // 0 picks a free port
};

/// "host:port". Throws ConfigError.
BindAddress parse_bind(const std::string& text);

struct ServiceConfig {
  std::filesystem::path model_path;
  OutputMode mode = OutputMode::kFull;
  int k = 1;
  /// Successful classifications allowed over the service's lifetime.
  std::optional<std::int64_t> budget;
  /// Token-bucket refill rate in requests per second; bucket size max(1, rate).
  std::optional<double> rate_limit;
  BindAddress bind;
  std::optional<ScoreTransform> score_transform;

  void validate() const;
};

/// Reads a JSON config file:
///
///   {"model": "m.json", "mode": "topk", "k": 5, "budget": 10000, "rate_limit": 50,
///    "bind": "127.0.0.1:8080", "score_transform": {"scale": 3.0, "offset": -1.0}}
///
/// Every key except "model" is optional. A relative model path is resolved against
/// the config file's directory. Throws ParseError naming the field.
ServiceConfig load_service_config(const std::filesystem::path& path);

/// The NBX_BIND environment variable, if set.
std::optional<BindAddress> bind_from_env();

/// HTTP front end to an in-process model. Serves POST /classify and GET /stats.
/// Only successful classifications are counted; rejected requests cost nothing.
/// Responses never carry logits, weights or architecture details.
class VictimService {
 public:
  /// Loads cfg.model_path. Throws ParseError / ConfigError / ShapeError.
  explicit VictimService(ServiceConfig cfg);
  /// Serves `model` directly; cfg.model_path is ignored.
  VictimService(MlpModel model, ServiceConfig cfg);
  ~VictimService();

  VictimService(const VictimService&) = delete;
  VictimService& operator=(const VictimService&) = delete;

  /// Binds and serves on a background thread. Returns the bound port. Throws
  /// ConfigError if the address cannot be bound.
  int start();
  /// Binds and serves on the calling thread until stop() is called.
  void run();
  void stop();

  int port() const noexcept;
  std::int64_t queries() const noexcept;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace nbx
