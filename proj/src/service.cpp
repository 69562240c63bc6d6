#include "nbx/service.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <mutex>
#include <sstream>
#include <thread>

#include "httplib.h"
#include "json.hpp"
#include "nbx/error.hpp"
#include "nbx/wire.hpp"

namespace nbx {

using nlohmann::json;

BindAddress parse_bind(const std::string& text) {
  const auto colon = text.rfind(':');
  if (colon == std::string::npos || colon == 0 || colon + 1 == text.size()) {
    throw ConfigError("bind address must look like host:port, got \"" + text + "\"");
  }
  BindAddress b;
  b.host = text.substr(0, colon);
  const std::string port = text.substr(colon + 1);
  if (!std::all_of(port.begin(), port.end(), [](char c) { return c >= '0' && c <= '9'; }) ||
      port.size() > 5 || std::stoi(port) > 65535) {
    throw ConfigError("bind address has an invalid port: \"" + text + "\"");
  }
  b.port = std::stoi(port);
  return b;
}

std::optional<BindAddress> bind_from_env() {
  const char* v = std::getenv("NBX_BIND");
  if (v == nullptr || *v == '\0') return std::nullopt;
  return parse_bind(v);
}

void ServiceConfig::validate() const {
  if (mode == OutputMode::kTopK && k < 1) throw ConfigError("service: k must be >= 1 in topk mode");
  if (budget && *budget < 1) throw ConfigError("service: budget must be >= 1");
  if (rate_limit && !(*rate_limit > 0.0)) throw ConfigError("service: rate_limit must be > 0");
  if (score_transform && !(score_transform->scale > 0.0)) {
    throw ConfigError("service: score_transform.scale must be > 0");
  }
  if (bind.port < 0 || bind.port > 65535) throw ConfigError("service: port out of range");
}

ServiceConfig load_service_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open service config " + path.string());
  std::stringstream text;
  text << in.rdbuf();
  json doc;
  try {
    doc = json::parse(text.str());
  } catch (const json::parse_error& e) {
    throw ParseError(path.string() + ": invalid JSON (" + e.what() + ")");
  }
  if (!doc.is_object()) throw ParseError(path.string() + ": expected an object");
  auto where = [&](const char* key) { return path.string() + ": " + key; };
  ServiceConfig cfg;
  try {
    if (!doc.contains("model") || !doc["model"].is_string()) {
      throw ParseError(where("model") + " must be a string");
    }
    cfg.model_path = doc["model"].get<std::string>();
    if (cfg.model_path.is_relative()) cfg.model_path = path.parent_path() / cfg.model_path;
    if (doc.contains("mode")) cfg.mode = wire::parse_mode(doc["mode"].get<std::string>());
    if (doc.contains("k")) cfg.k = doc["k"].get<int>();
    if (doc.contains("budget") && !doc["budget"].is_null()) {
      cfg.budget = doc["budget"].get<std::int64_t>();
    }
    if (doc.contains("rate_limit") && !doc["rate_limit"].is_null()) {
      cfg.rate_limit = doc["rate_limit"].get<double>();
    }
    if (doc.contains("bind")) cfg.bind = parse_bind(doc["bind"].get<std::string>());
    if (doc.contains("score_transform") && !doc["score_transform"].is_null()) {
      const auto& t = doc["score_transform"];
      cfg.score_transform = ScoreTransform{t.value("scale", 1.0), t.value("offset", 0.0)};
    }
  } catch (const json::exception& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
  try {
    cfg.validate();
  } catch (const ConfigError& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
  return cfg;
}

namespace {

class TokenBucket {
 public:
  explicit TokenBucket(double rate)
      : rate_(rate), capacity_(std::max(1.0, rate)), tokens_(capacity_), last_(Clock::now()) {}

  /// 0 when a token was taken, otherwise milliseconds until one is available.
  std::int64_t take() {
    std::lock_guard lock(mu_);
    const auto now = Clock::now();
    const double elapsed = std::chrono::duration<double>(now - last_).count();
    last_ = now;
    tokens_ = std::min(capacity_, tokens_ + elapsed * rate_);
    if (tokens_ >= 1.0) {
      tokens_ -= 1.0;
      return 0;
    }
    return std::max<std::int64_t>(1, static_cast<std::int64_t>(std::ceil((1.0 - tokens_) / rate_ * 1000.0)));
  }

 private:
  using Clock = std::chrono::steady_clock;
  std::mutex mu_;
  double rate_;
  double capacity_;
  double tokens_;
  Clock::time_point last_;
};

void send_error(httplib::Response& res, int status, std::string kind, std::string detail,
                std::optional<std::int64_t> retry_after_ms = std::nullopt) {
  res.status = status;
  if (retry_after_ms && *retry_after_ms >= 0) {
    res.set_header("Retry-After", std::to_string((*retry_after_ms + 999) / 1000));
  }
  res.set_content(wire::encode_error({std::move(kind), std::move(detail), retry_after_ms}),
                  "application/json");
}

}  // namespace

struct VictimService::Impl {
  Impl(MlpModel m, ServiceConfig c)
      : cfg(std::move(c)),
        model(std::move(m)),
        oracle(model, cfg.mode, cfg.k, cfg.score_transform),
        ledger(cfg.budget) {
    if (cfg.rate_limit) bucket.emplace(*cfg.rate_limit);
    install_routes();
  }

  void install_routes();
  void classify(const httplib::Request& req, httplib::Response& res);
  void bind();

  ServiceConfig cfg;
  MlpModel model;
  ModelOracle oracle;
  QueryLedger ledger;
  std::optional<TokenBucket> bucket;
  httplib::Server server;
  std::thread worker;
  int bound_port = -1;
};

void VictimService::Impl::install_routes() {
  server.Post("/classify", [this](const httplib::Request& req, httplib::Response& res) {
    classify(req, res);
  });
  server.Get("/stats", [this](const httplib::Request&, httplib::Response& res) {
    res.set_content(wire::encode_stats({ledger.count(), cfg.budget}), "application/json");
  });
  server.set_error_handler([](const httplib::Request&, httplib::Response& res) {
    if (!res.body.empty()) return;
    const bool missing = res.status == 404;
    send_error(res, res.status, missing ? "not_found" : "error",
               missing ? "no such endpoint" : "request failed");
  });
  server.set_exception_handler(
      [](const httplib::Request&, httplib::Response& res, std::exception_ptr) {
        send_error(res, 500, "internal", "internal error");
      });
}

void VictimService::Impl::classify(const httplib::Request& req, httplib::Response& res) {
  wire::ClassifyRequest request;
  try {
    request = wire::decode_request(req.body);
  } catch (const ParseError& e) {
    send_error(res, 400, "bad_request", e.what());
    return;
  }
  if (request.image.shape() != model.input_shape) {
    send_error(res, 400, "bad_request", "image shape rejected");
    return;
  }
  if (request.mode && *request.mode != cfg.mode) {
    send_error(res, 400, "mode_unavailable",
               std::string("this service only answers \"") + wire::mode_name(cfg.mode) +
                   "\" requests");
    return;
  }
  if (bucket) {
    if (const auto wait = bucket->take(); wait > 0) {
      send_error(res, 429, "rate_limited", "too many requests", wait);
      return;
    }
  }
  try {
    ledger.charge(1);
  } catch (const BudgetExhausted&) {
    send_error(res, 429, "budget_exhausted", "query budget exhausted", -1);
    return;
  }
  res.set_content(wire::encode_output(oracle.classify(request.image)), "application/json");
}

void VictimService::Impl::bind() {
  const auto& b = cfg.bind;
  if (b.port == 0) {
    bound_port = server.bind_to_any_port(b.host);
  } else {
    bound_port = server.bind_to_port(b.host, b.port) ? b.port : -1;
  }
  if (bound_port < 0) {
    throw ConfigError("cannot bind " + b.host + ":" + std::to_string(b.port));
  }
}

VictimService::VictimService(ServiceConfig cfg) {
  cfg.validate();
  MlpModel model = load_model(cfg.model_path);
  impl_ = std::make_unique<Impl>(std::move(model), std::move(cfg));
}

VictimService::VictimService(MlpModel model, ServiceConfig cfg) {
  cfg.validate();
  model.validate();
  impl_ = std::make_unique<Impl>(std::move(model), std::move(cfg));
}

VictimService::~VictimService() { stop(); }

int VictimService::start() {
  impl_->bind();
  impl_->worker = std::thread([this] { impl_->server.listen_after_bind(); });
  impl_->server.wait_until_ready();
  return impl_->bound_port;
}

void VictimService::run() {
  impl_->bind();
  impl_->server.listen_after_bind();
}

void VictimService::stop() {
  if (!impl_) return;
  impl_->server.stop();
  if (impl_->worker.joinable()) impl_->worker.join();
}

int VictimService::port() const noexcept { return impl_->bound_port; }

std::int64_t VictimService::queries() const noexcept { return impl_->ledger.count(); }

}  // namespace nbx
