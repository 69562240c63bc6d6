#include <atomic>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <future>
#include <thread>
#include <vector>

#include "doctest.h"
#include "httplib.h"
#include "nbx/error.hpp"
#include "nbx/http_oracle.hpp"
#include "nbx/model.hpp"
#include "nbx/service.hpp"
#include "nbx/wire.hpp"

using namespace nbx;

namespace {

MlpModel small_model(std::uint64_t seed, int classes = 10) {
  ModelGenOptions opt;
  opt.seed = seed;
  opt.input_shape = Shape{6, 5, 2};
  opt.hidden = {12};
  opt.num_classes = classes;
  opt.calibration_inputs = 32;
  return generate_model(opt);
}

ServiceConfig local_config(OutputMode mode = OutputMode::kFull, int k = 1) {
  ServiceConfig cfg;
  cfg.mode = mode;
  cfg.k = k;
  cfg.bind = BindAddress{"127.0.0.1", 0};
  return cfg;
}

std::string url(const VictimService& s) { return "http://127.0.0.1:" + std::to_string(s.port()); }

struct RawResponse {
  int status = 0;
  std::string body;
};

RawResponse post_raw(const VictimService& s, const std::string& body) {
  httplib::Client client("127.0.0.1", s.port());
  auto res = client.Post("/classify", body, "application/json");
  REQUIRE(res);
  return {res->status, res->body};
}

}  // namespace

TEST_CASE("wire requests round-trip exactly") {
  Rng rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    const Image x = random_image(Shape{3, 4, 2}, rng);
    const auto mode = trial % 3 == 0 ? std::nullopt
                                     : std::optional(trial % 2 ? OutputMode::kFull : OutputMode::kTopK);
    const auto back = wire::decode_request(wire::encode_request(x, mode));
    CHECK(back.image == x);
    CHECK(back.mode == mode);
  }
}

TEST_CASE("wire outputs round-trip exactly") {
  Rng rng(2);
  std::vector<double> probs(12);
  double total = 0.0;
  for (double& p : probs) total += (p = rng.uniform() + 1e-300);
  for (double& p : probs) p /= total;
  const auto full = ClassifierOutput::full(probs);
  CHECK(wire::decode_output(wire::encode_output(full)).as_full().probs == probs);

  const auto top = truncate_topk(probs, 4, ScoreTransform{3.0, -0.25});
  const auto back = wire::decode_output(wire::encode_output(top));
  CHECK(back.as_topk().entries == top.as_topk().entries);
}

TEST_CASE("malformed requests name the offending field") {
  auto message = [](const std::string& body) {
    try {
      wire::decode_request(body);
    } catch (const ParseError& e) {
      return std::string(e.what());
    }
    return std::string("no error");
  };
  CHECK(message("not json").find("invalid JSON") != std::string::npos);
  CHECK(message("{}").find("request.image") != std::string::npos);
  CHECK(message(R"({"image":{"shape":[1,2],"data":[0,0]}})").find("shape") != std::string::npos);
  CHECK(message(R"({"image":{"shape":[1,2,1],"data":[0]}})").find("request.image.data") !=
        std::string::npos);
  CHECK(message(R"({"image":{"shape":[1,2,1],"data":[0,"a"]}})").find("data[1]") !=
        std::string::npos);
  CHECK(message(R"({"image":{"shape":[1,1,1],"data":[0]},"mode":"logits"})").find("mode") !=
        std::string::npos);
  CHECK(message(R"({"image":{"shape":[0,1,1],"data":[]}})").find("shape[0]") != std::string::npos);
}

TEST_CASE("error and stats bodies") {
  const auto e = wire::decode_error(wire::encode_error({"rate_limited", "slow down", 250}));
  REQUIRE(e);
  CHECK(e->kind == "rate_limited");
  CHECK(e->detail == "slow down");
  CHECK(e->retry_after_ms == 250);
  CHECK_FALSE(wire::decode_error(R"({"full":[1]})"));
  CHECK_FALSE(wire::decode_error("garbage"));

  CHECK(wire::encode_stats({3, std::nullopt}) == R"({"budget":null,"queries":3})");
  const auto s = wire::decode_stats(R"({"queries": 7, "budget": 9})");
  CHECK(s.queries == 7);
  CHECK(s.budget == 9);
}

TEST_CASE("bind addresses") {
  const auto b = parse_bind("0.0.0.0:9000");
  CHECK(b.host == "0.0.0.0");
  CHECK(b.port == 9000);
  CHECK_THROWS_AS(parse_bind("localhost"), ConfigError);
  CHECK_THROWS_AS(parse_bind("localhost:http"), ConfigError);
  CHECK_THROWS_AS(parse_bind("localhost:70000"), ConfigError);
  CHECK_THROWS_AS(parse_bind(":80"), ConfigError);

  ::setenv("NBX_BIND", "127.0.0.2:1234", 1);
  const auto env = bind_from_env();
  ::unsetenv("NBX_BIND");
  REQUIRE(env);
  CHECK(env->host == "127.0.0.2");
  CHECK(env->port == 1234);
  CHECK_FALSE(bind_from_env());
}

TEST_CASE("service config files") {
  const auto dir = std::filesystem::temp_directory_path() / "nbx_test_net_config";
  std::filesystem::create_directories(dir);
  save_model(dir / "m.json", small_model(3));
  {
    std::ofstream(dir / "svc.json") << R"({"model": "m.json", "mode": "topk", "k": 3,
      "budget": 12, "rate_limit": 4.5, "bind": "127.0.0.1:0",
      "score_transform": {"scale": 2, "offset": 1}})";
  }
  const auto cfg = load_service_config(dir / "svc.json");
  CHECK(cfg.model_path == dir / "m.json");
  CHECK(cfg.mode == OutputMode::kTopK);
  CHECK(cfg.k == 3);
  CHECK(cfg.budget == 12);
  CHECK(cfg.rate_limit == 4.5);
  CHECK(cfg.bind.port == 0);
  REQUIRE(cfg.score_transform);
  CHECK(cfg.score_transform->scale == 2.0);

  VictimService service(cfg);
  CHECK(service.start() > 0);
  service.stop();

  { std::ofstream(dir / "bad.json") << R"({"model": "m.json", "k": "three"})"; }
  CHECK_THROWS_AS(load_service_config(dir / "bad.json"), ParseError);
  { std::ofstream(dir / "bad2.json") << R"({"model": "m.json", "mode": "topk", "k": 0})"; }
  CHECK_THROWS_AS(load_service_config(dir / "bad2.json"), ParseError);
  { std::ofstream(dir / "bad3.json") << R"({"mode": "full"})"; }
  CHECK_THROWS_AS(load_service_config(dir / "bad3.json"), ParseError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("full-mode service matches in-process classification") {
  const MlpModel model = small_model(4);
  VictimService service(model, local_config());
  service.start();
  HttpOracle remote(url(service), OutputMode::kFull);
  Rng rng(4);
  for (int i = 0; i < 25; ++i) {
    const Image x = random_image(model.input_shape, rng);
    const auto local = classify_full(model, x);
    const auto wire = remote.classify(x).as_full().probs;
    REQUIRE(wire.size() == local.size());
    for (std::size_t c = 0; c < local.size(); ++c) CHECK(std::fabs(wire[c] - local[c]) <= 1e-12);
  }
  CHECK(service.queries() == 25);
  CHECK(fetch_stats(url(service)).queries == 25);
}

TEST_CASE("top-k service matches truncation of the local output") {
  const MlpModel model = small_model(5);
  const ScoreTransform transform{5.0, -2.0};
  auto cfg = local_config(OutputMode::kTopK, 3);
  cfg.score_transform = transform;
  VictimService service(model, cfg);
  service.start();
  HttpOracle remote(url(service));
  Rng rng(5);
  for (int i = 0; i < 20; ++i) {
    const Image x = random_image(model.input_shape, rng);
    const auto want = truncate_topk(classify_full(model, x), 3, transform).as_topk().entries;
    const auto got = remote.classify(x).as_topk().entries;
    REQUIRE(got.size() == want.size());
    for (std::size_t j = 0; j < want.size(); ++j) {
      CHECK(got[j].label == want[j].label);
      CHECK(std::fabs(got[j].score - want[j].score) <= 1e-12);
    }
  }
}

TEST_CASE("budget is enforced exactly under a concurrent burst") {
  const MlpModel model = small_model(6);
  auto cfg = local_config();
  cfg.budget = 5;
  VictimService service(model, cfg);
  service.start();
  const Image x(model.input_shape);
  std::vector<std::future<int>> replies;
  for (int i = 0; i < 50; ++i) {
    replies.push_back(std::async(std::launch::async, [&] {
      HttpOracle remote(url(service));
      try {
        remote.classify(x);
        return 200;
      } catch (const OracleError& e) {
        if (e.kind() != OracleErrorKind::kRateLimited) MESSAGE(std::string(e.what()));
        return e.kind() == OracleErrorKind::kRateLimited ? 429 : -1;
      }
    }));
  }
  int ok = 0, limited = 0;
  for (auto& r : replies) {
    const int status = r.get();
    ok += status == 200;
    limited += status == 429;
  }
  CHECK(ok == 5);
  CHECK(limited == 45);
  CHECK(service.queries() == 5);

  const auto after = post_raw(service, wire::encode_request(x, std::nullopt));
  CHECK(after.status == 429);
  const auto body = wire::decode_error(after.body);
  REQUIRE(body);
  CHECK(body->kind == "budget_exhausted");
  CHECK(body->retry_after_ms.has_value());
  const auto stats = fetch_stats(url(service));
  CHECK(stats.queries == 5);
  CHECK(stats.budget == 5);
}

TEST_CASE("stats count exactly the successful classifications") {
  const MlpModel model = small_model(7);
  VictimService service(model, local_config());
  service.start();
  CHECK(fetch_stats(url(service)).queries == 0);
  CHECK_FALSE(fetch_stats(url(service)).budget.has_value());

  std::atomic<int> successes{0};
  std::vector<std::thread> clients;
  for (int t = 0; t < 10; ++t) {
    clients.emplace_back([&, t] {
      HttpOracle remote(url(service));
      Rng rng(100 + t);
      for (int i = 0; i < 10; ++i) {
        // Every third request has the wrong shape and must not be counted.
        const Shape shape = i % 3 == 0 ? Shape{2, 2, 1} : model.input_shape;
        try {
          remote.classify(random_image(shape, rng));
          ++successes;
        } catch (const OracleError&) {
        }
      }
    });
  }
  for (auto& c : clients) c.join();
  CHECK(successes.load() == 60);
  CHECK(fetch_stats(url(service)).queries == successes.load());
}

TEST_CASE("rejected requests reveal nothing about the model") {
  const MlpModel model = small_model(8);
  VictimService service(model, local_config());
  service.start();

  const auto wrong_shape = post_raw(service, wire::encode_request(Image(Shape{2, 2, 1}), std::nullopt));
  CHECK(wrong_shape.status == 400);
  CHECK(wrong_shape.body.find(to_string(model.input_shape)) == std::string::npos);
  CHECK(wrong_shape.body.find("logit") == std::string::npos);

  const auto wrong_mode = post_raw(service, wire::encode_request(Image(model.input_shape), OutputMode::kTopK));
  CHECK(wrong_mode.status == 400);
  CHECK(wire::decode_error(wrong_mode.body)->kind == "mode_unavailable");

  const auto garbage = post_raw(service, "{");
  CHECK(garbage.status == 400);
  CHECK(wire::decode_error(garbage.body)->kind == "bad_request");

  httplib::Client client("127.0.0.1", service.port());
  auto missing = client.Get("/weights");
  REQUIRE(missing);
  CHECK(missing->status == 404);
  CHECK(wire::decode_error(missing->body)->kind == "not_found");
  CHECK(service.queries() == 0);

  HttpOracle remote(url(service), OutputMode::kTopK);
  try {
    remote.classify(Image(model.input_shape));
    FAIL("expected an error");
  } catch (const OracleError& e) {
    CHECK(e.kind() == OracleErrorKind::kHttpStatus);
    CHECK(e.status() == 400);
  }
}

TEST_CASE("rate limiting answers 429 with a retry hint") {
  const MlpModel model = small_model(9);
  auto cfg = local_config();
  cfg.rate_limit = 2.0;
  VictimService service(model, cfg);
  service.start();
  HttpOracle remote(url(service));
  const Image x(model.input_shape);
  int ok = 0;
  std::int64_t retry = -1;
  for (int i = 0; i < 6; ++i) {
    try {
      remote.classify(x);
      ++ok;
    } catch (const OracleError& e) {
      REQUIRE(e.kind() == OracleErrorKind::kRateLimited);
      retry = e.retry_after_ms();
    }
  }
  CHECK(ok >= 2);
  CHECK(ok <= 3);
  CHECK(retry > 0);
  CHECK(retry <= 500);
  std::this_thread::sleep_for(std::chrono::milliseconds(retry + 50));
  CHECK_NOTHROW(remote.classify(x));
  CHECK(service.queries() == ok + 1);
}

TEST_CASE("client error kinds") {
  int port = 0;
  {
    httplib::Server probe;
    port = probe.bind_to_any_port("127.0.0.1");
  }
  HttpOracle dead("http://127.0.0.1:" + std::to_string(port), std::nullopt,
                  std::chrono::milliseconds(500));
  try {
    dead.classify(Image(Shape{1, 1, 1}));
    FAIL("expected an error");
  } catch (const OracleError& e) {
    CHECK(e.kind() == OracleErrorKind::kTransport);
  }

  httplib::Server fake;
  fake.Post("/api/classify", [](const httplib::Request&, httplib::Response& res) {
    res.set_content(R"({"probabilities": [1.0]})", "application/json");
  });
  fake.Post("/teapot/classify", [](const httplib::Request&, httplib::Response& res) {
    res.status = 418;
    res.set_content("short and stout", "text/plain");
  });
  const int fake_port = fake.bind_to_any_port("127.0.0.1");
  std::thread worker([&] { fake.listen_after_bind(); });
  fake.wait_until_ready();
  const std::string base = "http://127.0.0.1:" + std::to_string(fake_port);
  try {
    HttpOracle(base + "/api/").classify(Image(Shape{1, 1, 1}));
    FAIL("expected an error");
  } catch (const OracleError& e) {
    CHECK(e.kind() == OracleErrorKind::kMalformedBody);
  }
  try {
    HttpOracle(base + "/teapot").classify(Image(Shape{1, 1, 1}));
    FAIL("expected an error");
  } catch (const OracleError& e) {
    CHECK(e.kind() == OracleErrorKind::kHttpStatus);
    CHECK(e.status() == 418);
  }
  fake.stop();
  worker.join();

  CHECK_THROWS_AS(HttpOracle("ftp://example"), ConfigError);
  CHECK_THROWS_AS(HttpOracle("http://"), ConfigError);
}
