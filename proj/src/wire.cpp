#include "nbx/wire.hpp"

#include <cmath>

#include "json.hpp"
#include "nbx/error.hpp"

namespace nbx::wire {

using nlohmann::json;

namespace {

json parse_body(std::string_view body, const char* what) {
  try {
    return json::parse(body);
  } catch (const json::parse_error& e) {
    throw ParseError(std::string(what) + ": invalid JSON (" + e.what() + ")");
  }
}

const json& member(const json& obj, const char* key, const std::string& where) {
  if (!obj.is_object()) throw ParseError(where + ": expected an object");
  const auto it = obj.find(key);
  if (it == obj.end()) throw ParseError(where + "." + key + ": missing");
  return *it;
}

double number(const json& v, const std::string& where) {
  if (!v.is_number()) throw ParseError(where + ": expected a number");
  const double d = v.get<double>();
  if (!std::isfinite(d)) throw ParseError(where + ": not finite");
  return d;
}

int positive_int(const json& v, const std::string& where) {
  if (!v.is_number_integer() || v.get<std::int64_t>() < 1 || v.get<std::int64_t>() > (1 << 20)) {
    throw ParseError(where + ": expected a positive integer");
  }
  return v.get<int>();
}

}  // namespace

const char* mode_name(OutputMode mode) noexcept {
  return mode == OutputMode::kFull ? "full" : "topk";
}

OutputMode parse_mode(std::string_view name) {
  if (name == "full") return OutputMode::kFull;
  if (name == "topk") return OutputMode::kTopK;
  throw ParseError("mode: expected \"full\" or \"topk\", got \"" + std::string(name) + "\"");
}

std::string encode_request(const Image& image, std::optional<OutputMode> mode) {
  const Shape& s = image.shape();
  json body;
  body["image"]["shape"] = {s.height, s.width, s.channels};
  body["image"]["data"] = std::vector<double>(image.data().begin(), image.data().end());
  if (mode) body["mode"] = mode_name(*mode);
  return body.dump();
}

ClassifyRequest decode_request(std::string_view text) {
  const json body = parse_body(text, "request");
  const json& img = member(body, "image", "request");
  const json& shape = member(img, "shape", "request.image");
  if (!shape.is_array() || shape.size() != 3) {
    throw ParseError("request.image.shape: expected [height, width, channels]");
  }
  const Shape s{positive_int(shape[0], "request.image.shape[0]"),
                positive_int(shape[1], "request.image.shape[1]"),
                positive_int(shape[2], "request.image.shape[2]")};
  const json& data = member(img, "data", "request.image");
  if (!data.is_array()) throw ParseError("request.image.data: expected an array");
  if (data.size() != s.size()) {
    throw ParseError("request.image.data: " + std::to_string(data.size()) +
                     " values for shape " + to_string(s));
  }
  std::vector<double> values(data.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    values[i] = number(data[i], "request.image.data[" + std::to_string(i) + "]");
  }
  ClassifyRequest req{Image(s, std::move(values)), std::nullopt};
  if (const auto it = body.find("mode"); it != body.end()) {
    if (!it->is_string()) throw ParseError("request.mode: expected a string");
    req.mode = parse_mode(it->get<std::string>());
  }
  return req;
}

std::string encode_output(const ClassifierOutput& output) {
  json body;
  if (output.is_full()) {
    body["full"] = output.as_full().probs;
  } else {
    json entries = json::array();
    for (const auto& e : output.as_topk().entries) {
      entries.push_back({{"label", e.label}, {"score", e.score}});
    }
    body["topk"] = std::move(entries);
  }
  return body.dump();
}

ClassifierOutput decode_output(std::string_view text) {
  const json body = parse_body(text, "response");
  if (!body.is_object()) throw ParseError("response: expected an object");
  if (const auto it = body.find("full"); it != body.end()) {
    if (!it->is_array() || it->empty()) throw ParseError("response.full: expected a non-empty array");
    std::vector<double> probs(it->size());
    for (std::size_t i = 0; i < probs.size(); ++i) {
      probs[i] = number((*it)[i], "response.full[" + std::to_string(i) + "]");
    }
    return ClassifierOutput::full(std::move(probs));
  }
  if (const auto it = body.find("topk"); it != body.end()) {
    if (!it->is_array() || it->empty()) throw ParseError("response.topk: expected a non-empty array");
    std::vector<TopKEntry> entries;
    for (std::size_t i = 0; i < it->size(); ++i) {
      const std::string where = "response.topk[" + std::to_string(i) + "]";
      const json& label = member((*it)[i], "label", where);
      if (!label.is_number_integer()) throw ParseError(where + ".label: expected an integer");
      entries.push_back({label.get<int>(), number(member((*it)[i], "score", where), where + ".score")});
    }
    const int k = static_cast<int>(entries.size());
    return ClassifierOutput::topk(std::move(entries), k);
  }
  throw ParseError("response: neither \"full\" nor \"topk\" present");
}

std::string encode_error(const ErrorBody& error) {
  json body;
  body["error"] = {{"kind", error.kind}, {"detail", error.detail}};
  if (error.retry_after_ms) body["retry_after_ms"] = *error.retry_after_ms;
  return body.dump();
}

std::optional<ErrorBody> decode_error(std::string_view text) {
  const json body = json::parse(text, nullptr, false);
  if (body.is_discarded() || !body.is_object()) return std::nullopt;
  const auto it = body.find("error");
  if (it == body.end() || !it->is_object()) return std::nullopt;
  ErrorBody out;
  out.kind = it->value("kind", "");
  out.detail = it->value("detail", "");
  if (const auto r = body.find("retry_after_ms"); r != body.end() && r->is_number_integer()) {
    out.retry_after_ms = r->get<std::int64_t>();
  }
  return out;
}

std::string encode_stats(const Stats& stats) {
  json body;
  body["queries"] = stats.queries;
  body["budget"] = stats.budget ? json(*stats.budget) : json(nullptr);
  return body.dump();
}

Stats decode_stats(std::string_view text) {
  const json body = parse_body(text, "stats");
  const json& q = member(body, "queries", "stats");
  if (!q.is_number_integer()) throw ParseError("stats.queries: expected an integer");
  Stats s{q.get<std::int64_t>(), std::nullopt};
  const json& b = member(body, "budget", "stats");
  if (b.is_number_integer()) {
    s.budget = b.get<std::int64_t>();
  } else if (!b.is_null()) {
    throw ParseError("stats.budget: expected an integer or null");
  }
  return s;
}

}  // namespace nbx::wire
