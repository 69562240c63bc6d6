#pragma once

// JSON bodies of the classification protocol.
//
//   POST /classify   {"image": {"shape": [h, w, c], "data": [...]}, "mode": "full" | "topk"}
//   200              {"full": [p0, p1, ...]}  or  {"topk": [{"label": 3, "score": 0.4}, ...]}
//   4xx / 5xx        {"error": {"kind": "...", "detail": "..."}}
//   429              the error body plus "retry_after_ms"
//   GET /stats       {"queries": n, "budget": b | null}
//
// Doubles are written in the shortest form that parses back to the same value.

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>

#include "nbx/image.hpp"
#include "nbx/oracle.hpp"

namespace nbx::wire {

struct ClassifyRequest {
  Image image;
  /// Absent when the client leaves the choice to the service.
  std::optional<OutputMode> mode;
};

struct ErrorBody {
  std::string kind;
  std::string detail;
  std::optional<std::int64_t> retry_after_ms;
};

struct Stats {
  std::int64_t queries = 0;
  std::optional<std::int64_t> budget;
};

const char* mode_name(OutputMode mode) noexcept;
/// Throws ParseError for anything but "full" or "topk".
OutputMode parse_mode(std::string_view name);

std::string encode_request(const Image& image, std::optional<OutputMode> mode);
/// Throws ParseError naming the offending field. Pixel values must be finite.
ClassifyRequest decode_request(std::string_view body);

std::string encode_output(const ClassifierOutput& output);
ClassifierOutput decode_output(std::string_view body);

std::string encode_error(const ErrorBody& error);
/// nullopt when `body` is not an error body.
std::optional<ErrorBody> decode_error(std::string_view body);

std::string encode_stats(const Stats& stats);
Stats decode_stats(std::string_view body);

}  // namespace nbx::wire
