#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "nbx/attacks.hpp"
#include "nbx/model.hpp"
#include "nbx/oracle.hpp"

namespace nbx {

enum class AttackKind { kTargeted, kUntargeted, kPartialInfo, kEot, kLabelSet };

const char* to_string(AttackKind kind) noexcept;
/// "targeted", "untargeted", "partial_info", "eot" or "label_set". Throws ConfigError.
AttackKind parse_attack_kind(const std::string& name);

/// Where queries go: a model file served in-process, or a running victim service.
struct OracleSpec {
  std::optional<std::filesystem::path> model_path;
  std::optional<std::string> endpoint;
  OutputMode mode = OutputMode::kFull;
  int k = 1;
  std::optional<ScoreTransform> score_transform;  // in-process top-k only
  /// Needed with an endpoint when inputs are generated or targets drawn at random.
  std::optional<Shape> input_shape;
  std::optional<int> num_classes;

  void validate() const;
};

/// A ready oracle plus what is known about the classifier behind it.
struct LoadedOracle {
  std::unique_ptr<Oracle> oracle;
  std::optional<Shape> input_shape;
  std::optional<int> num_classes;
};

/// Loads the model or connects to the endpoint. The returned oracle is thread-safe.
LoadedOracle open_oracle(const OracleSpec& spec);

/// One batch of independent attack instances.
struct RunSpec {
  AttackKind kind = AttackKind::kTargeted;
  OracleSpec oracle;

  /// Explicit input images (PNG or NBT1). When empty, `generated_inputs` images are
  /// drawn with random_input(input_kind, ...) from Rng(input_seed).split(instance id).
  std::vector<std::filesystem::path> inputs;
  int generated_inputs = 0;
  std::uint64_t input_seed = 0;
  InputKind input_kind = InputKind::kDisk;

  /// Per-instance targets. When empty, each instance draws a label other than the
  /// input's current top label from Rng(target_seed).split(instance id).
  std::vector<int> targets;
  std::uint64_t target_seed = 0;

  /// label_set attacks: ids, plus names resolved through `label_names` (one name per
  /// line, line i naming label i).
  std::set<int> label_set;
  std::vector<std::string> label_set_names;
  std::optional<std::filesystem::path> label_names;

  /// partial_info: starting images are generated with Rng(start_seed).split(...) until
  /// one is classified as the target, trying at most start_search_limit candidates.
  std::uint64_t start_seed = 1;
  int start_search_limit = 5000;

  /// Instance i runs with attack.nes.seed + i.
  AttackConfig attack;
  std::filesystem::path output_dir = "nbx-out";
  /// Success rate needed for a zero exit status.
  double success_threshold = 0.0;
  /// Instances attacked concurrently.
  int workers = 1;
  /// Seed of the fresh rotations used when verifying EOT results.
  std::uint64_t verify_seed = 0x5eed;

  void validate() const;
};

/// Reads a JSON run spec; see README for the schema. Throws ParseError.
RunSpec load_run_spec(const std::filesystem::path& path);

/// What a verified adversarial example must satisfy.
struct Condition {
  enum class Kind {
    kTarget,        // top label == label
    kMisclassified, // top label != label
    kAvoid,         // top label outside `labels` (full) / none of `labels` visible (top-k)
    kEotTarget,     // top label == label on >= eot.vote_threshold of eot.vote_samples rotations
  };
  Kind kind = Kind::kTarget;
  int label = 0;
  std::set<int> labels;
  EotConfig eot;
  std::uint64_t seed = 0;
};

/// "target:3", "misclassified:2", "avoid:1,4,7" or "eot-target:3". Throws ConfigError.
Condition parse_condition(const std::string& text);

struct Verdict {
  double linf = 0.0;
  bool bound_ok = false;
  bool condition_ok = false;
  std::string detail;
  bool ok() const noexcept { return bound_ok && condition_ok; }
};

/// Slack on the l-infinity bound for images stored as 32-bit floats.
inline constexpr double kStorageTolerance = 1e-6;

/// Recomputes the l-infinity distance and re-queries the oracle.
Verdict verify(const Image& adv, const Image& original, double eps, Oracle& oracle,
               const Condition& condition);
Verdict verify_files(const std::filesystem::path& adv, const std::filesystem::path& original,
                     double eps, Oracle& oracle, const Condition& condition);

struct InstanceResult {
  int instance_id = 0;
  bool success = false;
  std::int64_t queries = 0;
  double linf = 0.0;
  std::optional<double> final_prob;
  int source_label = -1;
  int target = -1;
  std::optional<double> adversariality;
  /// Outcome of re-verifying the written files; false when the attack failed.
  bool verified = false;
  /// Set when the instance could not run (I/O, oracle or setup failure).
  std::string error;
};

struct BatchReport {
  std::vector<InstanceResult> instances;  // ordered by instance_id
  double success_rate = 0.0;
  std::optional<double> mean_queries;     // over successes
  std::optional<double> median_queries;   // over successes
  double wall_seconds = 0.0;
  bool met_threshold = false;
};

/// Runs every instance, writing into spec.output_dir:
///   orig_<id>.nbt, adv_<id>.nbt, adv_<id>.png, results.csv, histogram.csv, summary.json.
/// Per-instance failures are recorded, never thrown. Spec errors throw before any work.
BatchReport run_batch(const RunSpec& spec, std::ostream* log = nullptr);

/// 20 equal-width bins over [0, max] of the successful instances' query counts.
struct HistogramBin {
  double start = 0.0;
  double end = 0.0;
  int count = 0;
};
std::vector<HistogramBin> query_histogram(const std::vector<InstanceResult>& rows, int bins = 20);

}  // namespace nbx
