#include "doctest.h"

#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "fixtures.hpp"
#include "json.hpp"
#include "nbx/batch.hpp"
#include "nbx/error.hpp"
#include "nbx/image_io.hpp"

using namespace nbx;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("nbx_test_batch_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

void write_text(const fs::path& path, const std::string& text) { std::ofstream(path) << text; }

std::string read_text(const fs::path& path) {
  std::ifstream in(path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

using CsvRow = std::map<std::string, std::string>;

// Plain comma split; the quoted error column is last and free of commas in these tests.
std::vector<CsvRow> read_csv(const fs::path& path) {
  std::ifstream in(path);
  std::string line;
  std::getline(in, line);
  std::vector<std::string> header;
  for (std::stringstream ss(line); std::getline(ss, line, ',');) header.push_back(line);
  std::vector<CsvRow> rows;
  while (std::getline(in, line)) {
    CsvRow row;
    std::stringstream ss(line);
    for (const auto& h : header) {
      std::string cell;
      std::getline(ss, cell, ',');
      row[h] = cell;
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

fs::path small_model(const fs::path& dir) {
  ModelGenOptions opt;
  opt.input_shape = Shape{8, 8, 1};
  opt.hidden = {32};
  opt.calibration_kind = InputKind::kSmooth;
  const auto path = dir / "model.json";
  save_model(path, generate_model(opt));
  return path;
}

RunSpec targeted_spec(const fs::path& dir, int count) {
  RunSpec spec;
  spec.kind = AttackKind::kTargeted;
  spec.oracle.model_path = small_model(dir);
  spec.generated_inputs = count;
  spec.input_seed = 3;
  spec.target_seed = 4;
  spec.attack.epsilon = 0.1;
  spec.attack.lr = 0.01;
  spec.attack.nes.n_samples = 50;
  spec.attack.max_queries = 20'000;
  spec.output_dir = dir / "out";
  return spec;
}

}  // namespace

TEST_CASE("an input already classified as the target costs one query") {
  const auto dir = scratch_dir("degenerate");
  RunSpec spec = targeted_spec(dir, 1);
  const MlpModel model = load_model(*spec.oracle.model_path);
  Rng rng(11);
  Image x = random_smooth_image(model.input_shape, rng);
  write_nbt(dir / "x.nbt", x);
  x = read_nbt(dir / "x.nbt");
  spec.generated_inputs = 0;
  spec.inputs = {dir / "x.nbt"};
  spec.targets = {testing::predicted(model, x)};
  spec.success_threshold = 1.0;

  const BatchReport report = run_batch(spec);
  REQUIRE(report.instances.size() == 1);
  CHECK(report.instances[0].success);
  CHECK(report.instances[0].queries == 1);
  CHECK(report.instances[0].verified);
  CHECK(report.success_rate == 1.0);
  CHECK(*report.mean_queries == 1.0);
  CHECK(report.met_threshold);
  CHECK(read_nbt(spec.output_dir / "adv_0.nbt") == x);
}

TEST_CASE("batch outputs agree with each other") {
  const auto dir = scratch_dir("outputs");
  RunSpec spec = targeted_spec(dir, 8);
  spec.workers = 3;
  const BatchReport report = run_batch(spec);
  const auto rows = read_csv(spec.output_dir / "results.csv");
  REQUIRE(rows.size() == 8);

  double sum = 0.0;
  int successes = 0;
  for (const auto& row : rows) {
    CHECK(row.at("error") == "\"\"");
    if (row.at("success") != "1") continue;
    ++successes;
    sum += std::stod(row.at("queries"));
    CHECK(row.at("verified") == "1");
  }
  REQUIRE(successes > 0);

  const auto summary = nlohmann::json::parse(read_text(spec.output_dir / "summary.json"));
  CHECK(summary["mean_queries"].get<double>() == doctest::Approx(sum / successes).epsilon(1e-12));
  CHECK(summary["success_rate"].get<double>() == doctest::Approx(successes / 8.0));
  CHECK(summary["config"]["params"]["epsilon"].get<double>() == 0.1);
  CHECK(report.success_rate == doctest::Approx(successes / 8.0));

  int binned = 0;
  for (const auto& b : read_csv(spec.output_dir / "histogram.csv")) binned += std::stoi(b.at("count"));
  CHECK(binned == successes);

  SUBCASE("every reported success verifies independently") {
    const MlpModel model = load_model(*spec.oracle.model_path);
    ModelOracle oracle(model, OutputMode::kFull, 1);
    for (const auto& row : rows) {
      if (row.at("success") != "1") continue;
      const std::string id = row.at("instance_id");
      const Image adv = read_nbt(spec.output_dir / ("adv_" + id + ".nbt"));
      const Image orig = read_nbt(spec.output_dir / ("orig_" + id + ".nbt"));
      CHECK(linf_dist(adv, orig) <= spec.attack.epsilon + kStorageTolerance);
      CHECK(testing::predicted(model, adv) == std::stoi(row.at("target")));
    }
  }
}

TEST_CASE("a batch reruns row for row") {
  const auto dir = scratch_dir("repro");
  RunSpec spec = targeted_spec(dir, 4);
  spec.workers = 2;
  run_batch(spec);
  const auto first = read_csv(spec.output_dir / "results.csv");
  spec.workers = 1;
  spec.output_dir = dir / "again";
  run_batch(spec);
  CHECK(read_csv(spec.output_dir / "results.csv") == first);
}

TEST_CASE("histogram bins cover the successful query counts") {
  std::vector<InstanceResult> rows(4);
  rows[0].success = true, rows[0].queries = 10;
  rows[1].success = true, rows[1].queries = 200;
  rows[2].success = false, rows[2].queries = 5000;
  rows[3].success = true, rows[3].queries = 95;
  const auto bins = query_histogram(rows, 20);
  REQUIRE(bins.size() == 20);
  CHECK(bins.front().start == 0.0);
  CHECK(bins.back().end == 200.0);
  CHECK(bins[1].count == 1);   // 10 in [10, 20)
  CHECK(bins[9].count == 1);   // 95 in [90, 100)
  CHECK(bins[19].count == 1);  // the maximum lands in the last bin
  int total = 0;
  for (const auto& b : bins) total += b.count;
  CHECK(total == 3);
}

TEST_CASE("verify checks the bound and the condition") {
  const MlpModel model = testing::linear_model(5);
  ModelOracle oracle(model, OutputMode::kFull, 1);
  Rng rng(9);
  const Image x = random_image(model.input_shape, rng);
  const int label = testing::predicted(model, x);

  Condition same;
  same.label = label;
  const Verdict v = verify(x, x, 0.0, oracle, same);
  CHECK(v.ok());
  CHECK(v.linf == 0.0);

  Condition other = parse_condition("misclassified:" + std::to_string(label));
  CHECK_FALSE(verify(x, x, 0.0, oracle, other).condition_ok);

  Image tampered = x;
  tampered[3] = tampered[3] > 0.5 ? tampered[3] - 0.2 : tampered[3] + 0.2;
  const Verdict t = verify(tampered, x, 0.05, oracle, same);
  CHECK_FALSE(t.bound_ok);
  CHECK(t.linf == doctest::Approx(0.2));
  CHECK(verify(tampered, x, 0.2, oracle, same).bound_ok);

  Image drifted = x;
  drifted[0] = drifted[0] > 0.5 ? drifted[0] - 0.5e-6 : drifted[0] + 0.5e-6;
  CHECK(verify(drifted, x, 0.0, oracle, same).bound_ok);
}

TEST_CASE("verify with a top-k oracle uses visibility for avoid") {
  const MlpModel model = testing::linear_model(6, 8, 5);
  ModelOracle oracle(model, OutputMode::kTopK, 2);
  Rng rng(2);
  const Image x = random_image(model.input_shape, rng);
  const auto full = classify_full(model, x);
  std::vector<int> order(5);
  for (int i = 0; i < 5; ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](int a, int b) { return full[a] > full[b]; });
  CHECK_FALSE(verify(x, x, 0.0, oracle, parse_condition("avoid:" + std::to_string(order[1]))).ok());
  CHECK(verify(x, x, 0.0, oracle,
               parse_condition("avoid:" + std::to_string(order[2]) + "," + std::to_string(order[4])))
            .ok());
}

TEST_CASE("conditions parse") {
  CHECK(parse_condition("target:3").kind == Condition::Kind::kTarget);
  CHECK(parse_condition("target:3").label == 3);
  CHECK(parse_condition("misclassified:2").kind == Condition::Kind::kMisclassified);
  CHECK(parse_condition("avoid:1,4").labels == std::set<int>{1, 4});
  CHECK(parse_condition("eot-target:7").kind == Condition::Kind::kEotTarget);
  CHECK_THROWS_AS(parse_condition("target"), ConfigError);
  CHECK_THROWS_AS(parse_condition("target:x"), ConfigError);
  CHECK_THROWS_AS(parse_condition("goal:3"), ConfigError);
}

TEST_CASE("run specs load from JSON") {
  const auto dir = scratch_dir("spec");
  write_text(dir / "labels.txt", "cat\ndog\nbird\n");
  write_text(dir / "run.json", R"({
    "attack": "label_set",
    "oracle": {"model": "m.json", "mode": "topk", "k": 2},
    "inputs": {"generate": {"count": 3, "seed": 12, "kind": "uniform"}},
    "label_set": [0, "bird"],
    "label_names": "labels.txt",
    "params": {"epsilon": 0.07, "lr": 0.002, "samples": 20, "step": "plain",
               "partial": {"pgd_steps_per_round": 4}},
    "output": "results",
    "success_threshold": 0.5,
    "workers": 2
  })");
  const RunSpec spec = load_run_spec(dir / "run.json");
  CHECK(spec.kind == AttackKind::kLabelSet);
  CHECK(*spec.oracle.model_path == dir / "m.json");
  CHECK(spec.oracle.mode == OutputMode::kTopK);
  CHECK(spec.oracle.k == 2);
  CHECK(spec.generated_inputs == 3);
  CHECK(spec.input_seed == 12);
  CHECK(spec.input_kind == InputKind::kUniform);
  CHECK(spec.label_set == std::set<int>{0});
  CHECK(spec.label_set_names == std::vector<std::string>{"bird"});
  CHECK(*spec.label_names == dir / "labels.txt");
  CHECK(spec.attack.epsilon == 0.07);
  CHECK(spec.attack.step == StepRule::kPlain);
  CHECK(spec.attack.nes.n_samples == 20);
  CHECK(spec.attack.partial.pgd_steps_per_round == 4);
  CHECK(spec.output_dir == dir / "results");
  CHECK(spec.workers == 2);

  write_text(dir / "bad.json", R"({"attack": "targeted", "oracle": {"model": "m.json"},
    "inputs": {"generate": {"count": 1}}, "params": {"epsilon": 0.1, "lrr": 0.01}})");
  CHECK_THROWS_WITH_AS(load_run_spec(dir / "bad.json"), doctest::Contains("params.lrr"), ParseError);
  write_text(dir / "broken.json", "{");
  CHECK_THROWS_AS(load_run_spec(dir / "broken.json"), ParseError);
  CHECK_THROWS_AS(load_run_spec(dir / "missing.json"), ParseError);
}

TEST_CASE("run spec validation") {
  RunSpec spec;
  spec.oracle.model_path = "m.json";
  spec.generated_inputs = 2;
  CHECK_NOTHROW(spec.validate());

  RunSpec both = spec;
  both.oracle.endpoint = "http://127.0.0.1:1";
  CHECK_THROWS_AS(both.validate(), ConfigError);

  RunSpec none = spec;
  none.generated_inputs = 0;
  CHECK_THROWS_AS(none.validate(), ConfigError);

  RunSpec targets = spec;
  targets.targets = {1, 2, 3};
  CHECK_THROWS_AS(targets.validate(), ConfigError);

  RunSpec partial = spec;
  partial.kind = AttackKind::kPartialInfo;
  CHECK_THROWS_AS(partial.validate(), ConfigError);
  partial.oracle.mode = OutputMode::kTopK;
  partial.oracle.k = 3;
  partial.attack.k = 3;
  CHECK_NOTHROW(partial.validate());
  partial.attack.k = 2;
  CHECK_THROWS_AS(partial.validate(), ConfigError);

  RunSpec topk_targeted = spec;
  topk_targeted.oracle.mode = OutputMode::kTopK;
  CHECK_THROWS_AS(topk_targeted.validate(), ConfigError);

  RunSpec eot = spec;
  eot.kind = AttackKind::kEot;
  CHECK_THROWS_AS(eot.validate(), ConfigError);

  RunSpec threshold = spec;
  threshold.success_threshold = 1.5;
  CHECK_THROWS_AS(threshold.validate(), ConfigError);

  CHECK(parse_attack_kind("partial_info") == AttackKind::kPartialInfo);
  CHECK_THROWS_AS(parse_attack_kind("boundary"), ConfigError);
}

TEST_CASE("label names resolve and unknown names fail before any work") {
  const auto dir = scratch_dir("names");
  RunSpec spec;
  spec.kind = AttackKind::kLabelSet;
  spec.oracle.model_path = small_model(dir);
  spec.generated_inputs = 2;
  spec.label_names = dir / "labels.txt";
  spec.attack.epsilon = 0.1;
  spec.attack.nes.n_samples = 20;
  spec.attack.max_queries = 2000;
  spec.output_dir = dir / "out";
  std::string names;
  for (int i = 0; i < 10; ++i) names += "class" + std::to_string(i) + "\n";
  write_text(dir / "labels.txt", names);

  spec.label_set_names = {"class4", "class9"};
  run_batch(spec);
  const auto summary = nlohmann::json::parse(read_text(spec.output_dir / "summary.json"));
  CHECK(summary["config"]["label_set"] == nlohmann::json::array({4, 9}));

  spec.label_set_names = {"class4", "zebra"};
  spec.output_dir = dir / "out2";
  CHECK_THROWS_WITH_AS(run_batch(spec), doctest::Contains("zebra"), ConfigError);
  CHECK_FALSE(fs::exists(spec.output_dir / "results.csv"));
}

TEST_CASE("per-instance failures are recorded, not thrown") {
  const auto dir = scratch_dir("failures");
  RunSpec spec = targeted_spec(dir, 1);
  spec.generated_inputs = 0;
  spec.inputs = {dir / "absent.nbt"};
  spec.targets = {0};
  const BatchReport report = run_batch(spec);
  REQUIRE(report.instances.size() == 1);
  CHECK_FALSE(report.instances[0].success);
  CHECK_FALSE(report.instances[0].error.empty());
  CHECK(report.success_rate == 0.0);
  CHECK_FALSE(report.mean_queries);
}
