#include "nbx/batch.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <fstream>
#include <mutex>
#include <ostream>
#include <sstream>
#include <thread>

#include "json.hpp"
#include "nbx/error.hpp"
#include "nbx/http_oracle.hpp"
#include "nbx/image_io.hpp"
#include "nbx/transforms.hpp"
#include "nbx/wire.hpp"

namespace nbx {

using nlohmann::json;

const char* to_string(AttackKind kind) noexcept {
  switch (kind) {
    case AttackKind::kTargeted: return "targeted";
    case AttackKind::kUntargeted: return "untargeted";
    case AttackKind::kPartialInfo: return "partial_info";
    case AttackKind::kEot: return "eot";
    case AttackKind::kLabelSet: return "label_set";
  }
  return "?";
}

AttackKind parse_attack_kind(const std::string& name) {
  for (AttackKind k : {AttackKind::kTargeted, AttackKind::kUntargeted, AttackKind::kPartialInfo,
                       AttackKind::kEot, AttackKind::kLabelSet}) {
    if (name == to_string(k)) return k;
  }
  throw ConfigError("unknown attack kind \"" + name +
                    "\" (expected targeted, untargeted, partial_info, eot or label_set)");
}

void OracleSpec::validate() const {
  if (model_path.has_value() == endpoint.has_value()) {
    throw ConfigError("oracle: give exactly one of a model path or an endpoint");
  }
  if (mode == OutputMode::kTopK && k < 1) throw ConfigError("oracle: k must be >= 1");
  if (score_transform && !(score_transform->scale > 0.0)) {
    throw ConfigError("oracle: score_transform.scale must be > 0");
  }
  if (num_classes && *num_classes < 2) throw ConfigError("oracle: num_classes must be >= 2");
}

namespace {

// Owns the model a ModelOracle refers to.
class OwningModelOracle final : public Oracle {
 public:
  OwningModelOracle(MlpModel model, OutputMode mode, int k, std::optional<ScoreTransform> t)
      : model_(std::move(model)), oracle_(model_, mode, k, t) {}
  ClassifierOutput classify(const Image& x) override { return oracle_.classify(x); }
  const MlpModel& model() const { return model_; }

 private:
  MlpModel model_;
  ModelOracle oracle_;
};

}  // namespace

LoadedOracle open_oracle(const OracleSpec& spec) {
  spec.validate();
  LoadedOracle out;
  if (spec.model_path) {
    MlpModel model = load_model(*spec.model_path);
    out.input_shape = model.input_shape;
    out.num_classes = model.num_classes;
    out.oracle = std::make_unique<OwningModelOracle>(std::move(model), spec.mode, spec.k,
                                                     spec.score_transform);
  } else {
    out.oracle = std::make_unique<HttpOracle>(*spec.endpoint, spec.mode);
    out.input_shape = spec.input_shape;
    out.num_classes = spec.num_classes;
  }
  return out;
}

void RunSpec::validate() const {
  oracle.validate();
  attack.validate();
  if (inputs.empty() && generated_inputs < 1) {
    throw ConfigError("run: no inputs (give input files or a generated count)");
  }
  if (!inputs.empty() && generated_inputs > 0) {
    throw ConfigError("run: give input files or a generated count, not both");
  }
  const std::size_t count = inputs.empty() ? static_cast<std::size_t>(generated_inputs) : inputs.size();
  if (!targets.empty() && targets.size() != count) {
    throw ConfigError("run: " + std::to_string(targets.size()) + " targets for " +
                      std::to_string(count) + " inputs");
  }
  if (kind == AttackKind::kPartialInfo) {
    if (oracle.mode != OutputMode::kTopK) throw ConfigError("run: partial_info needs a topk oracle");
    if (!attack.k) throw ConfigError("run: partial_info needs attack k");
    if (*attack.k != oracle.k) {
      throw ConfigError("run: attack k (" + std::to_string(*attack.k) + ") differs from oracle k (" +
                        std::to_string(oracle.k) + ")");
    }
  } else if (kind != AttackKind::kLabelSet && oracle.mode != OutputMode::kFull) {
    throw ConfigError(std::string("run: ") + to_string(kind) + " needs a full-output oracle");
  }
  if (kind == AttackKind::kEot && !attack.eot) throw ConfigError("run: eot needs eot settings");
  if (kind == AttackKind::kLabelSet && label_set.empty() && label_set_names.empty()) {
    throw ConfigError("run: label_set needs at least one label");
  }
  if (!label_set_names.empty() && !label_names) {
    throw ConfigError("run: label names given without a label_names file");
  }
  if (!(success_threshold >= 0.0 && success_threshold <= 1.0)) {
    throw ConfigError("run: success_threshold must be in [0, 1]");
  }
  if (workers < 1) throw ConfigError("run: workers must be >= 1");
  if (start_search_limit < 1) throw ConfigError("run: start_search_limit must be >= 1");
}

namespace {

template <typename T>
T get_field(const json& obj, const char* key, const std::string& where) {
  try {
    return obj.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ParseError(where + "." + key + ": " + e.what());
  }
}

EotConfig parse_eot(const json& j, const std::string& where) {
  EotConfig e;
  if (!j.is_object()) throw ParseError(where + ": expected an object");
  if (j.contains("theta_min")) e.theta_min = get_field<double>(j, "theta_min", where);
  if (j.contains("theta_max")) e.theta_max = get_field<double>(j, "theta_max", where);
  if (j.contains("m_samples")) e.m_samples = get_field<int>(j, "m_samples", where);
  if (j.contains("vote_samples")) e.vote_samples = get_field<int>(j, "vote_samples", where);
  if (j.contains("vote_threshold")) e.vote_threshold = get_field<double>(j, "vote_threshold", where);
  if (j.contains("fixed_angles")) e.fixed_angles = get_field<std::vector<double>>(j, "fixed_angles", where);
  return e;
}

AttackConfig parse_params(const json& j) {
  const std::string where = "params";
  AttackConfig c;
  if (!j.is_object()) throw ParseError("params: expected an object");
  for (const auto& [key, value] : j.items()) {
    if (key == "epsilon") c.epsilon = get_field<double>(j, "epsilon", where);
    else if (key == "lr") c.lr = get_field<double>(j, "lr", where);
    else if (key == "momentum") c.momentum = get_field<double>(j, "momentum", where);
    else if (key == "step") {
      const auto s = get_field<std::string>(j, "step", where);
      if (s != "sign" && s != "plain") throw ParseError("params.step: expected \"sign\" or \"plain\"");
      c.step = s == "sign" ? StepRule::kSign : StepRule::kPlain;
    } else if (key == "sigma") c.nes.sigma = get_field<double>(j, "sigma", where);
    else if (key == "samples") c.nes.n_samples = get_field<int>(j, "samples", where);
    else if (key == "seed") c.nes.seed = get_field<std::uint64_t>(j, "seed", where);
    else if (key == "threads") c.nes.threads = get_field<int>(j, "threads", where);
    else if (key == "max_queries") c.max_queries = get_field<std::int64_t>(j, "max_queries", where);
    else if (key == "k") c.k = get_field<int>(j, "k", where);
    else if (key == "eot") c.eot = parse_eot(value, "params.eot");
    else if (key == "partial") {
      const std::string w = "params.partial";
      if (value.contains("pgd_steps_per_round")) {
        c.partial.pgd_steps_per_round = get_field<int>(value, "pgd_steps_per_round", w);
      }
      if (value.contains("eps_decay")) c.partial.eps_decay = get_field<double>(value, "eps_decay", w);
      if (value.contains("max_rollbacks")) {
        c.partial.max_rollbacks = get_field<int>(value, "max_rollbacks", w);
      }
    } else {
      throw ParseError("params." + key + ": unknown setting");
    }
  }
  return c;
}

InputKind parse_input_kind(const std::string& s) {
  if (s == "uniform") return InputKind::kUniform;
  if (s == "smooth") return InputKind::kSmooth;
  if (s == "disk") return InputKind::kDisk;
  throw ParseError("inputs.generate.kind: expected uniform, smooth or disk");
}

}  // namespace

RunSpec load_run_spec(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open run spec " + path.string());
  std::stringstream text;
  text << in.rdbuf();
  json doc;
  try {
    doc = json::parse(text.str());
  } catch (const json::parse_error& e) {
    throw ParseError(path.string() + ": invalid JSON (" + e.what() + ")");
  }
  const auto base = path.parent_path();
  auto resolve = [&](const std::string& p) {
    std::filesystem::path fp(p);
    return fp.is_relative() ? base / fp : fp;
  };
  RunSpec spec;
  try {
    if (!doc.is_object()) throw ParseError("expected an object");
    spec.kind = parse_attack_kind(get_field<std::string>(doc, "attack", "run"));
    const json& o = doc.at("oracle");
    if (o.contains("model")) spec.oracle.model_path = resolve(get_field<std::string>(o, "model", "oracle"));
    if (o.contains("endpoint")) spec.oracle.endpoint = get_field<std::string>(o, "endpoint", "oracle");
    if (o.contains("mode")) spec.oracle.mode = wire::parse_mode(get_field<std::string>(o, "mode", "oracle"));
    if (o.contains("k")) spec.oracle.k = get_field<int>(o, "k", "oracle");
    if (o.contains("num_classes")) spec.oracle.num_classes = get_field<int>(o, "num_classes", "oracle");
    if (o.contains("input_shape")) {
      const auto s = get_field<std::vector<int>>(o, "input_shape", "oracle");
      if (s.size() != 3) throw ParseError("oracle.input_shape: expected [h, w, c]");
      spec.oracle.input_shape = Shape{s[0], s[1], s[2]};
    }
    if (o.contains("score_transform")) {
      const json& t = o.at("score_transform");
      spec.oracle.score_transform = ScoreTransform{t.value("scale", 1.0), t.value("offset", 0.0)};
    }
    const json& inputs = doc.at("inputs");
    if (inputs.contains("files")) {
      for (const auto& f : get_field<std::vector<std::string>>(inputs, "files", "inputs")) {
        spec.inputs.push_back(resolve(f));
      }
    }
    if (inputs.contains("generate")) {
      const json& g = inputs.at("generate");
      spec.generated_inputs = get_field<int>(g, "count", "inputs.generate");
      if (g.contains("seed")) spec.input_seed = get_field<std::uint64_t>(g, "seed", "inputs.generate");
      if (g.contains("kind")) spec.input_kind = parse_input_kind(get_field<std::string>(g, "kind", "inputs.generate"));
    }
    if (doc.contains("targets")) {
      const json& t = doc.at("targets");
      if (t.contains("labels")) spec.targets = get_field<std::vector<int>>(t, "labels", "targets");
      if (t.contains("seed")) spec.target_seed = get_field<std::uint64_t>(t, "seed", "targets");
    }
    if (doc.contains("label_set")) {
      for (const auto& v : doc.at("label_set")) {
        if (v.is_number_integer()) spec.label_set.insert(v.get<int>());
        else if (v.is_string()) spec.label_set_names.push_back(v.get<std::string>());
        else throw ParseError("label_set: entries must be label ids or names");
      }
    }
    if (doc.contains("label_names")) spec.label_names = resolve(get_field<std::string>(doc, "label_names", "run"));
    if (doc.contains("start_seed")) spec.start_seed = get_field<std::uint64_t>(doc, "start_seed", "run");
    if (doc.contains("start_search_limit")) {
      spec.start_search_limit = get_field<int>(doc, "start_search_limit", "run");
    }
    if (doc.contains("params")) spec.attack = parse_params(doc.at("params"));
    if (doc.contains("output")) spec.output_dir = resolve(get_field<std::string>(doc, "output", "run"));
    if (doc.contains("success_threshold")) {
      spec.success_threshold = get_field<double>(doc, "success_threshold", "run");
    }
    if (doc.contains("workers")) spec.workers = get_field<int>(doc, "workers", "run");
    if (doc.contains("verify_seed")) spec.verify_seed = get_field<std::uint64_t>(doc, "verify_seed", "run");
  } catch (const json::exception& e) {
    throw ParseError(path.string() + ": " + e.what());
  } catch (const Error& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
  return spec;
}

Condition parse_condition(const std::string& text) {
  const auto colon = text.find(':');
  const std::string name = text.substr(0, colon);
  const std::string arg = colon == std::string::npos ? "" : text.substr(colon + 1);
  auto number = [&](const std::string& s) {
    try {
      std::size_t used = 0;
      const int v = std::stoi(s, &used);
      if (used != s.size()) throw std::invalid_argument(s);
      return v;
    } catch (const std::exception&) {
      throw ConfigError("condition \"" + text + "\": \"" + s + "\" is not a label id");
    }
  };
  Condition c;
  if (arg.empty()) throw ConfigError("condition \"" + text + "\" needs a label argument");
  if (name == "target") {
    c.kind = Condition::Kind::kTarget;
    c.label = number(arg);
  } else if (name == "misclassified") {
    c.kind = Condition::Kind::kMisclassified;
    c.label = number(arg);
  } else if (name == "eot-target") {
    c.kind = Condition::Kind::kEotTarget;
    c.label = number(arg);
  } else if (name == "avoid") {
    c.kind = Condition::Kind::kAvoid;
    std::stringstream ss(arg);
    for (std::string part; std::getline(ss, part, ',');) c.labels.insert(number(part));
  } else {
    throw ConfigError("unknown condition \"" + text +
                      "\" (expected target:, misclassified:, avoid: or eot-target:)");
  }
  return c;
}

Verdict verify(const Image& adv, const Image& original, double eps, Oracle& oracle,
               const Condition& condition) {
  require_same_shape(adv, original, "verify");
  Verdict v;
  v.linf = linf_dist(adv, original);
  v.bound_ok = v.linf <= eps + kStorageTolerance;
  std::ostringstream detail;
  detail << "linf " << v.linf << (v.bound_ok ? " <= " : " > ") << eps << "; ";
  switch (condition.kind) {
    case Condition::Kind::kTarget:
    case Condition::Kind::kMisclassified: {
      const int top = oracle.classify(adv).top_label();
      const bool is_label = top == condition.label;
      v.condition_ok = condition.kind == Condition::Kind::kTarget ? is_label : !is_label;
      detail << "top label " << top;
      break;
    }
    case Condition::Kind::kAvoid: {
      const auto out = oracle.classify(adv);
      if (out.is_full()) {
        v.condition_ok = !condition.labels.contains(out.top_label());
      } else {
        v.condition_ok = std::none_of(condition.labels.begin(), condition.labels.end(),
                                      [&](int l) { return out.score_of(l).has_value(); });
      }
      detail << "top label " << out.top_label();
      break;
    }
    case Condition::Kind::kEotTarget: {
      Rng rng(condition.seed);
      int hits = 0;
      for (int i = 0; i < condition.eot.vote_samples; ++i) {
        hits += oracle.classify(rotate(adv, sample_theta(condition.eot, rng))).top_label() ==
                condition.label;
      }
      const double rate = static_cast<double>(hits) / condition.eot.vote_samples;
      v.condition_ok = rate >= condition.eot.vote_threshold;
      detail << "target on " << hits << "/" << condition.eot.vote_samples << " rotations";
      break;
    }
  }
  detail << (v.condition_ok ? " (condition holds)" : " (condition fails)");
  v.detail = detail.str();
  return v;
}

Verdict verify_files(const std::filesystem::path& adv, const std::filesystem::path& original,
                     double eps, Oracle& oracle, const Condition& condition) {
  return verify(read_image(adv), read_image(original), eps, oracle, condition);
}

std::vector<HistogramBin> query_histogram(const std::vector<InstanceResult>& rows, int bins) {
  std::vector<std::int64_t> q;
  for (const auto& r : rows) {
    if (r.success) q.push_back(r.queries);
  }
  std::vector<HistogramBin> out;
  if (q.empty() || bins < 1) return out;
  const double max = static_cast<double>(*std::max_element(q.begin(), q.end()));
  const double width = max / bins;
  for (int b = 0; b < bins; ++b) out.push_back({b * width, (b + 1) * width, 0});
  out.back().end = max;
  for (std::int64_t v : q) {
    int b = width > 0.0 ? static_cast<int>(static_cast<double>(v) / width) : 0;
    b = std::clamp(b, 0, bins - 1);
    ++out[static_cast<std::size_t>(b)].count;
  }
  return out;
}

namespace {

std::vector<std::string> read_label_names(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open label names file " + path.string());
  std::vector<std::string> names;
  for (std::string line; std::getline(in, line);) {
    while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
    names.push_back(line);
  }
  return names;
}

std::set<int> resolve_label_set(const RunSpec& spec) {
  std::set<int> labels = spec.label_set;
  if (!spec.label_set_names.empty()) {
    const auto names = read_label_names(*spec.label_names);
    for (const auto& want : spec.label_set_names) {
      const auto it = std::find(names.begin(), names.end(), want);
      if (it == names.end()) throw ConfigError("label name \"" + want + "\" not in " + spec.label_names->string());
      labels.insert(static_cast<int>(it - names.begin()));
    }
  }
  return labels;
}

// Rounds every value to float32, the precision files are stored at.
Image storage_precision(const Image& x) {
  Image out = x;
  for (double& v : out.data()) v = static_cast<double>(static_cast<float>(v));
  return out;
}

json config_json(const RunSpec& spec, const std::set<int>& labels) {
  const AttackConfig& a = spec.attack;
  json p;
  p["epsilon"] = a.epsilon;
  p["lr"] = a.lr;
  p["momentum"] = a.momentum;
  p["step"] = a.step == StepRule::kSign ? "sign" : "plain";
  p["sigma"] = a.nes.sigma;
  p["samples"] = a.nes.n_samples;
  p["seed"] = a.nes.seed;
  p["threads"] = a.nes.threads;
  p["max_queries"] = a.max_queries;
  if (a.k) p["k"] = *a.k;
  if (a.eot) {
    p["eot"] = {{"theta_min", a.eot->theta_min}, {"theta_max", a.eot->theta_max},
                {"m_samples", a.eot->m_samples}, {"vote_samples", a.eot->vote_samples},
                {"vote_threshold", a.eot->vote_threshold}};
    if (!a.eot->fixed_angles.empty()) p["eot"]["fixed_angles"] = a.eot->fixed_angles;
  }
  if (spec.kind == AttackKind::kPartialInfo) {
    p["partial"] = {{"pgd_steps_per_round", a.partial.pgd_steps_per_round},
                    {"eps_decay", a.partial.eps_decay},
                    {"max_rollbacks", a.partial.max_rollbacks}};
  }
  json j;
  j["attack"] = to_string(spec.kind);
  j["params"] = p;
  json o;
  if (spec.oracle.model_path) o["model"] = spec.oracle.model_path->string();
  if (spec.oracle.endpoint) o["endpoint"] = *spec.oracle.endpoint;
  o["mode"] = wire::mode_name(spec.oracle.mode);
  if (spec.oracle.mode == OutputMode::kTopK) o["k"] = spec.oracle.k;
  j["oracle"] = o;
  if (spec.inputs.empty()) {
    const char* kinds[] = {"uniform", "smooth", "disk"};
    j["inputs"] = {{"generate", {{"count", spec.generated_inputs}, {"seed", spec.input_seed},
                                 {"kind", kinds[static_cast<int>(spec.input_kind)]}}}};
  } else {
    std::vector<std::string> files;
    for (const auto& f : spec.inputs) files.push_back(f.string());
    j["inputs"] = {{"files", files}};
  }
  if (spec.targets.empty()) {
    j["targets"] = {{"seed", spec.target_seed}};
  } else {
    j["targets"] = {{"labels", spec.targets}};
  }
  if (!labels.empty()) j["label_set"] = labels;
  if (spec.kind == AttackKind::kPartialInfo) {
    j["start_seed"] = spec.start_seed;
    j["start_search_limit"] = spec.start_search_limit;
  }
  j["success_threshold"] = spec.success_threshold;
  j["workers"] = spec.workers;
  j["verify_seed"] = spec.verify_seed;
  return j;
}

std::string csv_number(double v) {
  std::ostringstream s;
  s.precision(17);
  s << v;
  return s.str();
}

}  // namespace

BatchReport run_batch(const RunSpec& spec, std::ostream* log) {
  spec.validate();
  const std::set<int> label_set = spec.kind == AttackKind::kLabelSet ? resolve_label_set(spec)
                                                                     : std::set<int>{};
  LoadedOracle loaded = open_oracle(spec.oracle);
  Oracle& oracle = *loaded.oracle;
  if (spec.inputs.empty() && !loaded.input_shape) {
    throw ConfigError("run: generated inputs need oracle.input_shape with an endpoint");
  }
  const bool needs_target = spec.kind == AttackKind::kTargeted || spec.kind == AttackKind::kEot ||
                            spec.kind == AttackKind::kPartialInfo;
  if (needs_target && spec.targets.empty() && !loaded.num_classes) {
    throw ConfigError("run: random targets need oracle.num_classes with an endpoint");
  }
  if (spec.kind == AttackKind::kPartialInfo && !loaded.input_shape) {
    throw ConfigError("run: partial_info start search needs oracle.input_shape with an endpoint");
  }
  std::filesystem::create_directories(spec.output_dir);

  const int count = spec.inputs.empty() ? spec.generated_inputs : static_cast<int>(spec.inputs.size());
  std::vector<InstanceResult> rows(static_cast<std::size_t>(count));
  std::mutex log_mu;
  auto note = [&](const std::string& line) {
    if (!log) return;
    std::lock_guard lock(log_mu);
    *log << line << '\n' << std::flush;
  };

  auto run_one = [&](int id) {
    InstanceResult& row = rows[static_cast<std::size_t>(id)];
    row.instance_id = id;
    try {
      Image x;
      if (spec.inputs.empty()) {
        Rng irng = Rng(spec.input_seed).split(static_cast<std::uint64_t>(id));
        x = storage_precision(random_input(spec.input_kind, *loaded.input_shape, irng));
      } else {
        x = read_image(spec.inputs[static_cast<std::size_t>(id)]);
      }
      const auto orig_path = spec.output_dir / ("orig_" + std::to_string(id) + ".nbt");
      write_nbt(orig_path, x);
      row.source_label = oracle.classify(x).top_label();

      int target = -1;
      if (!spec.targets.empty()) {
        target = spec.targets[static_cast<std::size_t>(id)];
      } else if (needs_target) {
        Rng trng = Rng(spec.target_seed).split(static_cast<std::uint64_t>(id));
        do {
          target = static_cast<int>(trng.below(static_cast<std::uint64_t>(*loaded.num_classes)));
        } while (target == row.source_label);
      }
      row.target = target;

      AttackConfig cfg = spec.attack;
      cfg.nes.seed = spec.attack.nes.seed + static_cast<std::uint64_t>(id);
      AttackResult r;
      Condition cond;
      double bound = cfg.epsilon;
      switch (spec.kind) {
        case AttackKind::kTargeted:
          r = targeted_attack(oracle, x, target, cfg);
          cond.kind = Condition::Kind::kTarget;
          cond.label = target;
          break;
        case AttackKind::kUntargeted: {
          const int true_label = spec.targets.empty() ? row.source_label : target;
          row.target = true_label;
          r = untargeted_attack(oracle, x, true_label, cfg);
          cond.kind = Condition::Kind::kMisclassified;
          cond.label = true_label;
          break;
        }
        case AttackKind::kLabelSet:
          r = label_set_attack(oracle, x, label_set, cfg);
          cond.kind = Condition::Kind::kAvoid;
          cond.labels = label_set;
          break;
        case AttackKind::kEot:
          r = eot_attack(oracle, x, target, cfg);
          cond.kind = Condition::Kind::kEotTarget;
          cond.label = target;
          cond.eot = *cfg.eot;
          cond.eot.vote_threshold = 0.9;
          cond.eot.fixed_angles.clear();
          cond.seed = Rng(spec.verify_seed).split(static_cast<std::uint64_t>(id)).next_u64();
          break;
        case AttackKind::kPartialInfo: {
          Rng srng = Rng(spec.start_seed).split(static_cast<std::uint64_t>(id));
          std::optional<Image> start;
          for (int tries = 0; tries < spec.start_search_limit && !start; ++tries) {
            Image cand = storage_precision(random_input(spec.input_kind, *loaded.input_shape, srng));
            if (oracle.classify(cand).top_label() == target) start = std::move(cand);
          }
          if (!start) {
            throw ConfigError("no starting image classified as " + std::to_string(target) + " in " +
                              std::to_string(spec.start_search_limit) + " candidates");
          }
          write_nbt(spec.output_dir / ("start_" + std::to_string(id) + ".nbt"), *start);
          r = partial_info_attack(oracle, x, *start, target, cfg);
          cond.kind = Condition::Kind::kTarget;
          cond.label = target;
          bound = r.epsilon_achieved;
          break;
        }
      }
      row.success = r.success;
      row.queries = r.queries;
      row.final_prob = r.final_target_prob;
      row.adversariality = r.adversariality;

      const Image adv = storage_precision(r.adv);
      row.linf = linf_dist(adv, x);
      const auto adv_path = spec.output_dir / ("adv_" + std::to_string(id) + ".nbt");
      write_nbt(adv_path, adv);
      write_png(spec.output_dir / ("adv_" + std::to_string(id) + ".png"), adv);
      if (row.success) {
        const Verdict v = verify_files(adv_path, orig_path, bound, oracle, cond);
        row.verified = v.ok();
        if (!v.ok()) note("instance " + std::to_string(id) + ": verification failed: " + v.detail);
      }
      note("instance " + std::to_string(id) + ": " + (row.success ? "success" : "failure") +
           " after " + std::to_string(row.queries) + " queries");
    } catch (const std::exception& e) {
      row.error = e.what();
      note("instance " + std::to_string(id) + ": error: " + row.error);
    }
  };

  const auto t0 = std::chrono::steady_clock::now();
  {
    std::atomic<int> next{0};
    std::vector<std::jthread> pool;
    const int n_workers = std::min(spec.workers, count);
    for (int w = 0; w < n_workers; ++w) {
      pool.emplace_back([&] {
        for (int id = next++; id < count; id = next++) run_one(id);
      });
    }
  }
  const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  BatchReport report;
  report.instances = std::move(rows);
  report.wall_seconds = wall;
  std::vector<std::int64_t> q;
  for (const auto& r : report.instances) {
    if (r.success) q.push_back(r.queries);
  }
  report.success_rate = static_cast<double>(q.size()) / count;
  if (!q.empty()) {
    double sum = 0.0;
    for (auto v : q) sum += static_cast<double>(v);
    report.mean_queries = sum / static_cast<double>(q.size());
    std::sort(q.begin(), q.end());
    const std::size_t m = q.size() / 2;
    report.median_queries = q.size() % 2 ? static_cast<double>(q[m])
                                         : 0.5 * static_cast<double>(q[m - 1] + q[m]);
  }
  report.met_threshold = report.success_rate >= spec.success_threshold;

  {
    std::ofstream csv(spec.output_dir / "results.csv");
    csv << "instance_id,success,queries,linf,final_prob,source_label,target,adversariality,verified,error\n";
    for (const auto& r : report.instances) {
      std::string err = r.error;
      std::replace(err.begin(), err.end(), '"', '\'');
      csv << r.instance_id << ',' << (r.success ? 1 : 0) << ',' << r.queries << ','
          << csv_number(r.linf) << ',' << (r.final_prob ? csv_number(*r.final_prob) : "") << ','
          << r.source_label << ',' << r.target << ','
          << (r.adversariality ? csv_number(*r.adversariality) : "") << ',' << (r.verified ? 1 : 0)
          << ",\"" << err << "\"\n";
    }
  }
  {
    std::ofstream hist(spec.output_dir / "histogram.csv");
    hist << "bin_start,bin_end,count\n";
    for (const auto& b : query_histogram(report.instances)) {
      hist << csv_number(b.start) << ',' << csv_number(b.end) << ',' << b.count << '\n';
    }
  }
  json summary;
  summary["config"] = config_json(spec, label_set);
  summary["instances"] = count;
  summary["successes"] = q.size();
  summary["success_rate"] = report.success_rate;
  summary["mean_queries"] = report.mean_queries ? json(*report.mean_queries) : json(nullptr);
  summary["median_queries"] = report.median_queries ? json(*report.median_queries) : json(nullptr);
  summary["errors"] = std::count_if(report.instances.begin(), report.instances.end(),
                                    [](const InstanceResult& r) { return !r.error.empty(); });
  summary["unverified_successes"] =
      std::count_if(report.instances.begin(), report.instances.end(),
                    [](const InstanceResult& r) { return r.success && !r.verified; });
  summary["wall_seconds"] = report.wall_seconds;
  summary["met_threshold"] = report.met_threshold;
  std::ofstream(spec.output_dir / "summary.json") << summary.dump(2) << '\n';
  return report;
}

}  // namespace nbx
