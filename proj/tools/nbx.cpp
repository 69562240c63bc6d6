// nbx: batch attacks, verification, the victim service and model generation.

#include <csignal>
#include <cstdio>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "nbx/batch.hpp"
#include "nbx/error.hpp"
#include "nbx/image_io.hpp"
#include "nbx/model.hpp"
#include "nbx/service.hpp"
#include "nbx/wire.hpp"

using namespace nbx;

namespace {

constexpr int kExitThresholdMissed = 1;
constexpr int kExitUsage = 2;

Shape parse_shape(const std::string& text) {
  std::vector<int> dims;
  std::stringstream ss(text);
  for (std::string part; std::getline(ss, part, ',');) dims.push_back(std::stoi(part));
  if (dims.size() != 3) throw ConfigError("shape must be h,w,c, got \"" + text + "\"");
  return Shape{dims[0], dims[1], dims[2]};
}

InputKind parse_kind(const std::string& s) {
  if (s == "uniform") return InputKind::kUniform;
  if (s == "smooth") return InputKind::kSmooth;
  if (s == "disk") return InputKind::kDisk;
  throw ConfigError("input kind must be uniform, smooth or disk");
}

// Optional flag values; set ones override the config file.
struct AttackFlags {
  std::string config, attack, model, endpoint, mode, output, input_kind, step, label_names, shape;
  std::vector<std::string> inputs, label_set;
  std::vector<int> targets;
  std::optional<int> k, generate, samples, threads, workers, classes, eot_samples, vote_samples,
      pgd_steps, rollbacks;
  std::optional<std::uint64_t> input_seed, target_seed, seed, start_seed;
  std::optional<double> epsilon, lr, momentum, sigma, threshold, theta_min, theta_max,
      vote_threshold, eps_decay;
  std::optional<std::int64_t> max_queries;
};

void add_attack_flags(CLI::App* cmd, AttackFlags& f) {
  cmd->add_option("-c,--config", f.config, "JSON run spec; flags below override it");
  cmd->add_option("--attack", f.attack, "targeted, untargeted, partial_info, eot or label_set");
  cmd->add_option("--model", f.model, "model file to attack in-process");
  cmd->add_option("--endpoint", f.endpoint, "victim service URL, e.g. http://127.0.0.1:8080");
  cmd->add_option("--mode", f.mode, "oracle output mode: full or topk");
  cmd->add_option("--k", f.k, "top-k size (oracle and attack)");
  cmd->add_option("--classes", f.classes, "number of classes (endpoint only)");
  cmd->add_option("--shape", f.shape, "input shape h,w,c (endpoint only)");
  cmd->add_option("--inputs", f.inputs, "input images (PNG or NBT1)");
  cmd->add_option("--generate", f.generate, "number of generated inputs");
  cmd->add_option("--input-seed", f.input_seed, "seed of generated inputs");
  cmd->add_option("--input-kind", f.input_kind, "uniform, smooth or disk");
  cmd->add_option("--targets", f.targets, "one target label per input");
  cmd->add_option("--target-seed", f.target_seed, "seed of random targets");
  cmd->add_option("--label-set", f.label_set, "label ids or names for label_set attacks");
  cmd->add_option("--label-names", f.label_names, "file with one label name per line");
  cmd->add_option("--start-seed", f.start_seed, "seed of partial_info starting images");
  cmd->add_option("--epsilon", f.epsilon, "l-infinity bound");
  cmd->add_option("--lr", f.lr, "step size");
  cmd->add_option("--momentum", f.momentum, "momentum in [0, 1)");
  cmd->add_option("--step", f.step, "sign or plain");
  cmd->add_option("--sigma", f.sigma, "NES search standard deviation");
  cmd->add_option("--samples", f.samples, "NES samples per gradient estimate (even)");
  cmd->add_option("--seed", f.seed, "NES seed of instance 0");
  cmd->add_option("--threads", f.threads, "threads per gradient estimate");
  cmd->add_option("--max-queries", f.max_queries, "query budget per instance");
  cmd->add_option("--theta-min", f.theta_min, "EOT rotation lower bound, degrees");
  cmd->add_option("--theta-max", f.theta_max, "EOT rotation upper bound, degrees");
  cmd->add_option("--eot-samples", f.eot_samples, "rotations per EOT loss evaluation");
  cmd->add_option("--vote-samples", f.vote_samples, "rotations in the EOT success vote");
  cmd->add_option("--vote-threshold", f.vote_threshold, "EOT success vote threshold");
  cmd->add_option("--pgd-steps", f.pgd_steps, "partial_info PGD steps per round");
  cmd->add_option("--eps-decay", f.eps_decay, "partial_info epsilon shrink factor");
  cmd->add_option("--rollbacks", f.rollbacks, "partial_info rejected shrinks per round");
  cmd->add_option("-o,--output", f.output, "output directory");
  cmd->add_option("--threshold", f.threshold, "success rate needed for exit status 0");
  cmd->add_option("--workers", f.workers, "instances attacked concurrently");
}

RunSpec build_spec(const AttackFlags& f) {
  RunSpec s = f.config.empty() ? RunSpec{} : load_run_spec(f.config);
  if (!f.attack.empty()) s.kind = parse_attack_kind(f.attack);
  if (!f.model.empty()) {
    s.oracle.model_path = f.model;
    s.oracle.endpoint.reset();
  }
  if (!f.endpoint.empty()) {
    s.oracle.endpoint = f.endpoint;
    s.oracle.model_path.reset();
  }
  if (!f.mode.empty()) s.oracle.mode = wire::parse_mode(f.mode);
  if (f.k) {
    s.oracle.k = *f.k;
    s.attack.k = *f.k;
  }
  if (f.classes) s.oracle.num_classes = *f.classes;
  if (!f.shape.empty()) s.oracle.input_shape = parse_shape(f.shape);
  if (!f.inputs.empty()) {
    s.inputs.assign(f.inputs.begin(), f.inputs.end());
    s.generated_inputs = 0;
  }
  if (f.generate) {
    s.generated_inputs = *f.generate;
    s.inputs.clear();
  }
  if (f.input_seed) s.input_seed = *f.input_seed;
  if (!f.input_kind.empty()) s.input_kind = parse_kind(f.input_kind);
  if (!f.targets.empty()) s.targets = f.targets;
  if (f.target_seed) s.target_seed = *f.target_seed;
  if (!f.label_set.empty()) {
    s.label_set.clear();
    s.label_set_names.clear();
    for (const auto& l : f.label_set) {
      if (!l.empty() && std::all_of(l.begin(), l.end(), ::isdigit)) {
        s.label_set.insert(std::stoi(l));
      } else {
        s.label_set_names.push_back(l);
      }
    }
  }
  if (!f.label_names.empty()) s.label_names = f.label_names;
  if (f.start_seed) s.start_seed = *f.start_seed;
  AttackConfig& a = s.attack;
  if (f.epsilon) a.epsilon = *f.epsilon;
  if (f.lr) a.lr = *f.lr;
  if (f.momentum) a.momentum = *f.momentum;
  if (!f.step.empty()) {
    if (f.step != "sign" && f.step != "plain") throw ConfigError("--step must be sign or plain");
    a.step = f.step == "sign" ? StepRule::kSign : StepRule::kPlain;
  }
  if (f.sigma) a.nes.sigma = *f.sigma;
  if (f.samples) a.nes.n_samples = *f.samples;
  if (f.seed) a.nes.seed = *f.seed;
  if (f.threads) a.nes.threads = *f.threads;
  if (f.max_queries) a.max_queries = *f.max_queries;
  const bool eot_flag = f.theta_min || f.theta_max || f.eot_samples || f.vote_samples || f.vote_threshold;
  if (s.kind == AttackKind::kEot && !a.eot) a.eot = EotConfig{};
  if (eot_flag) {
    if (!a.eot) a.eot = EotConfig{};
    if (f.theta_min) a.eot->theta_min = *f.theta_min;
    if (f.theta_max) a.eot->theta_max = *f.theta_max;
    if (f.eot_samples) a.eot->m_samples = *f.eot_samples;
    if (f.vote_samples) a.eot->vote_samples = *f.vote_samples;
    if (f.vote_threshold) a.eot->vote_threshold = *f.vote_threshold;
  }
  if (f.pgd_steps) a.partial.pgd_steps_per_round = *f.pgd_steps;
  if (f.eps_decay) a.partial.eps_decay = *f.eps_decay;
  if (f.rollbacks) a.partial.max_rollbacks = *f.rollbacks;
  if (!f.output.empty()) s.output_dir = f.output;
  if (f.threshold) s.success_threshold = *f.threshold;
  if (f.workers) s.workers = *f.workers;
  return s;
}

int run_attack(const AttackFlags& f) {
  const RunSpec spec = build_spec(f);
  const BatchReport report = run_batch(spec, &std::cerr);
  int successes = 0, errors = 0;
  for (const auto& r : report.instances) {
    successes += r.success;
    errors += !r.error.empty();
  }
  std::printf("attack        %s\n", to_string(spec.kind));
  std::printf("instances     %zu\n", report.instances.size());
  std::printf("success rate  %.4f (%d/%zu)\n", report.success_rate, successes, report.instances.size());
  if (report.mean_queries) {
    std::printf("mean queries  %.1f (over successes)\n", *report.mean_queries);
    std::printf("median        %.1f\n", *report.median_queries);
  } else {
    std::printf("mean queries  n/a\n");
  }
  if (errors) std::printf("errors        %d (see results.csv)\n", errors);
  std::printf("wall clock    %.1f s\n", report.wall_seconds);
  std::printf("output        %s\n", spec.output_dir.string().c_str());
  std::printf("threshold     %.4f %s\n", spec.success_threshold, report.met_threshold ? "met" : "missed");
  return report.met_threshold ? 0 : kExitThresholdMissed;
}

struct VerifyFlags {
  std::string adv, original, model, endpoint, mode = "full", condition;
  double eps = 0.0;
  int k = 1;
  std::uint64_t seed = 0x5eed;
  double theta_min = -30.0, theta_max = 30.0, vote_threshold = 0.9;
  int vote_samples = 100;
};

int run_verify(const VerifyFlags& f) {
  OracleSpec os;
  if (!f.model.empty()) os.model_path = f.model;
  if (!f.endpoint.empty()) os.endpoint = f.endpoint;
  os.mode = wire::parse_mode(f.mode);
  os.k = f.k;
  LoadedOracle oracle = open_oracle(os);
  Condition cond = parse_condition(f.condition);
  cond.seed = f.seed;
  cond.eot.theta_min = f.theta_min;
  cond.eot.theta_max = f.theta_max;
  cond.eot.vote_samples = f.vote_samples;
  cond.eot.vote_threshold = f.vote_threshold;
  cond.eot.validate();
  const Verdict v = verify_files(f.adv, f.original, f.eps, *oracle.oracle, cond);
  std::printf("bound      %s (linf %.9g, eps %.9g)\n", v.bound_ok ? "holds" : "VIOLATED", v.linf, f.eps);
  std::printf("condition  %s\n", v.condition_ok ? "holds" : "FAILS");
  std::printf("detail     %s\n", v.detail.c_str());
  std::printf("verdict    %s\n", v.ok() ? "PASS" : "FAIL");
  return v.ok() ? 0 : 1;
}

struct ServeFlags {
  std::string config, model, mode, bind;
  std::optional<int> k;
  std::optional<std::int64_t> budget;
  std::optional<double> rate_limit, scale, offset;
};

VictimService* g_service = nullptr;

void on_signal(int) {
  if (g_service) g_service->stop();
}

int run_serve(const ServeFlags& f) {
  ServiceConfig cfg = f.config.empty() ? ServiceConfig{} : load_service_config(f.config);
  if (!f.model.empty()) cfg.model_path = f.model;
  if (!f.mode.empty()) cfg.mode = wire::parse_mode(f.mode);
  if (f.k) cfg.k = *f.k;
  if (f.budget) cfg.budget = *f.budget;
  if (f.rate_limit) cfg.rate_limit = *f.rate_limit;
  if (f.scale || f.offset) {
    ScoreTransform t = cfg.score_transform.value_or(ScoreTransform{});
    if (f.scale) t.scale = *f.scale;
    if (f.offset) t.offset = *f.offset;
    cfg.score_transform = t;
  }
  if (!f.bind.empty()) {
    cfg.bind = parse_bind(f.bind);
  } else if (const auto env = bind_from_env()) {
    cfg.bind = *env;
  }
  if (cfg.model_path.empty()) throw ConfigError("serve: no model (use --model or a config file)");
  VictimService service(cfg);
  g_service = &service;
  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
  std::fprintf(stderr, "serving %s on %s:%d (%s%s)\n", cfg.model_path.string().c_str(),
               cfg.bind.host.c_str(), cfg.bind.port, wire::mode_name(cfg.mode),
               cfg.mode == OutputMode::kTopK ? (", k=" + std::to_string(cfg.k)).c_str() : "");
  service.run();
  g_service = nullptr;
  std::fprintf(stderr, "stopped after %lld queries\n", static_cast<long long>(service.queries()));
  return 0;
}

struct GenFlags {
  std::uint64_t seed = 0;
  std::string out, shape = "16,16,1", calibration = "disk";
  std::vector<int> hidden{64};
  int classes = 10;
  double weight_scale = 1.0;
  int calibration_inputs = 512;
};

int run_model_gen(const GenFlags& f) {
  ModelGenOptions opt;
  opt.seed = f.seed;
  opt.input_shape = parse_shape(f.shape);
  opt.hidden = f.hidden;
  opt.num_classes = f.classes;
  opt.weight_scale = f.weight_scale;
  opt.calibration_inputs = f.calibration_inputs;
  opt.calibration_kind = parse_kind(f.calibration);
  const MlpModel model = generate_model(opt);
  save_model(f.out, model);
  std::printf("wrote %s: input %s, %zu layers, %d classes\n", f.out.c_str(),
              to_string(model.input_shape).c_str(), model.layers.size(), model.num_classes);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Black-box adversarial attacks with NES gradient estimates"};
  app.require_subcommand(1);

  AttackFlags attack;
  auto* attack_cmd = app.add_subcommand("attack", "run a batch of attacks");
  add_attack_flags(attack_cmd, attack);

  VerifyFlags verify;
  auto* verify_cmd = app.add_subcommand("verify", "check an adversarial example");
  verify_cmd->add_option("--adv", verify.adv, "adversarial image")->required();
  verify_cmd->add_option("--original", verify.original, "original image")->required();
  verify_cmd->add_option("--eps", verify.eps, "l-infinity bound")->required();
  verify_cmd->add_option("--condition", verify.condition,
                         "target:L, misclassified:L, avoid:L1,L2 or eot-target:L")
      ->required();
  auto* vm = verify_cmd->add_option("--model", verify.model, "model file");
  auto* ve = verify_cmd->add_option("--endpoint", verify.endpoint, "victim service URL");
  vm->excludes(ve);
  verify_cmd->add_option("--mode", verify.mode, "full or topk");
  verify_cmd->add_option("--k", verify.k, "top-k size for an in-process topk oracle");
  verify_cmd->add_option("--seed", verify.seed, "seed of the rotations for eot-target");
  verify_cmd->add_option("--theta-min", verify.theta_min, "eot-target rotation lower bound");
  verify_cmd->add_option("--theta-max", verify.theta_max, "eot-target rotation upper bound");
  verify_cmd->add_option("--vote-samples", verify.vote_samples, "eot-target rotations");
  verify_cmd->add_option("--vote-threshold", verify.vote_threshold, "eot-target threshold");

  ServeFlags serve;
  auto* serve_cmd = app.add_subcommand("serve", "run the victim service");
  serve_cmd->add_option("-c,--config", serve.config, "JSON service config; flags override it");
  serve_cmd->add_option("--model", serve.model, "model file");
  serve_cmd->add_option("--mode", serve.mode, "full or topk");
  serve_cmd->add_option("--k", serve.k, "top-k size");
  serve_cmd->add_option("--budget", serve.budget, "total successful classifications allowed");
  serve_cmd->add_option("--rate-limit", serve.rate_limit, "requests per second");
  serve_cmd->add_option("--scale", serve.scale, "top-k score transform scale");
  serve_cmd->add_option("--offset", serve.offset, "top-k score transform offset");
  serve_cmd->add_option("--bind", serve.bind, "host:port (default: NBX_BIND, then config)");

  GenFlags gen;
  auto* model_cmd = app.add_subcommand("model", "model utilities");
  model_cmd->require_subcommand(1);
  auto* gen_cmd = model_cmd->add_subcommand("gen", "write a seeded random MLP");
  gen_cmd->add_option("--seed", gen.seed, "generator seed");
  gen_cmd->add_option("-o,--out", gen.out, "output model file")->required();
  gen_cmd->add_option("--shape", gen.shape, "input shape h,w,c");
  gen_cmd->add_option("--hidden", gen.hidden, "hidden layer widths")->delimiter(',');
  gen_cmd->add_option("--classes", gen.classes, "number of classes");
  gen_cmd->add_option("--weight-scale", gen.weight_scale, "weight multiplier");
  gen_cmd->add_option("--calibration", gen.calibration, "uniform, smooth or disk");
  gen_cmd->add_option("--calibration-inputs", gen.calibration_inputs, "0 disables calibration");

  CLI11_PARSE(app, argc, argv);
  try {
    if (attack_cmd->parsed()) return run_attack(attack);
    if (verify_cmd->parsed()) {
      if (verify.model.empty() == verify.endpoint.empty()) {
        throw ConfigError("verify: give --model or --endpoint");
      }
      return run_verify(verify);
    }
    if (serve_cmd->parsed()) return run_serve(serve);
    if (gen_cmd->parsed()) return run_model_gen(gen);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "nbx: %s\n", e.what());
    return kExitUsage;
  }
  return kExitUsage;
}
