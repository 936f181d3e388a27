#include "iclcal/cli.hpp"

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "iclcal/error.hpp"
#include "iclcal/eval.hpp"
#include "iclcal/remote.hpp"
#include "iclcal/tasks.hpp"
#include "iclcal/zo.hpp"

namespace iclcal::cli {
namespace {

using nlohmann::json;
using ordered_json = nlohmann::ordered_json;

constexpr int kConfigVersion = 1;

struct RunConfig {
  CalibConfig calib;
  std::string backend = "toy";
  std::string endpoint;
  double timeout_seconds = 30.0;
  int max_retries = 2;
  std::uint64_t toy_seed = 0;
  std::size_t embed_dim = 16;
  std::size_t max_new = 32;
  int jobs = 1;
  std::string task_file;
  std::string out;
  std::string trajectory_out;
};

// Values given on the command line; they win over the config file.
struct GlobalFlags {
  std::string config;
  std::string backend;
  std::string endpoint;
  std::optional<std::uint64_t> seed;
  std::optional<int> jobs;
  std::string out;
};

[[noreturn]] void invalid(const std::string& what) {
  throw Error(ErrorCode::InvalidArgument, what);
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) invalid("cannot read " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::InvalidArgument, "cannot write " + path);
  out << content;
}

RunConfig load_config(const GlobalFlags& flags) {
  RunConfig cfg;
  if (!flags.config.empty()) {
    json j;
    try {
      j = json::parse(read_file(flags.config));
    } catch (const json::exception& e) {
      invalid("config " + flags.config + " is not valid JSON: " + e.what());
    }
    if (!j.is_object()) invalid("config must be a JSON object");
    static const std::set<std::string> known = {
        "version",    "backend",        "endpoint",      "timeout_seconds", "max_retries",
        "toy_seed",   "embed_dim",      "mu",            "n_samples",       "step_size",
        "cosine_threshold", "gate_threshold", "max_steps", "patience",      "seed",
        "alpha",      "beta",           "gamma",         "q",               "max_new",
        "jobs",       "task_file",      "out",           "trajectory_out"};
    for (const auto& [key, _] : j.items()) {
      if (!known.count(key)) invalid("unknown config key '" + key + "'");
    }
    if (!j.contains("version") || j["version"] != kConfigVersion) {
      invalid("config version must be " + std::to_string(kConfigVersion));
    }
    try {
      auto get = [&](const char* key, auto& field) {
        if (j.contains(key)) j.at(key).get_to(field);
      };
      get("backend", cfg.backend);
      get("endpoint", cfg.endpoint);
      get("timeout_seconds", cfg.timeout_seconds);
      get("max_retries", cfg.max_retries);
      get("toy_seed", cfg.toy_seed);
      get("embed_dim", cfg.embed_dim);
      get("mu", cfg.calib.mu);
      get("n_samples", cfg.calib.n_samples);
      get("step_size", cfg.calib.step_size);
      get("cosine_threshold", cfg.calib.cosine_threshold);
      get("gate_threshold", cfg.calib.gate_threshold);
      get("max_steps", cfg.calib.max_steps);
      get("patience", cfg.calib.patience);
      get("seed", cfg.calib.seed);
      get("alpha", cfg.calib.weights.alpha);
      get("beta", cfg.calib.weights.beta);
      get("gamma", cfg.calib.weights.gamma);
      get("q", cfg.calib.weights.q);
      get("max_new", cfg.max_new);
      get("jobs", cfg.jobs);
      get("task_file", cfg.task_file);
      get("out", cfg.out);
      get("trajectory_out", cfg.trajectory_out);
    } catch (const json::exception& e) {
      invalid(std::string("config field has the wrong type: ") + e.what());
    }
  }
  if (!flags.backend.empty()) cfg.backend = flags.backend;
  if (!flags.endpoint.empty()) cfg.endpoint = flags.endpoint;
  if (cfg.endpoint.empty()) {
    if (const char* env = std::getenv("ICL_CAL_ENDPOINT")) cfg.endpoint = env;
  }
  if (flags.seed) cfg.calib.seed = *flags.seed;
  if (flags.jobs) cfg.jobs = *flags.jobs;
  if (!flags.out.empty()) cfg.out = flags.out;

  if (cfg.backend != "toy" && cfg.backend != "remote") {
    invalid("backend must be 'toy' or 'remote'");
  }
  if (cfg.backend == "remote" && cfg.endpoint.empty()) {
    invalid("remote backend needs --endpoint or ICL_CAL_ENDPOINT");
  }
  if (cfg.embed_dim < 1) invalid("embed_dim must be >= 1");
  if (cfg.max_new < 1) invalid("max_new must be >= 1");
  if (cfg.jobs < 1) invalid("jobs must be >= 1");
  cfg.calib.validate();
  return cfg;
}

std::unique_ptr<LogProbProvider> make_provider(const RunConfig& cfg) {
  if (cfg.backend == "remote") {
    RemoteEndpoint ep;
    ep.base_url = cfg.endpoint;
    ep.timeout_seconds = cfg.timeout_seconds;
    ep.max_retries = cfg.max_retries;
    return std::make_unique<RemoteProvider>(ep);
  }
  return std::make_unique<ToyCausalMeanModel>(
      make_task_toy_model(Vocab::toy(), cfg.embed_dim, cfg.toy_seed));
}

TokenizedPrompt load_prompt(const std::string& path) {
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::exception& e) {
    invalid("prompt file " + path + " is not valid JSON: " + e.what());
  }
  if (j.is_object() && j.contains("token_ids")) {
    TokenizedPrompt p;
    try {
      p.token_ids = j.at("token_ids").get<std::vector<TokenId>>();
      p.demo_output_spans = j.at("demo_output_spans").get<std::vector<std::vector<std::size_t>>>();
      p.query_start = j.at("query_start").get<std::size_t>();
    } catch (const json::exception& e) {
      invalid(std::string("malformed prompt: ") + e.what());
    }
    p.validate();
    return p;
  }
  // Otherwise a task record, rendered with the toy vocabulary.
  return render_prompt(task_from_json_line(j.dump()), Vocab::toy());
}

ordered_json iteration_json(const IterationRecord& r) {
  ordered_json j;
  j["type"] = "iteration";
  j["step"] = r.step;
  j["f_base"] = r.f_base;
  j["C_bar"] = r.breakdown.mean_confidence;
  j["R"] = r.breakdown.robustness;
  j["G"] = r.breakdown.info_gain;
  j["grad_norm_pre"] = r.grad_norm_pre_clip;
  j["grad_norm_post"] = r.grad_norm_post_clip;
  j["rows_projected"] = r.rows_projected;
  j["is_new_best"] = r.is_new_best;
  return j;
}

ordered_json summary_json(const CalibrationResult& r) {
  ordered_json j;
  j["type"] = "summary";
  j["initial_score"] = r.initial_score;
  j["best_score"] = r.best_score;
  j["gate_skipped"] = r.gate_skipped;
  j["iterations_run"] = r.iterations.size();
  return j;
}

void emit(std::ostream& fallback, const std::string& path, const std::string& content) {
  if (path.empty() || path == "-") {
    fallback << content;
  } else {
    write_file(path, content);
  }
}

int cmd_calibrate(const GlobalFlags& flags, const std::string& prompt_path, std::ostream& out) {
  const auto cfg = load_config(flags);
  const auto prompt = load_prompt(prompt_path);
  const auto provider = make_provider(cfg);
  const auto result = calibrate(prompt, *provider, cfg.calib);
  std::string text;
  for (const auto& r : result.iterations) text += iteration_json(r).dump() + "\n";
  text += summary_json(result).dump() + "\n";
  emit(out, cfg.out, text);
  return kExitOk;
}

struct TaskgenArgs {
  std::string kind = "duplication_check";
  long long n = 10;
  long long n_demos = 4;
  long long hash_len = 3;
};

int cmd_taskgen(const GlobalFlags& flags, const TaskgenArgs& args, std::ostream& out) {
  const TaskKind kind = task_kind_from_name(args.kind);
  if (args.n < 0) invalid("--n must be >= 0");
  if (args.n_demos < 3) invalid("--n-demos must be >= 3");
  if (args.hash_len < 2) invalid("--hash-len must be >= 2");
  const std::uint64_t seed = flags.seed.value_or(0);
  std::string text;
  for (long long i = 0; i < args.n; ++i) {
    const auto task = gen_task(kind, static_cast<std::size_t>(args.n_demos),
                               static_cast<std::size_t>(args.hash_len),
                               derive_seed(seed, static_cast<std::uint64_t>(i)));
    text += task_to_json_line(task) + "\n";
  }
  emit(out, flags.out, text);
  return kExitOk;
}

int cmd_eval(const GlobalFlags& flags, std::string tasks_path, bool calibrate_flag,
             std::string trajectory_path, std::ostream& out) {
  auto cfg = load_config(flags);
  if (tasks_path.empty()) tasks_path = cfg.task_file;
  if (tasks_path.empty()) invalid("no task file given");
  if (trajectory_path.empty()) trajectory_path = cfg.trajectory_out;

  std::ifstream in(tasks_path);
  if (!in) invalid("cannot read " + tasks_path);
  const auto tasks = read_tasks(in);
  if (tasks.empty()) invalid("task file " + tasks_path + " has no tasks");

  const auto provider = make_provider(cfg);
  std::string trajectory;
  EvalOptions options;
  options.calibrate = calibrate_flag;
  options.max_new = cfg.max_new;
  options.jobs = cfg.jobs;
  options.on_result = [&](std::size_t task, const CalibrationResult& r) {
    for (const auto& rec : r.iterations) {
      auto j = iteration_json(rec);
      j["task"] = task;
      trajectory += j.dump() + "\n";
    }
    auto j = summary_json(r);
    j["task"] = task;
    trajectory += j.dump() + "\n";
  };
  const auto report = evaluate(tasks, Vocab::toy(), *provider, cfg.calib, options);

  const std::string report_text = report_to_json(report);
  if (!cfg.out.empty() && cfg.out != "-") write_file(cfg.out, report_text);
  if (!trajectory_path.empty()) write_file(trajectory_path, trajectory);

  char line[160];
  std::snprintf(line, sizeof line, "n=%zu base_acc=%.4f calib_acc=%.4f mcnemar_p=%.6g\n",
                report.n, report.accuracy_base, report.accuracy_calibrated, report.mcnemar_p);
  out << line;
  if (cfg.out == "-") out << report_text;
  return kExitOk;
}

ProviderMeta load_meta(const std::string& path) {
  ProviderMeta m;
  try {
    const auto j = json::parse(read_file(path));
    m.vocab_size = j.at("vocab_size").get<std::size_t>();
    m.embed_dim = j.at("embed_dim").get<std::size_t>();
    m.mean_row_norm = j.at("mean_row_norm").get<double>();
    m.max_context = j.value("max_context", std::size_t{0});
  } catch (const json::exception& e) {
    invalid("malformed meta file " + path + ": " + e.what());
  }
  m.validate();
  return m;
}

int cmd_scale_params(const std::string& ref_path, const std::string& target_path, double mu_ref,
                     double eta_ref, std::ostream& out) {
  const auto [mu, eta] = scale_hyperparams(mu_ref, eta_ref, load_meta(ref_path),
                                           load_meta(target_path));
  char line[128];
  std::snprintf(line, sizeof line, "mu %.6g\neta %.6g\n", mu, eta);
  out << line;
  return kExitOk;
}

int exit_code_for(ErrorCode code) {
  switch (code) {
    case ErrorCode::InvalidArgument:
    case ErrorCode::InvalidPrompt:
    case ErrorCode::UnmappableSymbol:
    case ErrorCode::OutOfVocab:
    case ErrorCode::DegenerateInput:
      return kExitValidation;
    default:
      return kExitBackend;
  }
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Test-time in-context calibration by zeroth-order embedding ascent", "iclcal"};
  app.require_subcommand(1);
  app.fallthrough();

  GlobalFlags flags;
  std::uint64_t seed = 0;
  int jobs = 1;
  app.add_option("--config", flags.config, "JSON run configuration");
  app.add_option("--backend", flags.backend, "Model backend")->check(CLI::IsMember({"toy", "remote"}));
  app.add_option("--endpoint", flags.endpoint, "Model host URL (falls back to ICL_CAL_ENDPOINT)");
  auto* seed_opt = app.add_option("--seed", seed, "Random seed");
  auto* jobs_opt = app.add_option("--jobs", jobs, "Parallel tasks for eval")->check(CLI::PositiveNumber);
  app.add_option("--out", flags.out, "Primary output file");

  std::string prompt_path;
  auto* calibrate_cmd = app.add_subcommand("calibrate", "Calibrate one prompt, emit its trajectory");
  calibrate_cmd->add_option("prompt", prompt_path, "Prompt or task record (JSON)")->required();

  TaskgenArgs tg;
  auto* taskgen_cmd = app.add_subcommand("taskgen", "Generate synthetic hash-string tasks");
  taskgen_cmd->add_option("--kind", tg.kind, "duplication_check | order_check | de_duplication | dict_search");
  taskgen_cmd->add_option("--n", tg.n, "Number of tasks");
  taskgen_cmd->add_option("--n-demos", tg.n_demos, "Demonstrations per task");
  taskgen_cmd->add_option("--hash-len", tg.hash_len, "Characters per hash string");

  std::string tasks_path;
  std::string trajectory_path;
  bool calibrate_flag = false;
  auto* eval_cmd = app.add_subcommand("eval", "Exact-match evaluation, base vs calibrated");
  eval_cmd->add_option("tasks", tasks_path, "Task file (one JSON record per line)");
  eval_cmd->add_flag("--calibrate", calibrate_flag, "Calibrate each prompt before decoding");
  eval_cmd->add_option("--trajectory", trajectory_path, "Write per-iteration records here");

  std::string ref_meta, target_meta;
  double mu_ref = CalibConfig{}.mu;
  double eta_ref = CalibConfig{}.step_size;
  auto* scale_cmd = app.add_subcommand("scale-params", "Rescale (mu, eta) between models");
  scale_cmd->add_option("--ref-meta", ref_meta, "Reference model meta (JSON)")->required();
  scale_cmd->add_option("--target-meta", target_meta, "Target model meta (JSON)")->required();
  scale_cmd->add_option("--mu-ref", mu_ref, "Reference perturbation scale");
  scale_cmd->add_option("--eta-ref", eta_ref, "Reference step size");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitValidation;
  }
  if (seed_opt->count() > 0) flags.seed = seed;
  if (jobs_opt->count() > 0) flags.jobs = jobs;

  try {
    if (calibrate_cmd->parsed()) return cmd_calibrate(flags, prompt_path, out);
    if (taskgen_cmd->parsed()) return cmd_taskgen(flags, tg, out);
    if (eval_cmd->parsed()) {
      return cmd_eval(flags, tasks_path, calibrate_flag, trajectory_path, out);
    }
    if (scale_cmd->parsed()) return cmd_scale_params(ref_meta, target_meta, mu_ref, eta_ref, out);
  } catch (const Error& e) {
    err << "iclcal: " << error_code_name(e.code()) << ": " << e.what() << "\n";
    return exit_code_for(e.code());
  } catch (const std::exception& e) {
    err << "iclcal: " << e.what() << "\n";
    return kExitBackend;
  }
  return kExitValidation;
}

}  // namespace iclcal::cli
