#include "iclcal/eval.hpp"

#include <algorithm>
#include <exception>
#include <map>

#include <omp.h>

#include <json.hpp>

#include "iclcal/error.hpp"
#include "iclcal/rng.hpp"
#include "iclcal/stats.hpp"

namespace iclcal {
namespace {

std::vector<TokenId> decode(const LogProbProvider& provider, const EmbeddingMatrix& x,
                            std::size_t max_new, std::size_t max_context) {
  // Clamp to the remaining context so long prompts still get an answer.
  std::size_t budget = max_new;
  if (max_context > x.rows()) budget = std::min(budget, max_context - x.rows());
  return provider.greedy_generate(x, std::max<std::size_t>(budget, 1));
}

void fill_spearman(EvalReport& report) {
  std::vector<double> xs, ys;
  std::map<TaskKind, std::vector<const SampleOutcome*>> by_kind;
  for (const auto& s : report.per_sample) by_kind[s.kind].push_back(&s);
  std::string level;
  if (by_kind.size() >= 3) {
    level = "per_kind";
    for (const auto& [kind, samples] : by_kind) {
      double gain = 0.0, delta = 0.0;
      for (const auto* s : samples) {
        gain += s->improved_proxy;
        delta += static_cast<double>(s->calib_correct) - static_cast<double>(s->base_correct);
      }
      xs.push_back(gain / static_cast<double>(samples.size()));
      ys.push_back(delta / static_cast<double>(samples.size()));
    }
  } else {
    level = "per_sample";
    for (const auto& s : report.per_sample) {
      xs.push_back(s.improved_proxy);
      ys.push_back(static_cast<double>(s.calib_correct) - static_cast<double>(s.base_correct));
    }
  }
  try {
    const auto res = spearman_one_sided(xs, ys);
    report.spearman_level = level;
    report.spearman_rho = res.rho;
    report.spearman_p = res.p_value;
  } catch (const Error&) {
    report.spearman_level = "undefined";
    report.spearman_rho = 0.0;
    report.spearman_p = 1.0;
  }
}

}  // namespace

EvalReport evaluate(const std::vector<TaskInstance>& tasks, const Vocab& vocab,
                    const LogProbProvider& provider, const CalibConfig& cfg,
                    const EvalOptions& options) {
  if (tasks.empty()) throw Error(ErrorCode::InvalidArgument, "no tasks to evaluate");
  cfg.validate();
  const auto meta = provider.meta();

  std::vector<SampleOutcome> outcomes(tasks.size());
  std::vector<CalibrationResult> results(tasks.size());
  std::vector<std::exception_ptr> errors(tasks.size());
  const auto count = static_cast<std::ptrdiff_t>(tasks.size());
  const int jobs = std::max(1, options.jobs);

#pragma omp parallel for num_threads(jobs) schedule(dynamic)
  for (std::ptrdiff_t i = 0; i < count; ++i) {
    const auto idx = static_cast<std::size_t>(i);
    try {
      const auto& task = tasks[idx];
      const auto prompt = render_prompt(task, vocab);
      SampleOutcome& out = outcomes[idx];
      out.kind = task.kind;

      const auto x0 = provider.embed(prompt.token_ids);
      out.base_output = decode_answer(decode(provider, x0, options.max_new, meta.max_context), vocab);
      out.base_correct = out.base_output == task.gold_output;

      if (options.calibrate) {
        CalibConfig task_cfg = cfg;
        task_cfg.seed = derive_seed(cfg.seed, idx);
        results[idx] = calibrate(prompt, provider, task_cfg);
        const auto& r = results[idx];
        out.initial_score = r.initial_score;
        out.best_score = r.best_score;
        out.improved_proxy = r.best_score - r.initial_score;
        out.gate_skipped = r.gate_skipped;
        out.iterations = r.iterations.size();
        out.calib_output =
            r.gate_skipped ? out.base_output
                           : decode_answer(decode(provider, r.best_embeddings, options.max_new,
                                                  meta.max_context),
                                           vocab);
      } else {
        const auto b = evaluate_proxy(provider, x0, prompt, cfg.weights);
        out.initial_score = b.score;
        out.best_score = b.score;
        out.gate_skipped = b.score < cfg.gate_threshold;
        out.calib_output = out.base_output;
      }
      out.calib_correct = out.calib_output == task.gold_output;
    } catch (...) {
      errors[idx] = std::current_exception();
    }
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }

  EvalReport report;
  report.n = tasks.size();
  std::size_t base_hits = 0, calib_hits = 0;
  for (std::size_t i = 0; i < outcomes.size(); ++i) {
    const auto& s = outcomes[i];
    base_hits += s.base_correct;
    calib_hits += s.calib_correct;
    if (s.calib_correct && !s.base_correct) ++report.improved;
    if (s.base_correct && !s.calib_correct) ++report.degraded;
    if (options.on_result && options.calibrate) options.on_result(i, results[i]);
  }
  report.per_sample = std::move(outcomes);
  report.accuracy_base = static_cast<double>(base_hits) / static_cast<double>(report.n);
  report.accuracy_calibrated = static_cast<double>(calib_hits) / static_cast<double>(report.n);
  report.mcnemar_p = mcnemar_one_sided(report.improved, report.degraded);
  fill_spearman(report);
  return report;
}

std::string report_to_json(const EvalReport& report) {
  nlohmann::ordered_json j;
  j["n"] = report.n;
  j["accuracy_base"] = report.accuracy_base;
  j["accuracy_calibrated"] = report.accuracy_calibrated;
  j["improved"] = report.improved;
  j["degraded"] = report.degraded;
  j["mcnemar_p"] = report.mcnemar_p;
  j["spearman_level"] = report.spearman_level;
  j["spearman_rho"] = report.spearman_rho;
  j["spearman_p"] = report.spearman_p;
  j["per_sample"] = nlohmann::ordered_json::array();
  for (const auto& s : report.per_sample) {
    nlohmann::ordered_json row;
    row["kind"] = task_kind_name(s.kind);
    row["improved_proxy"] = s.improved_proxy;
    row["initial_score"] = s.initial_score;
    row["best_score"] = s.best_score;
    row["gate_skipped"] = s.gate_skipped;
    row["iterations"] = s.iterations;
    row["base_output"] = s.base_output;
    row["calib_output"] = s.calib_output;
    row["base_correct"] = s.base_correct;
    row["calib_correct"] = s.calib_correct;
    j["per_sample"].push_back(std::move(row));
  }
  return j.dump(2) + "\n";
}

}  // namespace iclcal
