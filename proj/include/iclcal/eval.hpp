#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "iclcal/model.hpp"
#include "iclcal/tasks.hpp"
#include "iclcal/zo.hpp"

namespace iclcal {

struct SampleOutcome {
  TaskKind kind = TaskKind::DuplicationCheck;
  double improved_proxy = 0.0;  // f(X*) - f(X0)
  double initial_score = 0.0;
  double best_score = 0.0;
  bool gate_skipped = false;
  std::size_t iterations = 0;
  std::string base_output;
  std::string calib_output;
  bool base_correct = false;
  bool calib_correct = false;
};

struct EvalReport {
  std::size_t n = 0;
  double accuracy_base = 0.0;
  double accuracy_calibrated = 0.0;
  std::vector<SampleOutcome> per_sample;
  std::size_t improved = 0;  // calibrated right, base wrong
  std::size_t degraded = 0;  // base right, calibrated wrong
  double mcnemar_p = 1.0;
  /// "per_kind" when at least three task kinds are present (mean proxy gain vs
  /// accuracy change per kind), else "per_sample"; "undefined" if degenerate.
  std::string spearman_level = "undefined";
  double spearman_rho = 0.0;
  double spearman_p = 1.0;
};

struct EvalOptions {
  bool calibrate = false;
  std::size_t max_new = 32;
  int jobs = 1;
  /// Called once per task in task order after all tasks finish.
  std::function<void(std::size_t task_index, const CalibrationResult&)> on_result;
};

/// Greedy exact-match evaluation of base (X0) and, optionally, calibrated (X*)
/// prompts. Task i calibrates with seed derive_seed(cfg.seed, i). Any failure
/// aborts the whole report.
EvalReport evaluate(const std::vector<TaskInstance>& tasks, const Vocab& vocab,
                    const LogProbProvider& provider, const CalibConfig& cfg,
                    const EvalOptions& options);

std::string report_to_json(const EvalReport& report);

}  // namespace iclcal
