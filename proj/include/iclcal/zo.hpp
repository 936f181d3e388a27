#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <utility>
#include <vector>

#include "iclcal/matrix.hpp"
#include "iclcal/model.hpp"
#include "iclcal/prompt.hpp"
#include "iclcal/proxy.hpp"
#include "iclcal/rng.hpp"

namespace iclcal {

/// Optimizer hyperparameters. Defaults are the tuned 8B-model settings with a
/// 250-step cap and patience 5.
struct CalibConfig {
  double mu = 0.004;
  std::size_t n_samples = 16;
  double step_size = 0.05;
  double cosine_threshold = 0.2;
  double gate_threshold = 0.05;
  std::size_t max_steps = 250;
  std::size_t patience = 5;
  ProxyWeights weights;
  std::uint64_t seed = 0;

  void validate() const;
};

/// allowed[t] is true iff t < query_start.
struct PerturbationMask {
  std::vector<bool> allowed;

  static PerturbationMask for_prompt(const TokenizedPrompt& prompt);
  std::size_t size() const noexcept { return allowed.size(); }
};

struct IterationRecord {
  std::size_t step = 0;
  double f_base = 0.0;
  ProxyBreakdown breakdown;
  double grad_norm_pre_clip = 0.0;
  double grad_norm_post_clip = 0.0;
  std::size_t rows_projected = 0;
  bool is_new_best = false;
};

struct CalibrationResult {
  EmbeddingMatrix best_embeddings;
  double best_score = 0.0;
  double initial_score = 0.0;
  ProxyBreakdown initial_breakdown;
  bool gate_skipped = false;
  std::vector<IterationRecord> iterations;
};

/// I.i.d. N(0, 1) rows where the mask allows, exact zeros elsewhere.
GradientMatrix sample_perturbation(Rng& rng, std::size_t rows, std::size_t cols,
                                   const PerturbationMask& mask);

/// Scores a batch of embedding matrices; used for the perturbed evaluations.
using BatchObjective = std::function<std::vector<double>(std::span<const EmbeddingMatrix>)>;

struct ZoEstimate {
  GradientMatrix gradient;
  double f_base = 0.0;
};

/// Gaussian-smoothing estimate with baseline subtraction:
///   g = (1/N) sum_i (f(X + mu U_i) - f(X)) / mu * U_i.
/// The base point and the N perturbations are scored in one batch.
/// Throws NonFiniteProxy if any score is NaN.
ZoEstimate zo_estimate(const EmbeddingMatrix& x, const PerturbationMask& mask,
                       const BatchObjective& objective, double mu, std::size_t n_samples,
                       Rng& rng);

struct ZoGradient {
  GradientMatrix gradient;
  double f_base = 0.0;
  ProxyBreakdown breakdown;  // at the base point
};

/// zo_estimate with the proxy as objective.
ZoGradient zo_gradient(const EmbeddingMatrix& x, const TokenizedPrompt& prompt,
                       const LogProbProvider& provider, const CalibConfig& cfg, Rng& rng);

/// Divides each row by max(1, ||row||).
GradientMatrix clip_rows(GradientMatrix g);

double frobenius_norm(const GradientMatrix& g);

/// Rotates each row whose cosine to its X0 row is below kappa back onto the
/// cone boundary, keeping its norm. Rows already inside are returned
/// untouched. `projected` (optional) receives the number of rotated rows.
/// Throws DegenerateRow if a row that needs projection is zero.
EmbeddingMatrix cosine_project_rows(EmbeddingMatrix x_new, const EmbeddingMatrix& x0,
                                    double kappa, std::size_t* projected = nullptr);

double row_cosine(std::span<const float> a, std::span<const float> b);

/// Optional per-iteration hook: the record, the clipped gradient and the new
/// (projected) iterate X_{k+1}.
using IterationObserver = std::function<void(const IterationRecord&, const GradientMatrix&,
                                             const EmbeddingMatrix&)>;

/// Test-time calibration loop: gate, then ascent with clipping and cosine
/// projection, returning the best iterate seen (X0 included, earliest wins).
CalibrationResult calibrate(const TokenizedPrompt& prompt, const LogProbProvider& provider,
                            const CalibConfig& cfg, const IterationObserver& observer = {});

/// Rescales (mu, eta) by (E_t / sqrt(d_t)) / (E_r / sqrt(d_r)).
std::pair<double, double> scale_hyperparams(double mu_ref, double eta_ref,
                                            const ProviderMeta& ref_meta,
                                            const ProviderMeta& target_meta);

}  // namespace iclcal
