#include "iclcal/zo.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "iclcal/error.hpp"
#include "iclcal/kernels.hpp"

namespace iclcal {

void CalibConfig::validate() const {
  auto fail = [](const std::string& what) { throw Error(ErrorCode::InvalidArgument, what); };
  if (!(mu > 0.0) || !std::isfinite(mu)) fail("mu must be positive");
  if (n_samples < 1) fail("n_samples must be >= 1");
  if (!(step_size > 0.0) || !std::isfinite(step_size)) fail("step_size must be positive");
  if (!(cosine_threshold >= 0.0 && cosine_threshold <= 1.0)) {
    fail("cosine_threshold must lie in [0, 1]");
  }
  if (!(gate_threshold >= 0.0 && gate_threshold < 1.0)) fail("gate_threshold must lie in [0, 1)");
  if (max_steps < 1) fail("max_steps must be >= 1");
  if (patience < 1) fail("patience must be >= 1");
  weights.validate();
}

PerturbationMask PerturbationMask::for_prompt(const TokenizedPrompt& prompt) {
  PerturbationMask mask;
  mask.allowed.resize(prompt.length());
  for (std::size_t t = 0; t < prompt.length(); ++t) mask.allowed[t] = t < prompt.query_start;
  return mask;
}

GradientMatrix sample_perturbation(Rng& rng, std::size_t rows, std::size_t cols,
                                   const PerturbationMask& mask) {
  if (mask.size() != rows) {
    throw Error(ErrorCode::ShapeMismatch, "mask length " + std::to_string(mask.size()) +
                                              " != " + std::to_string(rows) + " rows");
  }
  GradientMatrix u(rows, cols);
  for (std::size_t t = 0; t < rows; ++t) {
    if (!mask.allowed[t]) continue;
    for (double& v : u.row(t)) v = rng.normal();
  }
  return u;
}

ZoEstimate zo_estimate(const EmbeddingMatrix& x, const PerturbationMask& mask,
                       const BatchObjective& objective, double mu, std::size_t n_samples,
                       Rng& rng) {
  if (!(mu > 0.0)) throw Error(ErrorCode::InvalidArgument, "mu must be positive");
  if (n_samples < 1) throw Error(ErrorCode::InvalidArgument, "n_samples must be >= 1");

  std::vector<GradientMatrix> perturbations;
  perturbations.reserve(n_samples);
  for (std::size_t i = 0; i < n_samples; ++i) {
    perturbations.push_back(sample_perturbation(rng, x.rows(), x.cols(), mask));
  }

  std::vector<EmbeddingMatrix> batch;
  batch.reserve(n_samples + 1);
  batch.push_back(x);
  for (auto& y : kernels::parallel::perturb(x, perturbations, mu)) batch.push_back(std::move(y));

  const auto scores = objective(batch);
  if (scores.size() != batch.size()) {
    throw Error(ErrorCode::ShapeMismatch, "objective returned the wrong number of scores");
  }
  for (double s : scores) {
    if (std::isnan(s)) throw Error(ErrorCode::NonFiniteProxy, "proxy evaluated to NaN");
  }

  std::vector<double> coeffs(n_samples);
  for (std::size_t i = 0; i < n_samples; ++i) coeffs[i] = (scores[i + 1] - scores[0]) / mu;

  ZoEstimate out;
  out.gradient = kernels::parallel::weighted_sum(perturbations, coeffs,
                                                 1.0 / static_cast<double>(n_samples));
  out.f_base = scores[0];
  return out;
}

ZoGradient zo_gradient(const EmbeddingMatrix& x, const TokenizedPrompt& prompt,
                       const LogProbProvider& provider, const CalibConfig& cfg, Rng& rng) {
  const auto positions = prompt.scored_positions();
  ProxyBreakdown base;
  BatchObjective objective = [&](std::span<const EmbeddingMatrix> batch) {
    const auto tables = provider.batch_logprobs(batch, prompt.token_ids, positions);
    if (tables.size() != batch.size()) {
      throw Error(ErrorCode::ShapeMismatch, "provider returned the wrong number of tables");
    }
    std::vector<double> scores;
    scores.reserve(tables.size());
    for (std::size_t i = 0; i < tables.size(); ++i) {
      const auto b = proxy_score(tables[i], prompt, cfg.weights);
      if (i == 0) base = b;
      scores.push_back(b.score);
    }
    return scores;
  };
  auto est = zo_estimate(x, PerturbationMask::for_prompt(prompt), objective, cfg.mu,
                         cfg.n_samples, rng);
  return {std::move(est.gradient), est.f_base, base};
}

GradientMatrix clip_rows(GradientMatrix g) {
  for (std::size_t t = 0; t < g.rows(); ++t) {
    auto row = g.row(t);
    double sq = 0.0;
    for (double v : row) sq += v * v;
    const double norm = std::sqrt(sq);
    if (norm > 1.0) {
      for (double& v : row) v /= norm;
    }
  }
  return g;
}

double frobenius_norm(const GradientMatrix& g) {
  double sq = 0.0;
  for (double v : g.data()) sq += v * v;
  return std::sqrt(sq);
}

double row_cosine(std::span<const float> a, std::span<const float> b) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t j = 0; j < a.size(); ++j) {
    const double x = a[j], y = b[j];
    dot += x * y;
    na += x * x;
    nb += y * y;
  }
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

EmbeddingMatrix cosine_project_rows(EmbeddingMatrix x_new, const EmbeddingMatrix& x0,
                                    double kappa, std::size_t* projected) {
  if (!x_new.same_shape(x0)) {
    throw Error(ErrorCode::ShapeMismatch, "projection operands differ in shape");
  }
  if (!(kappa >= 0.0 && kappa <= 1.0)) {
    throw Error(ErrorCode::InvalidArgument, "kappa must lie in [0, 1]");
  }
  const std::size_t d = x0.cols();
  std::size_t count = 0;
  std::vector<double> u(d), w(d);
  for (std::size_t t = 0; t < x0.rows(); ++t) {
    auto anchor = x0.row(t);
    auto row = x_new.row(t);
    double anchor_sq = 0.0, row_sq = 0.0, dot = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      anchor_sq += static_cast<double>(anchor[j]) * anchor[j];
      row_sq += static_cast<double>(row[j]) * row[j];
      dot += static_cast<double>(anchor[j]) * row[j];
    }
    if (anchor_sq == 0.0) continue;  // no direction to stay close to
    if (row_sq == 0.0) {
      if (kappa > 0.0) {
        throw Error(ErrorCode::DegenerateRow,
                    "row " + std::to_string(t) + " collapsed to zero and cannot be projected");
      }
      continue;
    }
    const double anchor_norm = std::sqrt(anchor_sq);
    const double row_norm = std::sqrt(row_sq);
    const double cosine = dot / (anchor_norm * row_norm);
    if (cosine >= kappa) continue;

    // Orthonormal basis {u, v} of the plane through anchor and row.
    for (std::size_t j = 0; j < d; ++j) u[j] = anchor[j] / anchor_norm;
    const double along = dot / anchor_norm;
    double w_sq = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      w[j] = row[j] - along * u[j];
      w_sq += w[j] * w[j];
    }
    if (w_sq <= 1e-24 * row_sq) {
      // Antiparallel: any direction orthogonal to u spans a valid plane.
      std::size_t axis = 0;
      for (std::size_t j = 1; j < d; ++j) {
        if (std::abs(u[j]) < std::abs(u[axis])) axis = j;
      }
      w_sq = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        w[j] = (j == axis ? 1.0 : 0.0) - u[axis] * u[j];
        w_sq += w[j] * w[j];
      }
      if (w_sq == 0.0) {
        throw Error(ErrorCode::DegenerateRow,
                    "cannot rotate a one-dimensional row " + std::to_string(t));
      }
    }
    const double w_norm = std::sqrt(w_sq);
    const double sine = std::sqrt(std::max(0.0, 1.0 - kappa * kappa));
    for (std::size_t j = 0; j < d; ++j) {
      row[j] = static_cast<float>(row_norm * (kappa * u[j] + sine * w[j] / w_norm));
    }
    ++count;
  }
  if (projected) *projected = count;
  return x_new;
}

CalibrationResult calibrate(const TokenizedPrompt& prompt, const LogProbProvider& provider,
                            const CalibConfig& cfg, const IterationObserver& observer) {
  cfg.validate();
  prompt.validate();

  const EmbeddingMatrix x0 = provider.embed(prompt.token_ids);
  CalibrationResult result;
  result.initial_breakdown = evaluate_proxy(provider, x0, prompt, cfg.weights);
  result.initial_score = result.initial_breakdown.score;
  if (std::isnan(result.initial_score)) {
    throw Error(ErrorCode::NonFiniteProxy, "initial proxy evaluated to NaN");
  }
  result.best_embeddings = x0;
  result.best_score = result.initial_score;
  if (result.initial_score < cfg.gate_threshold) {
    result.gate_skipped = true;
    return result;
  }

  const Rng root(cfg.seed);
  EmbeddingMatrix x = x0;
  std::size_t stall = 0;
  for (std::size_t k = 0; k < cfg.max_steps; ++k) {
    Rng rng = root.split(k);
    auto zg = zo_gradient(x, prompt, provider, cfg, rng);

    IterationRecord rec;
    rec.step = k;
    rec.f_base = zg.f_base;
    rec.breakdown = zg.breakdown;
    if (k == 0) {
      // X0 itself; re-scored in the batch, bit-identical for conforming providers.
      rec.is_new_best = true;
      result.best_score = std::max(result.best_score, zg.f_base);
    } else if (zg.f_base > result.best_score) {
      rec.is_new_best = true;
      result.best_score = zg.f_base;
      result.best_embeddings = x;
      stall = 0;
    } else {
      ++stall;
    }

    rec.grad_norm_pre_clip = frobenius_norm(zg.gradient);
    GradientMatrix g = clip_rows(std::move(zg.gradient));
    rec.grad_norm_post_clip = frobenius_norm(g);

    EmbeddingMatrix next = x;
    auto dst = next.data();
    auto step = g.data();
    for (std::size_t i = 0; i < dst.size(); ++i) {
      if (step[i] != 0.0) {
        dst[i] = static_cast<float>(static_cast<double>(dst[i]) + cfg.step_size * step[i]);
      }
    }
    next = cosine_project_rows(std::move(next), x0, cfg.cosine_threshold, &rec.rows_projected);

    if (observer) observer(rec, g, next);
    result.iterations.push_back(rec);
    x = std::move(next);
    if (stall >= cfg.patience) break;
  }
  return result;
}

std::pair<double, double> scale_hyperparams(double mu_ref, double eta_ref,
                                            const ProviderMeta& ref_meta,
                                            const ProviderMeta& target_meta) {
  ref_meta.validate();
  target_meta.validate();
  const double ref = ref_meta.mean_row_norm / std::sqrt(static_cast<double>(ref_meta.embed_dim));
  const double target =
      target_meta.mean_row_norm / std::sqrt(static_cast<double>(target_meta.embed_dim));
  const double factor = target / ref;
  return {mu_ref * factor, eta_ref * factor};
}

}  // namespace iclcal
