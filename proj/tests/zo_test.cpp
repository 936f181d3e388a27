#include "iclcal/zo.hpp"

#include <cmath>
#include <numeric>

#include <gtest/gtest.h>

#include "iclcal/error.hpp"
#include "iclcal/tasks.hpp"
#include "oracles.hpp"

namespace {

using namespace iclcal;

PerturbationMask mask_below(std::size_t rows, std::size_t query_start) {
  PerturbationMask m;
  for (std::size_t t = 0; t < rows; ++t) m.allowed.push_back(t < query_start);
  return m;
}

ToyCausalMeanModel bias_only_model(std::size_t vocab, std::size_t d, std::vector<double> bias) {
  auto base = ToyCausalMeanModel::random(vocab, d, 1);
  return ToyCausalMeanModel(base.embed_table(), RowMatrix<double>(vocab, d), std::move(bias));
}

// ---- sample_perturbation

TEST(SamplePerturbation, FullyMaskedIsZero) {
  Rng rng(1);
  const auto u = sample_perturbation(rng, 5, 3, mask_below(5, 0));
  for (double v : u.data()) EXPECT_EQ(v, 0.0);
}

TEST(SamplePerturbation, SameSeedSameMatrix) {
  Rng a(42), b(42);
  const auto mask = mask_below(6, 4);
  EXPECT_TRUE(bit_equal(sample_perturbation(a, 6, 5, mask), sample_perturbation(b, 6, 5, mask)));
}

TEST(SamplePerturbation, StandardNormalMoments) {
  Rng rng(9);
  const auto mask = mask_below(100, 50);
  double sum = 0.0, sq = 0.0;
  std::size_t n = 0;
  for (int rep = 0; rep < 100; ++rep) {
    const auto u = sample_perturbation(rng, 100, 20, mask);  // 50 * 20 live entries
    for (std::size_t t = 0; t < 100; ++t) {
      for (double v : u.row(t)) {
        if (t >= 50) {
          ASSERT_EQ(v, 0.0);
          continue;
        }
        sum += v;
        sq += v * v;
        ++n;
      }
    }
  }
  ASSERT_EQ(n, 100000u);
  const double mean = sum / n;
  EXPECT_NEAR(mean, 0.0, 0.02);
  EXPECT_NEAR(sq / n - mean * mean, 1.0, 0.05);
}

TEST(SamplePerturbation, ShapeMismatch) {
  Rng rng(1);
  EXPECT_THROW(sample_perturbation(rng, 4, 2, mask_below(5, 2)), Error);
}

// ---- zo_estimate / zo_gradient

TEST(ZoEstimate, ConstantObjectiveGivesExactZero) {
  EmbeddingMatrix x(6, 4, 0.5f);
  Rng rng(3);
  BatchObjective constant = [](std::span<const EmbeddingMatrix> b) {
    return std::vector<double>(b.size(), 0.37);
  };
  const auto est = zo_estimate(x, mask_below(6, 4), constant, 1e-3, 32, rng);
  for (double v : est.gradient.data()) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(est.f_base, 0.37);
}

TEST(ZoEstimate, ConstantProxyOnZeroHeadModel) {
  const auto m = bias_only_model(4, 3, {0.5, 0.0, -0.2, 0.1});
  TokenizedPrompt p;
  p.token_ids = {0, 1, 2, 3, 1, 0};
  p.demo_output_spans = {{1}, {3}};
  p.query_start = 4;
  CalibConfig cfg;
  cfg.weights = {1.0, 0.0, 0.0, 0.1};
  Rng rng(4);
  const auto g = zo_gradient(m.embed(p.token_ids), p, m, cfg, rng);
  for (double v : g.gradient.data()) EXPECT_EQ(v, 0.0);
}

TEST(ZoEstimate, DeterministicAndMasked) {
  const auto m = ToyCausalMeanModel::random(16, 4, 3);
  TokenizedPrompt p;
  p.token_ids = {1, 2, 3, 4, 5, 6, 7, 8, 9, 10};
  p.demo_output_spans = {{2}, {4, 5}, {7}};
  p.query_start = 8;
  const auto x = m.embed(p.token_ids);
  CalibConfig cfg;
  Rng a(7), b(7);
  const auto ga = zo_gradient(x, p, m, cfg, a);
  const auto gb = zo_gradient(x, p, m, cfg, b);
  EXPECT_TRUE(bit_equal(ga.gradient, gb.gradient));
  EXPECT_EQ(ga.f_base, gb.f_base);
  EXPECT_EQ(ga.f_base, evaluate_proxy(m, x, p, cfg.weights).score);
  for (std::size_t t = 8; t < 10; ++t)
    for (double v : ga.gradient.row(t)) EXPECT_EQ(v, 0.0);
}

TEST(ZoEstimate, NanObjectiveIsRejected) {
  EmbeddingMatrix x(3, 2, 1.0f);
  Rng rng(1);
  BatchObjective bad = [](std::span<const EmbeddingMatrix> b) {
    std::vector<double> s(b.size(), 0.5);
    s.back() = std::nan("");
    return s;
  };
  try {
    zo_estimate(x, mask_below(3, 2), bad, 1e-3, 4, rng);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::NonFiniteProxy);
  }
}

TEST(ZoEstimate, UnbiasedOnLinearObjective) {
  // Smaller version of the acceptance check: 2,000 estimates.
  Rng arng(5);
  GradientMatrix a(4, 3);
  for (double& v : a.data()) v = (arng.below(2) ? 1.0 : -1.0) * (0.5 + 0.5 * arng.uniform());
  const auto mask = mask_below(4, 3);
  BatchObjective linear = [&](std::span<const EmbeddingMatrix> b) {
    std::vector<double> out;
    for (const auto& x : b) {
      double s = 0.0;
      for (std::size_t i = 0; i < x.size(); ++i) s += a.data()[i] * x.data()[i];
      out.push_back(s);
    }
    return out;
  };
  EmbeddingMatrix x(4, 3, 0.25f);
  GradientMatrix mean(4, 3);
  Rng rng(6);
  const int reps = 2000;
  for (int r = 0; r < reps; ++r) {
    const auto est = zo_estimate(x, mask, linear, 1e-2, 32, rng);
    for (std::size_t i = 0; i < mean.size(); ++i) mean.data()[i] += est.gradient.data()[i] / reps;
  }
  for (std::size_t t = 0; t < 4; ++t) {
    for (std::size_t j = 0; j < 3; ++j) {
      if (t >= 3) {
        EXPECT_EQ(mean(t, j), 0.0);
      } else {
        EXPECT_NEAR(mean(t, j), a(t, j), 0.1 * std::abs(a(t, j)));
      }
    }
  }
}

TEST(ZoEstimate, TracksAnalyticGradient) {
  const auto m = ToyCausalMeanModel::random(16, 8, 31);
  Rng prng(31);
  TokenizedPrompt p;
  for (int i = 0; i < 16; ++i) p.token_ids.push_back(static_cast<TokenId>(prng.below(16)));
  p.demo_output_spans = {{2, 3}, {6}, {9, 10}};
  p.query_start = 12;
  CalibConfig cfg;
  cfg.mu = 1e-3;
  cfg.n_samples = 512;
  cfg.weights = {1.0, 0.0, 0.0, 0.1};
  const auto x = m.embed(p.token_ids);
  const auto exact = analytic_confidence_gradient(m, x, p);
  Rng rng(8);
  const auto est = zo_gradient(x, p, m, cfg, rng);
  EXPECT_GT(oracle::cosine(est.gradient, exact), 0.6);
}

// ---- clip_rows

TEST(ClipRows, ScalesLargeRowsOnly) {
  GradientMatrix g(2, 2);
  g(0, 0) = 0.0; g(0, 1) = 4.0;   // norm 4
  g(1, 0) = 0.3; g(1, 1) = 0.4;   // norm 0.5
  const auto c = clip_rows(g);
  EXPECT_DOUBLE_EQ(c(0, 0), 0.0);
  EXPECT_DOUBLE_EQ(c(0, 1), 1.0);
  EXPECT_EQ(c(1, 0), 0.3);
  EXPECT_EQ(c(1, 1), 0.4);
}

TEST(ClipRows, PropertySweep) {
  Rng rng(10);
  for (int rep = 0; rep < 200; ++rep) {
    GradientMatrix g(1 + rng.below(8), 1 + rng.below(8));
    const double scale = std::pow(10.0, 4.0 * rng.uniform() - 2.0);
    for (double& v : g.data()) v = scale * rng.normal();
    const auto c = clip_rows(g);
    for (std::size_t t = 0; t < g.rows(); ++t) {
      double n = 0.0, dot = 0.0, n0 = 0.0;
      for (std::size_t j = 0; j < g.cols(); ++j) {
        n += c(t, j) * c(t, j);
        n0 += g(t, j) * g(t, j);
        dot += c(t, j) * g(t, j);
      }
      ASSERT_LE(std::sqrt(n), 1.0 + 1e-9);
      if (n0 > 0) {
        ASSERT_NEAR(dot / std::sqrt(n * n0), 1.0, 1e-7);
      }
    }
  }
}

// ---- cosine_project_rows

TEST(CosineProject, IdentityIsUntouched) {
  Rng rng(2);
  EmbeddingMatrix x(5, 4);
  for (float& v : x.data()) v = static_cast<float>(rng.normal());
  std::size_t projected = 99;
  EXPECT_TRUE(bit_equal(cosine_project_rows(x, x, 0.2, &projected), x));
  EXPECT_EQ(projected, 0u);
}

TEST(CosineProject, ClosedFormRotationInThePlane) {
  EmbeddingMatrix x0(1, 2), xn(1, 2);
  x0(0, 0) = 1.0f; x0(0, 1) = 0.0f;
  xn(0, 0) = 0.0f; xn(0, 1) = 1.0f;
  std::size_t projected = 0;
  const auto out = cosine_project_rows(xn, x0, 0.2, &projected);
  EXPECT_EQ(projected, 1u);
  EXPECT_NEAR(out(0, 0), 0.2, 1e-7);
  EXPECT_NEAR(out(0, 1), std::sqrt(0.96), 1e-7);
  EXPECT_NEAR(std::hypot(double(out(0, 0)), double(out(0, 1))), 1.0, 1e-7);
  EXPECT_NEAR(row_cosine(out.row(0), x0.row(0)), 0.2, 1e-7);
}

TEST(CosineProject, ZeroThresholdSweep) {
  Rng rng(3);
  for (int rep = 0; rep < 300; ++rep) {
    EmbeddingMatrix x0(3, 5), xn(3, 5);
    for (float& v : x0.data()) v = static_cast<float>(rng.normal());
    for (float& v : xn.data()) v = static_cast<float>(rng.normal());
    const auto out = cosine_project_rows(xn, x0, 0.0);
    for (std::size_t t = 0; t < 3; ++t) {
      const double before = row_cosine(xn.row(t), x0.row(t));
      if (before >= 0.0) {
        ASSERT_TRUE(rows_bit_equal(out.row(t), xn.row(t)));
      } else {
        ASSERT_NEAR(row_cosine(out.row(t), x0.row(t)), 0.0, 1e-6);
        double n_in = 0, n_out = 0;
        for (std::size_t j = 0; j < 5; ++j) {
          n_in += double(xn(t, j)) * xn(t, j);
          n_out += double(out(t, j)) * out(t, j);
        }
        ASSERT_NEAR(std::sqrt(n_out), std::sqrt(n_in), 1e-5 * std::sqrt(n_in));
      }
    }
  }
}

TEST(CosineProject, AntiparallelRowStillRotates) {
  EmbeddingMatrix x0(1, 3), xn(1, 3);
  x0(0, 0) = 1.0f;
  xn(0, 0) = -2.0f;
  const auto out = cosine_project_rows(xn, x0, 0.5);
  EXPECT_NEAR(row_cosine(out.row(0), x0.row(0)), 0.5, 1e-6);
}

TEST(CosineProject, ZeroRowNeedingProjectionIsDegenerate) {
  EmbeddingMatrix x0(1, 3, 1.0f), xn(1, 3, 0.0f);
  try {
    cosine_project_rows(xn, x0, 0.2);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::DegenerateRow);
  }
}

// ---- calibrate

TokenizedPrompt two_demo_prompt() {
  TokenizedPrompt p;
  p.token_ids = {1, 0, 1, 0, 1, 1};
  p.demo_output_spans = {{1}, {3}};
  p.query_start = 4;
  return p;
}

TEST(Calibrate, GateSkipsBelowThreshold) {
  // Constant head with p(token 0) chosen so that f = 0.9 p = 0.04.
  const double prob = 0.04 / 0.9;
  const auto m = bias_only_model(2, 3, {std::log(prob / (1 - prob)), 0.0});
  const auto p = two_demo_prompt();
  CalibConfig cfg;
  const auto r = calibrate(p, m, cfg);
  EXPECT_NEAR(r.initial_score, 0.04, 1e-12);
  EXPECT_TRUE(r.gate_skipped);
  EXPECT_TRUE(r.iterations.empty());
  EXPECT_TRUE(bit_equal(r.best_embeddings, m.embed(p.token_ids)));
}

TEST(Calibrate, FlatProxyStopsAfterPatience) {
  const auto m = bias_only_model(2, 3, {0.0, 0.0});
  CalibConfig cfg;
  cfg.patience = 5;
  const auto r = calibrate(two_demo_prompt(), m, cfg);
  ASSERT_FALSE(r.gate_skipped);
  ASSERT_EQ(r.iterations.size(), 6u);  // X0, then five non-improving steps
  EXPECT_TRUE(r.iterations[0].is_new_best);
  for (std::size_t k = 1; k < 6; ++k) EXPECT_FALSE(r.iterations[k].is_new_best);
  EXPECT_EQ(r.best_score, r.initial_score);
}

TEST(Calibrate, HardCap) {
  const auto m = bias_only_model(2, 3, {0.0, 0.0});
  CalibConfig cfg;
  cfg.max_steps = 3;
  cfg.patience = 10;
  EXPECT_EQ(calibrate(two_demo_prompt(), m, cfg).iterations.size(), 3u);
}

TEST(Calibrate, DeterministicNeverDegradesAndKeepsQueryRows) {
  for (std::uint64_t seed = 0; seed < 6; ++seed) {
    const auto m = make_task_toy_model(Vocab::toy(), 8, seed);
    const auto p = render_prompt(gen_task(TaskKind::DuplicationCheck, 3, 2, seed), Vocab::toy());
    CalibConfig cfg;
    cfg.seed = seed;
    cfg.max_steps = 30;
    const auto a = calibrate(p, m, cfg);
    const auto b = calibrate(p, m, cfg);
    ASSERT_TRUE(bit_equal(a.best_embeddings, b.best_embeddings));
    ASSERT_EQ(a.iterations.size(), b.iterations.size());
    for (std::size_t k = 0; k < a.iterations.size(); ++k) {
      ASSERT_EQ(a.iterations[k].f_base, b.iterations[k].f_base);
    }
    EXPECT_GE(a.best_score, a.initial_score);
    const auto x0 = m.embed(p.token_ids);
    for (std::size_t t = p.query_start; t < p.length(); ++t) {
      EXPECT_TRUE(rows_bit_equal(a.best_embeddings.row(t), x0.row(t)));
    }
  }
}

TEST(Calibrate, ImprovesAnUnderpredictedDemo) {
  // Random-token prompts with single-token outputs whose first label is pushed down.
  CalibConfig cfg;
  cfg.mu = 1e-3;
  cfg.n_samples = 64;
  cfg.step_size = 0.05;
  cfg.cosine_threshold = 0.2;
  cfg.max_steps = 100;
  cfg.patience = 5;
  int improved = 0, total = 0;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    auto m = ToyCausalMeanModel::random(16, 8, 500 + seed);
    Rng rng(seed);
    TokenizedPrompt p;
    for (int i = 0; i < 14; ++i) p.token_ids.push_back(static_cast<TokenId>(2 + rng.below(14)));
    p.token_ids[3] = p.token_ids[7] = p.token_ids[11] = 0;
    p.demo_output_spans = {{3}, {7}, {11}};
    p.query_start = 12;
    m.mutable_out_bias()[0] = 2.5;
    underpredict_first_demo(m, p, 1.5);
    cfg.seed = seed;
    const auto r = calibrate(p, m, cfg);
    ASSERT_GE(r.best_score, r.initial_score);
    if (r.gate_skipped) continue;
    ++total;
    if (r.best_score - r.initial_score >= 1e-4) ++improved;
  }
  ASSERT_GT(total, 0);
  EXPECT_GE(improved, 0.8 * total) << improved << " of " << total;
}

TEST(Calibrate, RejectsInvalidPromptAndConfig) {
  const auto m = bias_only_model(2, 3, {0.0, 0.0});
  auto p = two_demo_prompt();
  p.demo_output_spans = {{3}, {1}};
  EXPECT_THROW(calibrate(p, m, {}), Error);
  CalibConfig cfg;
  cfg.n_samples = 0;
  EXPECT_THROW(calibrate(two_demo_prompt(), m, cfg), Error);
}

// ---- scale_hyperparams

ProviderMeta meta(double e, std::size_t d) { return {1000, d, e, 4096}; }

TEST(ScaleHyperparams, IdentityAndLinearity) {
  auto [mu, eta] = scale_hyperparams(0.004, 0.05, meta(1.3, 512), meta(1.3, 512));
  EXPECT_DOUBLE_EQ(mu, 0.004);
  EXPECT_DOUBLE_EQ(eta, 0.05);
  std::tie(mu, eta) = scale_hyperparams(0.004, 0.05, meta(1.3, 512), meta(2.6, 512));
  EXPECT_DOUBLE_EQ(mu, 0.008);
  EXPECT_DOUBLE_EQ(eta, 0.1);
}

TEST(ScaleHyperparams, HandComputedRatio) {
  // (0.5 / 32) / (1 / 64) = 1
  const auto [mu, eta] = scale_hyperparams(0.004, 0.05, meta(1.0, 4096), meta(0.5, 1024));
  EXPECT_DOUBLE_EQ(mu, 0.004);
  EXPECT_DOUBLE_EQ(eta, 0.05);
}

}  // namespace
