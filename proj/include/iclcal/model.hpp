#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "iclcal/matrix.hpp"
#include "iclcal/prompt.hpp"
#include "iclcal/proxy.hpp"

namespace iclcal {

struct ProviderMeta {
  std::size_t vocab_size = 0;
  std::size_t embed_dim = 0;
  double mean_row_norm = 0.0;  // mean L2 norm of the token-embedding table rows
  std::size_t max_context = 0;

  /// Throws Error(InvalidArgument) unless vocab_size >= 2, embed_dim >= 1
  /// and mean_row_norm > 0.
  void validate() const;
};

/// Black-box access to a causal LM: token embeddings, teacher-forced
/// log-probabilities under arbitrary (continuous) input embeddings, and greedy
/// decoding. Implementations must be safe for concurrent read-only use.
///
/// Causality contract: the log-prob at position t depends only on rows < t.
class LogProbProvider {
 public:
  virtual ~LogProbProvider() = default;

  virtual ProviderMeta meta() const = 0;

  /// Row t is the embedding-table row of token_ids[t]. Throws OutOfVocab.
  virtual EmbeddingMatrix embed(std::span<const TokenId> token_ids) const = 0;

  /// log P(target[t] | rows 0..t-1) for every requested t. Targets are the
  /// prompt's original ids even when X is perturbed.
  /// Throws PositionOutOfRange (t == 0 or t >= L) and ShapeMismatch.
  virtual LogProbTable teacher_forced_logprobs(const EmbeddingMatrix& x,
                                               std::span<const TokenId> target_token_ids,
                                               std::span<const std::size_t> positions) const = 0;

  /// Elementwise teacher_forced_logprobs, order preserved. The default maps
  /// the single call; implementations may batch but must stay bit-identical.
  virtual std::vector<LogProbTable> batch_logprobs(std::span<const EmbeddingMatrix> batch,
                                                   std::span<const TokenId> target_token_ids,
                                                   std::span<const std::size_t> positions) const;

  /// Greedy continuation of X. Appended tokens use the embedding table; ties
  /// go to the lowest id. Throws InvalidArgument (max_new == 0) and
  /// ContextOverflow (L + max_new > max_context).
  virtual std::vector<TokenId> greedy_generate(const EmbeddingMatrix& x,
                                               std::size_t max_new) const = 0;
};

/// Toy causal LM: h_t = mean(x_0..x_{t-1}), logits = W h_t + b.
///
/// Small enough to differentiate by hand, which makes it the reference
/// oracle for the zeroth-order estimator.
class ToyCausalMeanModel final : public LogProbProvider {
 public:
  /// Gaussian parameters with per-entry scale 1/sqrt(d); bias is zero.
  static ToyCausalMeanModel random(std::size_t vocab_size, std::size_t embed_dim,
                                   std::uint64_t seed, std::size_t max_context = 256);

  ToyCausalMeanModel(RowMatrix<float> embed_table, RowMatrix<double> out_weight,
                     std::vector<double> out_bias, std::uint64_t seed = 0,
                     std::size_t max_context = 256);

  ProviderMeta meta() const override;
  EmbeddingMatrix embed(std::span<const TokenId> token_ids) const override;
  LogProbTable teacher_forced_logprobs(const EmbeddingMatrix& x,
                                       std::span<const TokenId> target_token_ids,
                                       std::span<const std::size_t> positions) const override;
  /// OpenMP-parallel over batch items.
  std::vector<LogProbTable> batch_logprobs(std::span<const EmbeddingMatrix> batch,
                                           std::span<const TokenId> target_token_ids,
                                           std::span<const std::size_t> positions) const override;
  std::vector<TokenId> greedy_generate(const EmbeddingMatrix& x,
                                       std::size_t max_new) const override;

  const RowMatrix<float>& embed_table() const noexcept { return embed_table_; }
  const RowMatrix<double>& out_weight() const noexcept { return out_weight_; }
  const std::vector<double>& out_bias() const noexcept { return out_bias_; }
  RowMatrix<double>& mutable_out_weight() noexcept { return out_weight_; }
  std::vector<double>& mutable_out_bias() noexcept { return out_bias_; }
  std::uint64_t seed() const noexcept { return seed_; }
  std::size_t vocab_size() const noexcept { return out_bias_.size(); }
  std::size_t embed_dim() const noexcept { return embed_table_.cols(); }

  /// Log-softmax over the vocabulary for a given hidden state.
  void log_softmax(std::span<const double> hidden, std::span<double> out) const;

 private:
  RowMatrix<float> embed_table_;
  RowMatrix<double> out_weight_;
  std::vector<double> out_bias_;
  std::uint64_t seed_;
  std::size_t max_context_;
};

/// Exact gradient of the mean demonstration confidence C-bar (alpha = 1,
/// beta = gamma = 0) with respect to every row of X.
GradientMatrix analytic_confidence_gradient(const ToyCausalMeanModel& toy,
                                            const EmbeddingMatrix& x,
                                            const TokenizedPrompt& prompt);

/// Teacher-forced table at the prompt's scored positions, then the proxy.
ProxyBreakdown evaluate_proxy(const LogProbProvider& provider, const EmbeddingMatrix& x,
                              const TokenizedPrompt& prompt, const ProxyWeights& weights);

}  // namespace iclcal
