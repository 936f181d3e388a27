#include "iclcal/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "iclcal/error.hpp"
#include "iclcal/kernels.hpp"
#include "iclcal/rng.hpp"

namespace iclcal {

void ProviderMeta::validate() const {
  if (vocab_size < 2) throw Error(ErrorCode::InvalidArgument, "vocab_size must be >= 2");
  if (embed_dim < 1) throw Error(ErrorCode::InvalidArgument, "embed_dim must be >= 1");
  if (!(mean_row_norm > 0.0) || !std::isfinite(mean_row_norm)) {
    throw Error(ErrorCode::InvalidArgument, "mean_row_norm must be positive");
  }
}

std::vector<LogProbTable> LogProbProvider::batch_logprobs(
    std::span<const EmbeddingMatrix> batch, std::span<const TokenId> target_token_ids,
    std::span<const std::size_t> positions) const {
  std::vector<LogProbTable> out;
  out.reserve(batch.size());
  for (const auto& x : batch) {
    out.push_back(teacher_forced_logprobs(x, target_token_ids, positions));
  }
  return out;
}

ToyCausalMeanModel ToyCausalMeanModel::random(std::size_t vocab_size, std::size_t embed_dim,
                                              std::uint64_t seed, std::size_t max_context) {
  if (vocab_size < 2 || embed_dim < 1) {
    throw Error(ErrorCode::InvalidArgument, "toy model needs V >= 2 and d >= 1");
  }
  Rng rng(seed);
  const double scale = 1.0 / std::sqrt(static_cast<double>(embed_dim));
  RowMatrix<float> table(vocab_size, embed_dim);
  for (float& v : table.data()) v = static_cast<float>(scale * rng.normal());
  RowMatrix<double> weight(vocab_size, embed_dim);
  for (double& v : weight.data()) v = scale * rng.normal();
  return ToyCausalMeanModel(std::move(table), std::move(weight),
                            std::vector<double>(vocab_size, 0.0), seed, max_context);
}

ToyCausalMeanModel::ToyCausalMeanModel(RowMatrix<float> embed_table,
                                       RowMatrix<double> out_weight,
                                       std::vector<double> out_bias, std::uint64_t seed,
                                       std::size_t max_context)
    : embed_table_(std::move(embed_table)),
      out_weight_(std::move(out_weight)),
      out_bias_(std::move(out_bias)),
      seed_(seed),
      max_context_(max_context) {
  if (embed_table_.rows() != out_weight_.rows() || embed_table_.cols() != out_weight_.cols()) {
    throw Error(ErrorCode::ShapeMismatch, "embedding table and output weight shapes differ");
  }
  if (out_bias_.size() != embed_table_.rows() || embed_table_.rows() < 2 ||
      embed_table_.cols() < 1) {
    throw Error(ErrorCode::ShapeMismatch, "toy model parameter shapes are inconsistent");
  }
}

ProviderMeta ToyCausalMeanModel::meta() const {
  ProviderMeta m;
  m.vocab_size = vocab_size();
  m.embed_dim = embed_dim();
  double total = 0.0;
  for (std::size_t v = 0; v < embed_table_.rows(); ++v) {
    double sq = 0.0;
    for (float e : embed_table_.row(v)) sq += static_cast<double>(e) * e;
    total += std::sqrt(sq);
  }
  m.mean_row_norm = total / static_cast<double>(embed_table_.rows());
  m.max_context = max_context_;
  return m;
}

EmbeddingMatrix ToyCausalMeanModel::embed(std::span<const TokenId> token_ids) const {
  EmbeddingMatrix x(token_ids.size(), embed_dim());
  for (std::size_t t = 0; t < token_ids.size(); ++t) {
    if (token_ids[t] >= vocab_size()) {
      throw Error(ErrorCode::OutOfVocab, "token id " + std::to_string(token_ids[t]) +
                                             " >= vocabulary size " +
                                             std::to_string(vocab_size()));
    }
    auto src = embed_table_.row(token_ids[t]);
    std::copy(src.begin(), src.end(), x.row(t).begin());
  }
  return x;
}

void ToyCausalMeanModel::log_softmax(std::span<const double> hidden,
                                     std::span<double> out) const {
  const std::size_t d = embed_dim();
  double max_logit = -std::numeric_limits<double>::infinity();
  for (std::size_t v = 0; v < out.size(); ++v) {
    auto w = out_weight_.row(v);
    double z = out_bias_[v];
    for (std::size_t j = 0; j < d; ++j) z += w[j] * hidden[j];
    out[v] = z;
    max_logit = std::max(max_logit, z);
  }
  double sum = 0.0;
  for (double z : out) sum += std::exp(z - max_logit);
  const double lse = max_logit + std::log(sum);
  for (double& z : out) z = std::min(0.0, z - lse);
}

LogProbTable ToyCausalMeanModel::teacher_forced_logprobs(
    const EmbeddingMatrix& x, std::span<const TokenId> target_token_ids,
    std::span<const std::size_t> positions) const {
  return kernels::toy_logprobs(*this, x, target_token_ids, positions);
}

std::vector<LogProbTable> ToyCausalMeanModel::batch_logprobs(
    std::span<const EmbeddingMatrix> batch, std::span<const TokenId> target_token_ids,
    std::span<const std::size_t> positions) const {
  return kernels::parallel::toy_batch_logprobs(*this, batch, target_token_ids, positions);
}

std::vector<TokenId> ToyCausalMeanModel::greedy_generate(const EmbeddingMatrix& x,
                                                         std::size_t max_new) const {
  if (max_new == 0) throw Error(ErrorCode::InvalidArgument, "max_new must be >= 1");
  if (x.cols() != embed_dim()) {
    throw Error(ErrorCode::ShapeMismatch, "embedding width does not match model");
  }
  if (x.rows() == 0) throw Error(ErrorCode::ShapeMismatch, "empty prompt");
  if (x.rows() + max_new > max_context_) {
    throw Error(ErrorCode::ContextOverflow,
                std::to_string(x.rows()) + " prompt rows + " + std::to_string(max_new) +
                    " new tokens exceed the context of " + std::to_string(max_context_));
  }
  const std::size_t d = embed_dim();
  std::vector<double> prefix(d, 0.0);
  for (std::size_t t = 0; t < x.rows(); ++t) {
    auto row = x.row(t);
    for (std::size_t j = 0; j < d; ++j) prefix[j] += static_cast<double>(row[j]);
  }
  std::size_t count = x.rows();
  std::vector<double> hidden(d);
  std::vector<double> logp(vocab_size());
  std::vector<TokenId> out;
  out.reserve(max_new);
  for (std::size_t step = 0; step < max_new; ++step) {
    for (std::size_t j = 0; j < d; ++j) hidden[j] = prefix[j] / static_cast<double>(count);
    log_softmax(hidden, logp);
    // max_element returns the first maximum, i.e. the lowest id on ties.
    const auto best = static_cast<TokenId>(
        std::distance(logp.begin(), std::max_element(logp.begin(), logp.end())));
    out.push_back(best);
    auto row = embed_table_.row(best);
    for (std::size_t j = 0; j < d; ++j) prefix[j] += static_cast<double>(row[j]);
    ++count;
  }
  return out;
}

GradientMatrix analytic_confidence_gradient(const ToyCausalMeanModel& toy,
                                            const EmbeddingMatrix& x,
                                            const TokenizedPrompt& prompt) {
  const std::size_t d = toy.embed_dim();
  const std::size_t vocab = toy.vocab_size();
  GradientMatrix grad(x.rows(), d);
  const auto table = toy.teacher_forced_logprobs(x, prompt.token_ids, prompt.scored_positions());
  const auto conf = demo_confidences(table, prompt);
  const double inv_demos = 1.0 / static_cast<double>(prompt.num_demos());

  std::vector<double> prefix(d), hidden(d), logp(vocab), dl_dh(d);
  for (std::size_t i = 0; i < prompt.num_demos(); ++i) {
    const auto& span = prompt.demo_output_spans[i];
    // dC/dl_t = c_i / (T |Y_i|)
    const double weight = conf[i] * inv_demos / static_cast<double>(span.size());
    for (std::size_t t : span) {
      std::fill(prefix.begin(), prefix.end(), 0.0);
      for (std::size_t s = 0; s < t; ++s) {
        auto row = x.row(s);
        for (std::size_t j = 0; j < d; ++j) prefix[j] += static_cast<double>(row[j]);
      }
      for (std::size_t j = 0; j < d; ++j) hidden[j] = prefix[j] / static_cast<double>(t);
      toy.log_softmax(hidden, logp);
      // dl_t/dh_t = W^T (e_target - softmax)
      const auto& w = toy.out_weight();
      std::fill(dl_dh.begin(), dl_dh.end(), 0.0);
      for (std::size_t v = 0; v < vocab; ++v) {
        const double coeff = (v == prompt.token_ids[t] ? 1.0 : 0.0) - std::exp(logp[v]);
        auto wrow = w.row(v);
        for (std::size_t j = 0; j < d; ++j) dl_dh[j] += coeff * wrow[j];
      }
      // dh_t/dx_s = I / t for every s < t.
      const double scale = weight / static_cast<double>(t);
      for (std::size_t s = 0; s < t; ++s) {
        auto g = grad.row(s);
        for (std::size_t j = 0; j < d; ++j) g[j] += scale * dl_dh[j];
      }
    }
  }
  return grad;
}

ProxyBreakdown evaluate_proxy(const LogProbProvider& provider, const EmbeddingMatrix& x,
                              const TokenizedPrompt& prompt, const ProxyWeights& weights) {
  const auto table =
      provider.teacher_forced_logprobs(x, prompt.token_ids, prompt.scored_positions());
  return proxy_score(table, prompt, weights);
}

}  // namespace iclcal
