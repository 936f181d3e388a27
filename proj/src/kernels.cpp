#include "iclcal/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <string>

#include <omp.h>

#include "iclcal/error.hpp"

namespace iclcal::kernels {
namespace {

void check_positions(std::size_t rows, std::span<const TokenId> targets,
                     std::span<const std::size_t> positions, std::size_t vocab) {
  if (targets.size() != rows) {
    throw Error(ErrorCode::ShapeMismatch, "embedding has " + std::to_string(rows) +
                                              " rows but " + std::to_string(targets.size()) +
                                              " target ids were given");
  }
  for (std::size_t t : positions) {
    if (t == 0 || t >= rows) {
      throw Error(ErrorCode::PositionOutOfRange,
                  "position " + std::to_string(t) + " outside [1, " + std::to_string(rows) + ")");
    }
    if (targets[t] >= vocab) {
      throw Error(ErrorCode::OutOfVocab, "target id " + std::to_string(targets[t]));
    }
  }
}

// Runs body(i) for i in [0, n) on the OpenMP team and rethrows the first
// exception (lowest index) on the calling thread.
template <typename Body>
void parallel_for(std::size_t n, Body&& body) {
  std::vector<std::exception_ptr> errors(n);
  const auto count = static_cast<std::ptrdiff_t>(n);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < count; ++i) {
    try {
      body(static_cast<std::size_t>(i));
    } catch (...) {
      errors[static_cast<std::size_t>(i)] = std::current_exception();
    }
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

}  // namespace

LogProbTable toy_logprobs(const ToyCausalMeanModel& model, const EmbeddingMatrix& x,
                          std::span<const TokenId> targets,
                          std::span<const std::size_t> positions) {
  const std::size_t d = model.embed_dim();
  if (x.cols() != d) {
    throw Error(ErrorCode::ShapeMismatch, "embedding width " + std::to_string(x.cols()) +
                                              " != model dimension " + std::to_string(d));
  }
  check_positions(x.rows(), targets, positions, model.vocab_size());

  std::vector<std::size_t> order(positions.begin(), positions.end());
  std::sort(order.begin(), order.end());

  // Running prefix sum over rows in 64-bit; h_t = prefix(t) / t.
  std::vector<double> prefix(d, 0.0);
  std::vector<double> hidden(d);
  std::vector<double> logp(model.vocab_size());
  std::size_t consumed = 0;
  std::vector<LogProbTable::Entry> entries;
  entries.reserve(order.size());
  for (std::size_t t : order) {
    if (!entries.empty() && entries.back().first == t) continue;
    for (; consumed < t; ++consumed) {
      auto row = x.row(consumed);
      for (std::size_t j = 0; j < d; ++j) prefix[j] += static_cast<double>(row[j]);
    }
    const double inv = 1.0 / static_cast<double>(t);
    for (std::size_t j = 0; j < d; ++j) hidden[j] = prefix[j] * inv;
    model.log_softmax(hidden, logp);
    entries.emplace_back(t, logp[targets[t]]);
  }
  return LogProbTable(std::move(entries));
}

namespace serial {

std::vector<LogProbTable> toy_batch_logprobs(const ToyCausalMeanModel& model,
                                             std::span<const EmbeddingMatrix> batch,
                                             std::span<const TokenId> targets,
                                             std::span<const std::size_t> positions) {
  std::vector<LogProbTable> out;
  out.reserve(batch.size());
  for (const auto& x : batch) out.push_back(toy_logprobs(model, x, targets, positions));
  return out;
}

GradientMatrix weighted_sum(std::span<const GradientMatrix> perturbations,
                            std::span<const double> coeffs, double scale) {
  if (perturbations.empty()) return {};
  GradientMatrix out(perturbations[0].rows(), perturbations[0].cols());
  auto acc = out.data();
  for (std::size_t i = 0; i < perturbations.size(); ++i) {
    auto u = perturbations[i].data();
    for (std::size_t k = 0; k < acc.size(); ++k) acc[k] += coeffs[i] * u[k];
  }
  for (double& v : acc) v *= scale;
  return out;
}

std::vector<EmbeddingMatrix> perturb(const EmbeddingMatrix& x,
                                     std::span<const GradientMatrix> perturbations, double mu) {
  std::vector<EmbeddingMatrix> out;
  out.reserve(perturbations.size());
  for (const auto& u : perturbations) {
    EmbeddingMatrix y(x.rows(), x.cols());
    auto src = x.data();
    auto du = u.data();
    auto dst = y.data();
    for (std::size_t k = 0; k < dst.size(); ++k) {
      dst[k] = du[k] == 0.0 ? src[k] : static_cast<float>(static_cast<double>(src[k]) + mu * du[k]);
    }
    out.push_back(std::move(y));
  }
  return out;
}

}  // namespace serial

namespace parallel {

std::vector<LogProbTable> toy_batch_logprobs(const ToyCausalMeanModel& model,
                                             std::span<const EmbeddingMatrix> batch,
                                             std::span<const TokenId> targets,
                                             std::span<const std::size_t> positions) {
  std::vector<LogProbTable> out(batch.size());
  parallel_for(batch.size(), [&](std::size_t i) {
    out[i] = toy_logprobs(model, batch[i], targets, positions);
  });
  return out;
}

GradientMatrix weighted_sum(std::span<const GradientMatrix> perturbations,
                            std::span<const double> coeffs, double scale) {
  if (perturbations.empty()) return {};
  GradientMatrix out(perturbations[0].rows(), perturbations[0].cols());
  auto acc = out.data();
  const auto count = static_cast<std::ptrdiff_t>(acc.size());
  const std::size_t n = perturbations.size();
  // Each coordinate is reduced over samples in index order, as in serial.
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t k = 0; k < count; ++k) {
    double sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) sum += coeffs[i] * perturbations[i].data()[k];
    acc[k] = sum * scale;
  }
  return out;
}

std::vector<EmbeddingMatrix> perturb(const EmbeddingMatrix& x,
                                     std::span<const GradientMatrix> perturbations, double mu) {
  std::vector<EmbeddingMatrix> out(perturbations.size());
  parallel_for(perturbations.size(), [&](std::size_t i) {
    EmbeddingMatrix y(x.rows(), x.cols());
    auto src = x.data();
    auto du = perturbations[i].data();
    auto dst = y.data();
    for (std::size_t k = 0; k < dst.size(); ++k) {
      dst[k] = du[k] == 0.0 ? src[k] : static_cast<float>(static_cast<double>(src[k]) + mu * du[k]);
    }
    out[i] = std::move(y);
  });
  return out;
}

}  // namespace parallel

}  // namespace iclcal::kernels
