#pragma once

// Data-parallel inner loops of the calibration engine. Every kernel comes in
// two flavours: a plain serial reference and an OpenMP version. The parallel
// version splits work only across independent outputs and keeps each
// output's reduction order identical to the serial one, so both are
// bit-identical; the tests hold them to that.

#include <cstddef>
#include <span>
#include <vector>

#include "iclcal/matrix.hpp"
#include "iclcal/model.hpp"

namespace iclcal::kernels {

/// Single forward pass of the toy model at the requested positions.
LogProbTable toy_logprobs(const ToyCausalMeanModel& model, const EmbeddingMatrix& x,
                          std::span<const TokenId> targets,
                          std::span<const std::size_t> positions);

namespace serial {

std::vector<LogProbTable> toy_batch_logprobs(const ToyCausalMeanModel& model,
                                             std::span<const EmbeddingMatrix> batch,
                                             std::span<const TokenId> targets,
                                             std::span<const std::size_t> positions);

/// sum_i coeffs[i] * perturbations[i] / n, accumulated in index order.
GradientMatrix weighted_sum(std::span<const GradientMatrix> perturbations,
                            std::span<const double> coeffs, double scale);

/// x + mu * u for each u, rounded to float.
std::vector<EmbeddingMatrix> perturb(const EmbeddingMatrix& x,
                                     std::span<const GradientMatrix> perturbations, double mu);

}  // namespace serial

namespace parallel {

std::vector<LogProbTable> toy_batch_logprobs(const ToyCausalMeanModel& model,
                                             std::span<const EmbeddingMatrix> batch,
                                             std::span<const TokenId> targets,
                                             std::span<const std::size_t> positions);

GradientMatrix weighted_sum(std::span<const GradientMatrix> perturbations,
                            std::span<const double> coeffs, double scale);

std::vector<EmbeddingMatrix> perturb(const EmbeddingMatrix& x,
                                     std::span<const GradientMatrix> perturbations, double mu);

}  // namespace parallel

}  // namespace iclcal::kernels
