#pragma once

#include <cstdint>
#include <span>
#include <utility>

namespace iclcal {

/// Exact one-sided McNemar p-value P(X >= b), X ~ Bin(b + c, 1/2).
/// b counts discordant pairs in favour of the alternative. 1 when b + c = 0.
double mcnemar_one_sided(std::uint64_t b, std::uint64_t c);

struct SpearmanResult {
  double rho = 0.0;
  double p_value = 1.0;  // one-sided, H1: rho > 0
};

/// Spearman rank correlation with average ranks for ties. The p-value is
/// exact (permutation) for n <= 8 and uses the Student-t approximation
/// otherwise; rho = 1 gives p = 0 and rho = -1 gives p = 1.
/// Throws InvalidArgument (size mismatch, n < 3) and DegenerateInput
/// (a constant vector).
SpearmanResult spearman_one_sided(std::span<const double> xs, std::span<const double> ys);

}  // namespace iclcal
