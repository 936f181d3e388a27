#pragma once

#include <cstddef>
#include <span>
#include <utility>
#include <vector>

#include "iclcal/prompt.hpp"

namespace iclcal {

/// Teacher-forced log-probabilities at scored positions. Values are <= 0;
/// -infinity is allowed (probability underflow), NaN is not.
class LogProbTable {
 public:
  using Entry = std::pair<std::size_t, double>;

  LogProbTable() = default;
  explicit LogProbTable(std::vector<Entry> entries);

  /// Throws Error(MissingPosition) if the position is absent.
  double at(std::size_t position) const;
  bool contains(std::size_t position) const;

  std::size_t size() const noexcept { return entries_.size(); }
  /// Sorted by position.
  const std::vector<Entry>& entries() const noexcept { return entries_; }

  friend bool operator==(const LogProbTable&, const LogProbTable&) = default;

 private:
  std::vector<Entry> entries_;
};

struct ProxyWeights {
  double alpha = 0.6;
  double beta = 0.3;
  double gamma = 0.1;
  double q = 0.1;

  /// Throws Error(InvalidArgument) on negative weights, a sum off by more
  /// than 1e-9, or q outside (0, 1).
  void validate() const;
};

struct ProxyBreakdown {
  double mean_confidence = 0.0;  // C-bar
  double robustness = 0.0;       // R
  double info_gain = 0.0;        // G
  double score = 0.0;            // f

  friend bool operator==(const ProxyBreakdown&, const ProxyBreakdown&) = default;
};

/// Per-demonstration geometric-mean probability of the output span, in
/// demonstration order.
std::vector<double> demo_confidences(const LogProbTable& table, const TokenizedPrompt& prompt);

/// q-quantile of the pooled true-token probabilities across every output span
/// (linear interpolation, h = q (n - 1)).
double pooled_robustness(const LogProbTable& table, const TokenizedPrompt& prompt, double q);

/// Mean positive increment of consecutive confidences; 0 for a single demo.
double info_gain(std::span<const double> confidences);

ProxyBreakdown proxy_score(const LogProbTable& table, const TokenizedPrompt& prompt,
                           const ProxyWeights& weights);

/// Interpolated quantile of an arbitrary sample; sorts a copy.
double quantile_linear(std::vector<double> values, double q);

}  // namespace iclcal
