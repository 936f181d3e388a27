#include "iclcal/proxy.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "iclcal/error.hpp"

namespace iclcal {

LogProbTable::LogProbTable(std::vector<Entry> entries) : entries_(std::move(entries)) {
  std::sort(entries_.begin(), entries_.end(),
            [](const Entry& a, const Entry& b) { return a.first < b.first; });
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    if (i > 0 && entries_[i].first == entries_[i - 1].first) {
      throw Error(ErrorCode::InvalidArgument,
                  "duplicate log-prob position " + std::to_string(entries_[i].first));
    }
    const double v = entries_[i].second;
    if (std::isnan(v) || v > 0.0) {
      throw Error(ErrorCode::InvalidArgument,
                  "log-prob at position " + std::to_string(entries_[i].first) +
                      " is not a log-probability");
    }
  }
}

bool LogProbTable::contains(std::size_t position) const {
  auto it = std::lower_bound(entries_.begin(), entries_.end(), position,
                             [](const Entry& e, std::size_t p) { return e.first < p; });
  return it != entries_.end() && it->first == position;
}

double LogProbTable::at(std::size_t position) const {
  auto it = std::lower_bound(entries_.begin(), entries_.end(), position,
                             [](const Entry& e, std::size_t p) { return e.first < p; });
  if (it == entries_.end() || it->first != position) {
    throw Error(ErrorCode::MissingPosition,
                "no log-prob for position " + std::to_string(position));
  }
  return it->second;
}

void ProxyWeights::validate() const {
  if (!(alpha >= 0.0 && beta >= 0.0 && gamma >= 0.0)) {
    throw Error(ErrorCode::InvalidArgument, "proxy weights must be nonnegative");
  }
  if (std::abs(alpha + beta + gamma - 1.0) > 1e-9) {
    throw Error(ErrorCode::InvalidArgument, "proxy weights must sum to 1");
  }
  if (!(q > 0.0 && q < 1.0)) {
    throw Error(ErrorCode::InvalidArgument, "quantile level q must lie in (0, 1)");
  }
}

std::vector<double> demo_confidences(const LogProbTable& table, const TokenizedPrompt& prompt) {
  std::vector<double> out;
  out.reserve(prompt.num_demos());
  for (const auto& span : prompt.demo_output_spans) {
    double sum = 0.0;
    for (std::size_t t : span) sum += table.at(t);
    out.push_back(std::exp(sum / static_cast<double>(span.size())));
  }
  return out;
}

double quantile_linear(std::vector<double> values, double q) {
  if (values.empty()) throw Error(ErrorCode::InvalidArgument, "quantile of an empty sample");
  std::sort(values.begin(), values.end());
  const double h = q * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  const double frac = h - static_cast<double>(lo);
  return values[lo] + frac * (values[hi] - values[lo]);
}

double pooled_robustness(const LogProbTable& table, const TokenizedPrompt& prompt, double q) {
  if (!(q > 0.0 && q < 1.0)) {
    throw Error(ErrorCode::InvalidArgument, "quantile level q must lie in (0, 1)");
  }
  std::vector<double> pooled;
  for (const auto& span : prompt.demo_output_spans) {
    for (std::size_t t : span) pooled.push_back(std::exp(table.at(t)));
  }
  return quantile_linear(std::move(pooled), q);
}

double info_gain(std::span<const double> confidences) {
  if (confidences.size() < 2) return 0.0;
  double sum = 0.0;
  for (std::size_t i = 1; i < confidences.size(); ++i) {
    sum += std::max(0.0, confidences[i] - confidences[i - 1]);
  }
  return sum / static_cast<double>(confidences.size() - 1);
}

ProxyBreakdown proxy_score(const LogProbTable& table, const TokenizedPrompt& prompt,
                           const ProxyWeights& weights) {
  const auto conf = demo_confidences(table, prompt);
  ProxyBreakdown out;
  double sum = 0.0;
  for (double c : conf) sum += c;
  out.mean_confidence = conf.empty() ? 0.0 : sum / static_cast<double>(conf.size());
  out.robustness = pooled_robustness(table, prompt, weights.q);
  out.info_gain = info_gain(conf);
  // Rounding in the weighted sum can overshoot 1 by an ulp.
  out.score = std::clamp(weights.alpha * out.mean_confidence + weights.beta * out.robustness +
                             weights.gamma * out.info_gain,
                         0.0, 1.0);
  return out;
}

}  // namespace iclcal
