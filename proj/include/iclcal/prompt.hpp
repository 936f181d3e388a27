#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

namespace iclcal {

using TokenId = std::uint32_t;

/// A few-shot prompt: tokens, the output span of every demonstration, and the
/// position where the query begins. Spans are kept in demonstration order.
struct TokenizedPrompt {
  std::vector<TokenId> token_ids;
  std::vector<std::vector<std::size_t>> demo_output_spans;
  std::size_t query_start = 0;

  std::size_t length() const { return token_ids.size(); }
  std::size_t num_demos() const { return demo_output_spans.size(); }

  /// Union of all span positions, ascending.
  std::vector<std::size_t> scored_positions() const;

  /// Throws Error(InvalidPrompt) unless: T >= 1, every span nonempty,
  /// spans ordered and disjoint, and max span index < query_start <= L.
  void validate() const;
};

}  // namespace iclcal
