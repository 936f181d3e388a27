#include "iclcal/prompt.hpp"

#include <algorithm>
#include <string>

#include "iclcal/error.hpp"

namespace iclcal {

std::vector<std::size_t> TokenizedPrompt::scored_positions() const {
  std::vector<std::size_t> out;
  for (const auto& span : demo_output_spans) out.insert(out.end(), span.begin(), span.end());
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

void TokenizedPrompt::validate() const {
  auto fail = [](const std::string& what) { throw Error(ErrorCode::InvalidPrompt, what); };
  if (demo_output_spans.empty()) fail("prompt has no demonstration output spans");
  if (query_start > token_ids.size()) fail("query_start beyond prompt length");

  bool have_prev = false;
  std::size_t prev_max = 0;
  for (std::size_t i = 0; i < demo_output_spans.size(); ++i) {
    const auto& span = demo_output_spans[i];
    if (span.empty()) fail("demonstration span " + std::to_string(i) + " is empty");
    auto [lo, hi] = std::minmax_element(span.begin(), span.end());
    if (have_prev && *lo <= prev_max) {
      fail("demonstration spans overlap or are out of order at span " + std::to_string(i));
    }
    std::vector<std::size_t> sorted(span.begin(), span.end());
    std::sort(sorted.begin(), sorted.end());
    if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) {
      fail("demonstration span " + std::to_string(i) + " repeats a position");
    }
    prev_max = *hi;
    have_prev = true;
  }
  if (prev_max >= query_start) fail("output span reaches into the query");
}

}  // namespace iclcal
