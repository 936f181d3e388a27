#include "iclcal/error.hpp"

#include <array>
#include <utility>

namespace iclcal {
namespace {

constexpr std::array<std::pair<ErrorCode, std::string_view>, 14> kNames{{
    {ErrorCode::InvalidArgument, "invalid_argument"},
    {ErrorCode::InvalidPrompt, "invalid_prompt"},
    {ErrorCode::MissingPosition, "missing_position"},
    {ErrorCode::OutOfVocab, "out_of_vocab"},
    {ErrorCode::PositionOutOfRange, "position_out_of_range"},
    {ErrorCode::ShapeMismatch, "shape_mismatch"},
    {ErrorCode::ContextOverflow, "context_overflow"},
    {ErrorCode::DegenerateRow, "degenerate_row"},
    {ErrorCode::DegenerateInput, "degenerate_input"},
    {ErrorCode::NonFiniteProxy, "non_finite_proxy"},
    {ErrorCode::UnmappableSymbol, "unmappable_symbol"},
    {ErrorCode::Unreachable, "unreachable"},
    {ErrorCode::MalformedResponse, "malformed_response"},
    {ErrorCode::HostError, "host_error"},
}};

}  // namespace

std::string_view error_code_name(ErrorCode code) {
  for (const auto& [c, name] : kNames) {
    if (c == code) return name;
  }
  return "host_error";
}

ErrorCode error_code_from_name(std::string_view name) {
  for (const auto& [c, n] : kNames) {
    if (n == name) return c;
  }
  return ErrorCode::HostError;
}

}  // namespace iclcal
