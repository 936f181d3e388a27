#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace iclcal {

enum class ErrorCode {
  InvalidArgument,
  InvalidPrompt,
  MissingPosition,
  OutOfVocab,
  PositionOutOfRange,
  ShapeMismatch,
  ContextOverflow,
  DegenerateRow,
  DegenerateInput,
  NonFiniteProxy,
  UnmappableSymbol,
  Unreachable,
  MalformedResponse,
  HostError,
};

/// Stable snake_case name, used on the wire and in diagnostics.
std::string_view error_code_name(ErrorCode code);

/// Reverse of error_code_name; unknown names map to HostError.
ErrorCode error_code_from_name(std::string_view name);

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace iclcal
