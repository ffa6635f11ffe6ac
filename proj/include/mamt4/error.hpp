#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace mamt4 {

enum class ErrorKind {
  InvalidShape,
  ShapeMismatch,
  DomainError,
  InvalidAxis,
  NotScalar,
  InvalidConfig,
  InvalidCounts,
  UndefinedMetric,
  EmptyMask,
  InvalidLabel,
  ParseError,
  DuplicateView,
  MissingView,
  MissingGradient,
  EmptyDataset,
  IncompatibleCheckpoint,
  CorruptCheckpoint,
  IoError,
};

std::string_view to_string(ErrorKind kind);

// Every failure raised by the library carries a kind so callers (and tests)
// can branch on the category without parsing messages.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(std::string(to_string(kind)) + ": " + message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

}  // namespace mamt4
