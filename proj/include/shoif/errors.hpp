#pragma once

#include <stdexcept>
#include <string>

namespace shoif {

enum class ErrorKind {
  DimensionTooLarge,
  DomainViolation,
  ShapeError,
  SingularGram,
  TooLargeForBruteForce,
  OrderTooHigh,
  ArgumentError,
  Underdetermined,
  EmptyData,
  UnstableResampling,
  DegenerateScale,
  PerturbationInfeasible,
  ValidationError,
};

inline const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::DimensionTooLarge: return "DimensionTooLarge";
    case ErrorKind::DomainViolation: return "DomainViolation";
    case ErrorKind::ShapeError: return "ShapeError";
    case ErrorKind::SingularGram: return "SingularGram";
    case ErrorKind::TooLargeForBruteForce: return "TooLargeForBruteForce";
    case ErrorKind::OrderTooHigh: return "OrderTooHigh";
    case ErrorKind::ArgumentError: return "ArgumentError";
    case ErrorKind::Underdetermined: return "Underdetermined";
    case ErrorKind::EmptyData: return "EmptyData";
    case ErrorKind::UnstableResampling: return "UnstableResampling";
    case ErrorKind::DegenerateScale: return "DegenerateScale";
    case ErrorKind::PerturbationInfeasible: return "PerturbationInfeasible";
    case ErrorKind::ValidationError: return "ValidationError";
  }
  return "Unknown";
}

// Every library failure is a shoif::Error carrying a machine-readable kind.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(std::string(to_string(kind)) + ": " + message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) {
  throw Error(kind, message);
}

}  // namespace shoif
