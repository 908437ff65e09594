#pragma once

#include <stdexcept>
#include <string>

namespace hypnodx {

enum class ErrorKind {
  Io,
  MissingChannel,
  CorruptHeader,
  LengthMismatch,
  InvalidSpec,
  EmptyFile,
  InvalidArgument,
  SignalTooShort,
  UnsupportedRate,
  DegenerateSegment,
  AllDegenerate,
  SingularCovariance,
  EmptySignal,
  NonpositiveP95,
  ShapeMismatch,
  NumericFailure,
  DatasetTooSmall,
  IncompatibleResolution,
  ZeroTotalWeight,
  SingleClass,
  TooFewSamples,
  CholeskyFailure,
  DimensionMismatch,
};

inline const char* to_string(ErrorKind k) {
  switch (k) {
    case ErrorKind::Io: return "Io";
    case ErrorKind::MissingChannel: return "MissingChannel";
    case ErrorKind::CorruptHeader: return "CorruptHeader";
    case ErrorKind::LengthMismatch: return "LengthMismatch";
    case ErrorKind::InvalidSpec: return "InvalidSpec";
    case ErrorKind::EmptyFile: return "EmptyFile";
    case ErrorKind::InvalidArgument: return "InvalidArgument";
    case ErrorKind::SignalTooShort: return "SignalTooShort";
    case ErrorKind::UnsupportedRate: return "UnsupportedRate";
    case ErrorKind::DegenerateSegment: return "DegenerateSegment";
    case ErrorKind::AllDegenerate: return "AllDegenerate";
    case ErrorKind::SingularCovariance: return "SingularCovariance";
    case ErrorKind::EmptySignal: return "EmptySignal";
    case ErrorKind::NonpositiveP95: return "NonpositiveP95";
    case ErrorKind::ShapeMismatch: return "ShapeMismatch";
    case ErrorKind::NumericFailure: return "NumericFailure";
    case ErrorKind::DatasetTooSmall: return "DatasetTooSmall";
    case ErrorKind::IncompatibleResolution: return "IncompatibleResolution";
    case ErrorKind::ZeroTotalWeight: return "ZeroTotalWeight";
    case ErrorKind::SingleClass: return "SingleClass";
    case ErrorKind::TooFewSamples: return "TooFewSamples";
    case ErrorKind::CholeskyFailure: return "CholeskyFailure";
    case ErrorKind::DimensionMismatch: return "DimensionMismatch";
  }
  return "Unknown";
}

/// Every failure raised by the library carries a kind so callers (the CLI in
/// particular) can map it onto an exit code without parsing messages.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

/// Process exit code for an error kind: 2 I/O, 3 validation, 4 numeric.
inline int exit_code(ErrorKind k) {
  switch (k) {
    case ErrorKind::Io:
      return 2;
    case ErrorKind::NumericFailure:
    case ErrorKind::SingularCovariance:
    case ErrorKind::CholeskyFailure:
      return 4;
    default:
      return 3;
  }
}

}  // namespace hypnodx
