#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace molhf {

enum class ErrorCode {
  UnsupportedToken,
  UnmatchedRingClosure,
  UnmatchedParenthesis,
  UnknownElement,
  DisconnectedGraph,
  TooManyAtoms,
  EmptyGraph,
  EmptyBatch,
  ShapeMismatch,
  NonScalarOutput,
  SingularJacobian,
  ZeroScale,
  ZeroStd,
  OddSpatialDim,
  OddSplitAxis,
  IndivisibleN,
  BadNoiseScale,
  NonFinite,
  VersionMismatch,
  CorruptBlob,
  InvalidMolecule,
  WidthMismatch,
  InvalidConfig,
  IoError,
};

inline std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::UnsupportedToken: return "UnsupportedToken";
    case ErrorCode::UnmatchedRingClosure: return "UnmatchedRingClosure";
    case ErrorCode::UnmatchedParenthesis: return "UnmatchedParenthesis";
    case ErrorCode::UnknownElement: return "UnknownElement";
    case ErrorCode::DisconnectedGraph: return "DisconnectedGraph";
    case ErrorCode::TooManyAtoms: return "TooManyAtoms";
    case ErrorCode::EmptyGraph: return "EmptyGraph";
    case ErrorCode::EmptyBatch: return "EmptyBatch";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::NonScalarOutput: return "NonScalarOutput";
    case ErrorCode::SingularJacobian: return "SingularJacobian";
    case ErrorCode::ZeroScale: return "ZeroScale";
    case ErrorCode::ZeroStd: return "ZeroStd";
    case ErrorCode::OddSpatialDim: return "OddSpatialDim";
    case ErrorCode::OddSplitAxis: return "OddSplitAxis";
    case ErrorCode::IndivisibleN: return "IndivisibleN";
    case ErrorCode::BadNoiseScale: return "BadNoiseScale";
    case ErrorCode::NonFinite: return "NonFinite";
    case ErrorCode::VersionMismatch: return "VersionMismatch";
    case ErrorCode::CorruptBlob: return "CorruptBlob";
    case ErrorCode::InvalidMolecule: return "InvalidMolecule";
    case ErrorCode::WidthMismatch: return "WidthMismatch";
    case ErrorCode::InvalidConfig: return "InvalidConfig";
    case ErrorCode::IoError: return "IoError";
  }
  return "Unknown";
}

/// Every failure raised by the library carries a machine-readable code.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace molhf
