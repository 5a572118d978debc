#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace gandef {

enum class ErrorKind {
  ShapeMismatch,
  InvalidAttribute,
  NonScalarLoss,
  GraphNotFinalized,
  NonFiniteValue,
  NonFiniteGradient,
  UnknownArch,
  BadMagic,
  TruncatedFile,
  CountMismatch,
  BadRecordSize,
  BadLabel,
  OddBatchSize,
  EmptyTestSet,
  NoEpochs,
  DatasetMissing,
  IoFailure,
  InvalidConfig,
};

constexpr std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::ShapeMismatch: return "shape-mismatch";
    case ErrorKind::InvalidAttribute: return "invalid-attribute";
    case ErrorKind::NonScalarLoss: return "non-scalar-loss";
    case ErrorKind::GraphNotFinalized: return "graph-not-finalized";
    case ErrorKind::NonFiniteValue: return "non-finite-value";
    case ErrorKind::NonFiniteGradient: return "non-finite-gradient";
    case ErrorKind::UnknownArch: return "unknown-arch";
    case ErrorKind::BadMagic: return "bad-magic";
    case ErrorKind::TruncatedFile: return "truncated-file";
    case ErrorKind::CountMismatch: return "count-mismatch";
    case ErrorKind::BadRecordSize: return "bad-record-size";
    case ErrorKind::BadLabel: return "bad-label";
    case ErrorKind::OddBatchSize: return "odd-batch-size";
    case ErrorKind::EmptyTestSet: return "empty-test-set";
    case ErrorKind::NoEpochs: return "no-epochs";
    case ErrorKind::DatasetMissing: return "dataset-missing";
    case ErrorKind::IoFailure: return "io-failure";
    case ErrorKind::InvalidConfig: return "invalid-config";
  }
  return "unknown";
}

/// Every failure raised by the library carries a machine-checkable kind.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

inline void require(bool cond, ErrorKind kind, const std::string& what) {
  if (!cond) throw Error(kind, what);
}

}  // namespace gandef
