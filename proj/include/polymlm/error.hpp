// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace polymlm {

/// Error categories. The CLI maps each to a stable process exit code.
enum class ErrorKind {
  kDimension,
  kIndex,
  kConfig,
  kData,
  kNumeric,
  kProtocol,
  kPlan,
  kIo,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

#define POLYMLM_DEFINE_ERROR(Name, Kind)                                  \
  class Name : public Error {                                             \
   public:                                                                \
    explicit Name(const std::string& what) : Error(ErrorKind::Kind, what) {} \
  };

POLYMLM_DEFINE_ERROR(DimensionError, kDimension)
POLYMLM_DEFINE_ERROR(IndexError, kIndex)
POLYMLM_DEFINE_ERROR(ConfigError, kConfig)
POLYMLM_DEFINE_ERROR(DataError, kData)
POLYMLM_DEFINE_ERROR(NumericError, kNumeric)
POLYMLM_DEFINE_ERROR(ProtocolError, kProtocol)
POLYMLM_DEFINE_ERROR(PlanError, kPlan)
POLYMLM_DEFINE_ERROR(IoError, kIo)

#undef POLYMLM_DEFINE_ERROR

inline const char* error_kind_name(ErrorKind k) {
  switch (k) {
    case ErrorKind::kDimension: return "dimension";
    case ErrorKind::kIndex: return "index";
    case ErrorKind::kConfig: return "config";
    case ErrorKind::kData: return "data";
    case ErrorKind::kNumeric: return "numeric";
    case ErrorKind::kProtocol: return "protocol";
    case ErrorKind::kPlan: return "plan";
    case ErrorKind::kIo: return "io";
  }
  return "unknown";
}

}  // namespace polymlm
