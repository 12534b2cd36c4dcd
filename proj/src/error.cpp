#include "vattn/error.hpp"

namespace vattn {

const char* ToString(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kDimension: return "dimension-error";
    case ErrorKind::kIndex: return "index-error";
    case ErrorKind::kEmptyTarget: return "empty-target-error";
    case ErrorKind::kEmptySelection: return "empty-selection-error";
    case ErrorKind::kDistribution: return "distribution-error";
    case ErrorKind::kConfig: return "config-error";
    case ErrorKind::kLength: return "length-error";
    case ErrorKind::kSamplingConfig: return "sampling-config-error";
    case ErrorKind::kShape: return "shape-error";
    case ErrorKind::kGroupSize: return "group-size-error";
    case ErrorKind::kNumeric: return "numeric-error";
    case ErrorKind::kPlacement: return "placement-error";
    case ErrorKind::kUnknownId: return "unknown-id-error";
    case ErrorKind::kIo: return "io-error";
    case ErrorKind::kSchema: return "schema-error";
    case ErrorKind::kVersionMismatch: return "version-mismatch-error";
    case ErrorKind::kUsage: return "usage-error";
  }
  return "error";
}

}  // namespace vattn
