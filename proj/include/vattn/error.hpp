#ifndef VATTN_ERROR_HPP_
#define VATTN_ERROR_HPP_

#include <stdexcept>
#include <string>

namespace vattn {

enum class ErrorKind {
  kDimension,
  kIndex,
  kEmptyTarget,
  kEmptySelection,
  kDistribution,
  kConfig,
  kLength,
  kSamplingConfig,
  kShape,
  kGroupSize,
  kNumeric,
  kPlacement,
  kUnknownId,
  kIo,
  kSchema,
  kVersionMismatch,
  kUsage,
};

const char* ToString(ErrorKind kind);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(ToString(kind)) + ": " + what),
        kind_(kind) {}

  ErrorKind kind() const { return kind_; }

 private:
  ErrorKind kind_;
};

}  // namespace vattn

#endif  // VATTN_ERROR_HPP_
