#pragma once

#include <stdexcept>
#include <string>

namespace vfd {

// Base of every error raised by the library. `kind()` is a stable short name
// that the CLI maps onto exit codes.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& what)
      : std::runtime_error(kind + ": " + what), kind_(std::move(kind)) {}
  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

#define VFD_DEFINE_ERROR(Name)                                             \
  class Name : public Error {                                              \
   public:                                                                 \
    explicit Name(const std::string& what) : Error(#Name, what) {}         \
  };

// tensor-autograd
VFD_DEFINE_ERROR(ShapeMismatch)
VFD_DEFINE_ERROR(EmptyAxis)
VFD_DEFINE_ERROR(DivisibilityError)
VFD_DEFINE_ERROR(NonScalarLoss)

// synthetic-scenes / dataset IO
VFD_DEFINE_ERROR(IoError)

// conditioning
VFD_DEFINE_ERROR(EmptyViewList)

// diffusion-core
VFD_DEFINE_ERROR(BadRange)
VFD_DEFINE_ERROR(TOutOfRange)
VFD_DEFINE_ERROR(BadSteps)

// diagnostics / metrics
VFD_DEFINE_ERROR(BadTrials)
VFD_DEFINE_ERROR(TooFewSamples)

// cli-harness
VFD_DEFINE_ERROR(ConfigError)
VFD_DEFINE_ERROR(MissingDataset)
VFD_DEFINE_ERROR(CheckpointMismatch)

#undef VFD_DEFINE_ERROR

}  // namespace vfd
