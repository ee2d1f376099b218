#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace ien {

// Base class for every error raised by the library. Subclasses name the
// failure mode so callers (and the CLI) can map them to exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define IEN_DEFINE_ERROR(Name)            \
  class Name : public Error {             \
   public:                                \
    using Error::Error;                   \
  };

IEN_DEFINE_ERROR(ShapeMismatch)
IEN_DEFINE_ERROR(NonFinite)
IEN_DEFINE_ERROR(NotNormalized)
IEN_DEFINE_ERROR(PlacementFailure)
IEN_DEFINE_ERROR(CenterOutOfGrid)
IEN_DEFINE_ERROR(TooShort)
IEN_DEFINE_ERROR(CorruptArchive)
IEN_DEFINE_ERROR(ConfigMismatch)
IEN_DEFINE_ERROR(SequenceTooLong)
IEN_DEFINE_ERROR(BboxOutOfGrid)
IEN_DEFINE_ERROR(LengthMismatch)

#undef IEN_DEFINE_ERROR

class NonFiniteLoss : public Error {
 public:
  NonFiniteLoss(std::size_t step, double value)
      : Error("non-finite loss " + std::to_string(value) + " at step " + std::to_string(step)),
        step_(step) {}
  std::size_t step() const { return step_; }

 private:
  std::size_t step_;
};

}  // namespace ien
