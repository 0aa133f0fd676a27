#pragma once

#include <stdexcept>
#include <string>

namespace meshpop {

// Base of every error raised by the library. `validation()` separates bad
// input (exit code 1 in the CLI) from runtime failures (exit code 2).
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what, bool validation = false)
      : std::runtime_error(what), validation_(validation) {}
  bool validation() const noexcept { return validation_; }

 private:
  bool validation_;
};

#define MESHPOP_DEFINE_ERROR(Name, IsValidation)                          \
  class Name : public Error {                                             \
   public:                                                                \
    explicit Name(const std::string& what)                                \
        : Error(std::string(#Name ": ") + what, IsValidation) {}          \
  };

MESHPOP_DEFINE_ERROR(DomainError, true)
MESHPOP_DEFINE_ERROR(ParseError, true)
MESHPOP_DEFINE_ERROR(LevelError, true)
MESHPOP_DEFINE_ERROR(DuplicateError, true)
MESHPOP_DEFINE_ERROR(ConfigError, true)
MESHPOP_DEFINE_ERROR(CrsError, true)
MESHPOP_DEFINE_ERROR(UnsupportedGeometry, true)
MESHPOP_DEFINE_ERROR(GridMismatch, true)
MESHPOP_DEFINE_ERROR(ShapeError, true)
MESHPOP_DEFINE_ERROR(IncompleteCoverage, false)
MESHPOP_DEFINE_ERROR(MissingBand, false)
MESHPOP_DEFINE_ERROR(DataError, false)
MESHPOP_DEFINE_ERROR(WeightLoadError, false)
MESHPOP_DEFINE_ERROR(NumericalError, false)
MESHPOP_DEFINE_ERROR(IoError, false)

#undef MESHPOP_DEFINE_ERROR

}  // namespace meshpop
