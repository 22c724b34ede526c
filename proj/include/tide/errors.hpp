#pragma once

#include <stdexcept>
#include <string>

namespace tide {

// Root of every error raised by the library. The concrete subclasses name
// the failure category so callers (and the CLI) can react per category.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define TIDE_DEFINE_ERROR(Name)                   \
  class Name : public Error {                     \
   public:                                        \
    explicit Name(const std::string& what)        \
        : Error(std::string(#Name ": ") + what) {} \
  };

TIDE_DEFINE_ERROR(DimError)
TIDE_DEFINE_ERROR(ConfigError)
TIDE_DEFINE_ERROR(FormatError)
TIDE_DEFINE_ERROR(ParseError)
TIDE_DEFINE_ERROR(SamplingError)
TIDE_DEFINE_ERROR(NumericError)
TIDE_DEFINE_ERROR(DataError)
TIDE_DEFINE_ERROR(IOError)

#undef TIDE_DEFINE_ERROR

}  // namespace tide
