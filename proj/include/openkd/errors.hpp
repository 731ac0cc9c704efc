#pragma once

#include <stdexcept>
#include <string>

namespace openkd {

// Every failure raised by the library derives from Error so callers (the CLI
// in particular) can map them onto exit codes without enumerating subclasses.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define OPENKD_DEFINE_ERROR(Name)              \
  class Name : public Error {                  \
   public:                                     \
    using Error::Error;                        \
  };

OPENKD_DEFINE_ERROR(IngestionError)
OPENKD_DEFINE_ERROR(SchemaError)
OPENKD_DEFINE_ERROR(ConfigurationError)
OPENKD_DEFINE_ERROR(SamplingError)
OPENKD_DEFINE_ERROR(DimensionError)
OPENKD_DEFINE_ERROR(NumericError)
OPENKD_DEFINE_ERROR(DomainError)
OPENKD_DEFINE_ERROR(ArgumentError)
OPENKD_DEFINE_ERROR(OrderingError)
OPENKD_DEFINE_ERROR(SelectionError)
OPENKD_DEFINE_ERROR(ParseError)
OPENKD_DEFINE_ERROR(CacheMissError)
OPENKD_DEFINE_ERROR(EvaluationError)
OPENKD_DEFINE_ERROR(CheckpointError)
OPENKD_DEFINE_ERROR(DivergenceError)

#undef OPENKD_DEFINE_ERROR

class TransportError : public Error {
 public:
  TransportError(const std::string& what, int attempts)
      : Error(what + " (after " + std::to_string(attempts) + " attempt(s))"),
        attempts_(attempts) {}
  int attempts() const noexcept { return attempts_; }

 private:
  int attempts_;
};

}  // namespace openkd
