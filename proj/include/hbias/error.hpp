#pragma once

#include <stdexcept>
#include <string>

namespace hbias {

// Base of every error the library raises. Callers that only care about
// "did it fail" catch this; the subclasses exist so tests and the CLI can
// tell failure kinds apart.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define HBIAS_DEFINE_ERROR(Name)            \
  class Name : public Error {               \
   public:                                  \
    using Error::Error;                     \
  };

HBIAS_DEFINE_ERROR(TemplateError)
HBIAS_DEFINE_ERROR(IntegrityError)
HBIAS_DEFINE_ERROR(SaturationError)
HBIAS_DEFINE_ERROR(CorruptFileError)
HBIAS_DEFINE_ERROR(ValidationError)
HBIAS_DEFINE_ERROR(ShapeError)
HBIAS_DEFINE_ERROR(UndefinedSimilarityError)
HBIAS_DEFINE_ERROR(InsufficientDataError)
HBIAS_DEFINE_ERROR(DegenerateError)
HBIAS_DEFINE_ERROR(DesignError)
HBIAS_DEFINE_ERROR(NestingError)
HBIAS_DEFINE_ERROR(DatasetError)
HBIAS_DEFINE_ERROR(SpecificationError)
HBIAS_DEFINE_ERROR(EmptyGroupError)
HBIAS_DEFINE_ERROR(ConfigError)
HBIAS_DEFINE_ERROR(ParseError)
HBIAS_DEFINE_ERROR(IoError)

#undef HBIAS_DEFINE_ERROR

}  // namespace hbias
