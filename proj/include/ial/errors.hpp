// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace ial {

/// Base class for every error raised by the engine.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define IAL_DEFINE_ERROR(Name)              \
  class Name : public Error {               \
   public:                                  \
    using Error::Error;                     \
  }

IAL_DEFINE_ERROR(NonFiniteError);
IAL_DEFINE_ERROR(ShapeError);
IAL_DEFINE_ERROR(ValidationError);
IAL_DEFINE_ERROR(PreconditionError);
IAL_DEFINE_ERROR(MissingInstanceError);
IAL_DEFINE_ERROR(TrainingDiverged);
IAL_DEFINE_ERROR(UndefinedMetric);
IAL_DEFINE_ERROR(ParseError);
IAL_DEFINE_ERROR(SchemaError);
IAL_DEFINE_ERROR(FormatError);
IAL_DEFINE_ERROR(CorruptError);
IAL_DEFINE_ERROR(DuplicateError);
IAL_DEFINE_ERROR(ConflictError);
IAL_DEFINE_ERROR(NotFoundError);

#undef IAL_DEFINE_ERROR

}  // namespace ial
