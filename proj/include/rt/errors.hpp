#pragma once

#include <stdexcept>
#include <string>

namespace rt {

// Error taxonomy. The cli maps categories to exit codes:
// ConfigError -> 2, DataError -> 3, NumericError -> 4, anything else -> 1.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ConfigError : Error {
  using Error::Error;
};
struct DataError : Error {
  using Error::Error;
};
struct NumericError : Error {
  using Error::Error;
};

// malformed decimal string handed to tokenize_number
struct MalformedNumber : NumericError {
  using NumericError::NumericError;
};
// token run that does not form a valid numeral (duplicate dot, place gap, ...)
struct MalformedNumeral : NumericError {
  using NumericError::NumericError;
};
// digit place outside the vocabulary grid
struct PlaceOutOfRange : NumericError {
  using NumericError::NumericError;
};
// value not representable under a property schema
struct ValueOutOfRange : NumericError {
  using NumericError::NumericError;
};

struct UnknownProperty : DataError {
  using DataError::DataError;
};
struct UnknownId : DataError {
  using DataError::DataError;
};
struct UnknownToken : DataError {
  using DataError::DataError;
};
struct NoPropertyBlock : DataError {
  using DataError::DataError;
};
// token id outside the embedding table
struct IdOutOfRange : DataError {
  using DataError::DataError;
};
// property prediction asked for on a sequence with no masked numeral slots
struct NoMaskedNumerals : DataError {
  using DataError::DataError;
};

// mask plan selects nothing to generate
struct EmptyMask : ConfigError {
  using ConfigError::ConfigError;
};
// vector/matrix dimensions disagree with the encoding config
struct ShapeMismatch : ConfigError {
  using ConfigError::ConfigError;
};

}  // namespace rt
