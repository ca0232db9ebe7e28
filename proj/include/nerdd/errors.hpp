#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace nerdd {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// event_core
struct FormatError : Error {
  using Error::Error;
};

struct CorruptRecordError : Error {
  CorruptRecordError(const std::string& what, std::size_t byte_offset)
      : Error(what + " at byte " + std::to_string(byte_offset)), offset(byte_offset) {}
  std::size_t offset;
};

struct OrderingError : Error {
  OrderingError(const std::string& what, std::size_t byte_offset)
      : Error(what + " at byte " + std::to_string(byte_offset)), offset(byte_offset) {}
  std::size_t offset;
};

// generic argument / shape / numeric problems
struct ParameterError : Error {
  using Error::Error;
};
struct ShapeError : Error {
  using Error::Error;
};
struct NumericError : Error {
  using Error::Error;
};
struct ConfigError : Error {
  using Error::Error;
};
struct ContractError : Error {
  using Error::Error;
};
struct InputError : Error {
  using Error::Error;
};

// registration
struct UndefinedOffsetError : Error {
  using Error::Error;
};

// annotator
struct UnknownTargetError : Error {
  UnknownTargetError(const std::string& what, std::size_t index)
      : Error("edit " + std::to_string(index) + ": " + what), edit_index(index) {}
  std::size_t edit_index;
};

// evaluation
struct UndefinedApError : Error {
  using Error::Error;
};

// dataset_io / service
struct SchemaError : Error {
  using Error::Error;
};
struct IoError : Error {
  using Error::Error;
};
struct NotFoundError : Error {
  using Error::Error;
};

}  // namespace nerdd
