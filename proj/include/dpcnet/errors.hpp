#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace dpcnet {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Operand extents do not agree (matmul inner dims, elementwise shapes, ...).
struct DimensionError : Error {
  using Error::Error;
};

// A model or operator configuration that cannot be realised.
struct ConfigError : Error {
  using Error::Error;
};

// Caller broke a precondition (non-scalar loss, layout mismatch, ...).
struct ContractError : Error {
  using Error::Error;
};

struct IoError : Error {
  using Error::Error;
};
struct FileNotFoundError : IoError {
  using IoError::IoError;
};
struct NotRgbError : IoError {
  using IoError::IoError;
};
struct CorruptStreamError : IoError {
  using IoError::IoError;
};
// Paired directories disagree (ids present on one side only, size mismatch).
struct CorpusError : IoError {
  using IoError::IoError;
};

struct CheckpointError : Error {
  using Error::Error;
};
struct CrcError : CheckpointError {
  using CheckpointError::CheckpointError;
};
struct ShapeMismatchError : CheckpointError {
  using CheckpointError::CheckpointError;
};
struct VersionError : CheckpointError {
  using CheckpointError::CheckpointError;
};

struct NanLossError : Error {
  NanLossError(std::uint64_t step_, const std::string& what)
      : Error(what), step(step_) {}
  std::uint64_t step;
};

}  // namespace dpcnet
