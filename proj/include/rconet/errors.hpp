#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace rconet {

// Shape/extent disagreement between operands.
struct ShapeError : std::runtime_error {
  explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

// Mathematically invalid input (log of non-positive, empty reduction axis).
struct DomainError : std::runtime_error {
  explicit DomainError(const std::string& msg) : std::runtime_error(msg) {}
};

// Caller violated an API precondition.
struct ContractError : std::runtime_error {
  explicit ContractError(const std::string& msg) : std::runtime_error(msg) {}
};

// Non-finite value where a finite one is required.
struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

// Malformed serialized file; carries the byte offset of the failure.
struct FormatError : std::runtime_error {
  FormatError(const std::string& msg, std::size_t offset)
      : std::runtime_error(msg + " (at byte offset " + std::to_string(offset) + ")"),
        offset(offset) {}
  std::size_t offset;
};

// Negative-sampling policy cannot be satisfied by the given batch.
struct SamplingError : std::runtime_error {
  explicit SamplingError(const std::string& msg) : std::runtime_error(msg) {}
};

// A dataset-level constraint (e.g. relabel balance) is unsatisfiable.
struct ConstraintError : std::runtime_error {
  explicit ConstraintError(const std::string& msg) : std::runtime_error(msg) {}
};

// Filesystem failure; message names the path.
struct IoError : std::runtime_error {
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace rconet
