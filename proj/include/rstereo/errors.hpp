#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace rstereo {

// Shape or extent incompatibility between operands.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// A documented precondition of an operation was violated by the caller.
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// A computation produced NaN or Inf where finite values are required.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed file contents; carries the byte offset where parsing stopped.
class ParseError : public IoError {
 public:
  ParseError(const std::string& what, std::uint64_t offset)
      : IoError(what + " (at byte " + std::to_string(offset) + ")"), offset_(offset) {}
  std::uint64_t offset() const noexcept { return offset_; }

 private:
  std::uint64_t offset_;
};

// Checkpoint rejected; names the tensor (or section) that failed verification.
class LoadError : public IoError {
 public:
  LoadError(const std::string& what, std::string tensor)
      : IoError(what + ": " + tensor), tensor_(std::move(tensor)) {}
  const std::string& tensor() const noexcept { return tensor_; }

 private:
  std::string tensor_;
};

class ConfigConflictError : public LoadError {
 public:
  using LoadError::LoadError;
};

}  // namespace rstereo
