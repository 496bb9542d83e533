#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace mct {

/// Caller violated a precondition (shape mismatch, empty input, bad config).
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// A value left the mathematical domain of an operation (NaN/Inf, zero norm).
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// The data source cannot satisfy the requested episode shape.
class CapacityError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed MCTE / MCTP file. Carries the byte offset where parsing failed.
class FormatError : public std::runtime_error {
 public:
  FormatError(const std::string& what, std::size_t offset)
      : std::runtime_error(what + " (at byte " + std::to_string(offset) + ")"), offset_(offset) {}

  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

}  // namespace mct
