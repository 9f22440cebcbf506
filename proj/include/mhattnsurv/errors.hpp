#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace mhattnsurv {

/// Shape disagreement between operands (matrix kernels, bag vs. model).
struct DimensionError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// Input outside the operation's domain (empty bag, k > points, ...).
struct DomainError : std::domain_error {
  using std::domain_error::domain_error;
};

/// Invalid hyper-parameters or run configuration.
struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// Non-finite value where a finite one is required.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// API called out of order (e.g. backward without a forward cache).
struct UsageError : std::logic_error {
  using std::logic_error::logic_error;
};

/// Missing or unreadable file.
struct PathError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Malformed binary or text file. Carries the byte offset of the failure.
class FormatError : public std::runtime_error {
 public:
  FormatError(const std::string& what, std::uint64_t offset)
      : std::runtime_error(what + " (at byte offset " + std::to_string(offset) + ")"),
        offset_(offset) {}

  std::uint64_t offset() const noexcept { return offset_; }

 private:
  std::uint64_t offset_;
};

}  // namespace mhattnsurv
