#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace sem {

/// Shape mismatches, invalid hyper-parameters and other caller errors.
class DomainError : public std::invalid_argument {
  public:
    using std::invalid_argument::invalid_argument;
};

/// Malformed dataset files. Carries the byte offset where decoding failed.
class IngestionError : public std::runtime_error {
  public:
    IngestionError(const std::string& what, std::uint64_t offset)
        : std::runtime_error(what + " (byte offset " + std::to_string(offset) + ")"), detail_(what), offset_(offset) {}

    std::uint64_t offset() const noexcept { return offset_; }
    const std::string& detail() const noexcept { return detail_; }

  private:
    std::string detail_;
    std::uint64_t offset_;
};

/// Checkpoint corruption (bad magic, CRC mismatch, truncation).
class IntegrityError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

/// Non-finite values during training.
class NumericalError : public std::runtime_error {
  public:
    NumericalError(const std::string& what, std::string layer)
        : std::runtime_error(what + " (first offending layer: " + layer + ")"), layer_(std::move(layer)) {}

    const std::string& layer() const noexcept { return layer_; }

  private:
    std::string layer_;
};

/// Bad command-line or configuration input.
class UsageError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

}  // namespace sem
