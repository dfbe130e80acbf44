#pragma once

#include <stdexcept>
#include <string>

namespace specmc {

// Bad arguments or mismatched shapes at an API boundary.
class usage_error : public std::invalid_argument {
 public:
  explicit usage_error(const std::string& msg) : std::invalid_argument(msg) {}
};

// Values outside the mathematical domain of an operation (e.g. log of a
// nonpositive intensity).
class domain_error : public std::runtime_error {
 public:
  explicit domain_error(const std::string& msg) : std::runtime_error(msg) {}
};

// Rank-deficient or otherwise unidentifiable calibration design.
class calibration_error : public std::runtime_error {
 public:
  explicit calibration_error(const std::string& msg) : std::runtime_error(msg) {}
};

// Filesystem-level failure (missing file, short write, ...).
class io_error : public std::runtime_error {
 public:
  explicit io_error(const std::string& msg) : std::runtime_error(msg) {}
};

// Structurally invalid file contents: wrong magic, unsupported version,
// inconsistent shapes.
class format_error : public std::runtime_error {
 public:
  explicit format_error(const std::string& msg) : std::runtime_error(msg) {}
};

// File ends before its declared payload does.
class truncation_error : public format_error {
 public:
  explicit truncation_error(const std::string& msg) : format_error(msg) {}
};

}  // namespace specmc
