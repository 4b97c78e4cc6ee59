#pragma once

#include <charconv>
#include <cstdint>
#include <cstdio>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace envformer {

// ----------------------------------------------------------------------------
// Error hierarchy. Everything thrown by the library derives from Error so
// callers (and the CLI exit-code mapping) can discriminate on category.
// ----------------------------------------------------------------------------

class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Shape mismatch between operands. Carries both shapes.
class DimensionError : public Error {
 public:
  DimensionError(const std::string& msg, std::vector<std::size_t> lhs,
                 std::vector<std::size_t> rhs)
      : Error(msg), lhs_shape(std::move(lhs)), rhs_shape(std::move(rhs)) {}
  std::vector<std::size_t> lhs_shape;
  std::vector<std::size_t> rhs_shape;
};

/// NaN/Inf produced where a finite value is required.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Precondition violated by the caller.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Malformed input file. `record` is the offending line/record index when known.
class ParseError : public Error {
 public:
  explicit ParseError(const std::string& msg, std::int64_t record = -1)
      : Error(msg), record(record) {}
  std::int64_t record;
};

/// Structurally valid input with inconsistent content (dims, versions).
class SchemaError : public Error {
 public:
  using Error::Error;
};

/// Training diverged. `step` is the offending optimization step.
class TrainingError : public Error {
 public:
  TrainingError(const std::string& msg, std::int64_t step)
      : Error(msg), step(step) {}
  std::int64_t step;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// ----------------------------------------------------------------------------
// Small formatting / hashing helpers shared across modules.
// ----------------------------------------------------------------------------

inline std::string shape_to_string(const std::vector<std::size_t>& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ", ";
    out += std::to_string(shape[i]);
  }
  out += "]";
  return out;
}

/// Shortest round-trip decimal rendering, locale-free. Used for CSV/report
/// output so reruns with identical seeds produce byte-identical files.
inline std::string format_double(double v) {
  char buf[40];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline std::string format_float(float v) {
  char buf[40];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

constexpr std::uint64_t kFnvOffset = 0xcbf29ce484222325ull;
constexpr std::uint64_t kFnvPrime = 0x100000001b3ull;

inline std::uint64_t fnv1a(const void* data, std::size_t n,
                           std::uint64_t h = kFnvOffset) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= kFnvPrime;
  }
  return h;
}

inline std::uint64_t fnv1a(std::string_view s, std::uint64_t h = kFnvOffset) {
  return fnv1a(s.data(), s.size(), h);
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return std::string(buf);
}

}  // namespace envformer
