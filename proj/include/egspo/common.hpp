#pragma once

/**
 * Shared error taxonomy and small utilities.
 *
 * Error categories map 1:1 onto the CLI exit codes:
 *   ConfigError   -> 2 (usage / config / missing inputs)
 *   TrainingAbort -> 3 (non-finite loss, divergence)
 *   DataError     -> 4 (malformed logs / dumps / schema violations)
 * Everything else (InvalidInput, StateError, IoError) is a programming or
 * environment error and surfaces as an ordinary exception.
 */

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace egspo {

using TokenId = int32_t;
using TokenSeq = std::vector<TokenId>;

// ============================================================================
// Errors
// ============================================================================

struct InvalidInput : std::runtime_error {
  explicit InvalidInput(const std::string& what) : std::runtime_error(what) {}
};

struct StateError : std::runtime_error {
  explicit StateError(const std::string& what) : std::runtime_error(what) {}
};

struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

struct DataError : std::runtime_error {
  // line = 1-based line number in the offending file, 0 if not line-oriented
  DataError(const std::string& what, uint64_t line = 0)
      : std::runtime_error(line ? what + " (line " + std::to_string(line) + ")" : what),
        line_number(line) {}
  uint64_t line_number = 0;
};

struct IoError : std::runtime_error {
  explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

struct TrainingAbort : std::runtime_error {
  explicit TrainingAbort(const std::string& what) : std::runtime_error(what) {}
};

// ============================================================================
// Numeric guards
// ============================================================================

inline bool all_finite(const std::vector<double>& v) {
  for (double x : v) {
    if (!std::isfinite(x)) return false;
  }
  return true;
}

/// First non-finite index, or -1 when all entries are finite.
inline int64_t first_non_finite(const std::vector<double>& v) {
  for (size_t i = 0; i < v.size(); ++i) {
    if (!std::isfinite(v[i])) return static_cast<int64_t>(i);
  }
  return -1;
}

}  // namespace egspo
