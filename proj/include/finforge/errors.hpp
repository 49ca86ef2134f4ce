#pragma once

#include <stdexcept>
#include <string>

namespace finforge {

// Error taxonomy shared by the library and the CLI. The CLI maps each family
// to its exit code: usage = 1, data = 2, numeric = 3.

class UsageError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Raised when a corpus slice cannot seed a unigram vocabulary.
class InsufficientCorpus : public DataError {
 public:
  using DataError::DataError;
};

namespace detail {

[[noreturn]] inline void usage_fail(const std::string& what) { throw UsageError(what); }

inline void require(bool ok, const std::string& what) {
  if (!ok) usage_fail(what);
}

}  // namespace detail
}  // namespace finforge
