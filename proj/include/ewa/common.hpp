#pragma once

#include <stdexcept>
#include <string>

namespace ewa {

// Bad tensor shapes: rank or dimension mismatches, empty dims.
class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Semantically invalid arguments or state (out-of-range label, T < N, ...).
class ValueError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed input files. Messages name the offending byte offset where known.
class ParseError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Filesystem trouble: missing files, short reads, failed writes.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Training aborted mid-run (non-finite loss or gradient).
class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline void check_value(bool cond, const std::string& msg) {
  if (!cond) throw ValueError(msg);
}

inline void check_shape(bool cond, const std::string& msg) {
  if (!cond) throw ShapeError(msg);
}

}  // namespace ewa
