#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace pcan {

/// Base class for user-facing errors: bad configuration, malformed input
/// files, ill-formed attack scripts. The CLI maps these to exit code 1.
class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public Error {
public:
  using Error::Error;
};

/// Malformed program or scenario text. Line and column are 1-based; zero
/// when the problem is structural rather than lexical.
class ParseError : public Error {
public:
  ParseError(const std::string &message, std::size_t line = 0,
             std::size_t column = 0);

  std::size_t line() const { return line_; }
  std::size_t column() const { return column_; }

private:
  std::size_t line_;
  std::size_t column_;
};

/// Rejected variable-size allocation; canaries are only placed for
/// statically sized stack buffers.
class DynamicAllocationError : public ParseError {
public:
  using ParseError::ParseError;
};

class LayoutError : public Error {
public:
  using Error::Error;
};

class ScriptError : public Error {
public:
  using Error::Error;
};

/// A broken internal invariant. Never caused by user input; exit code 2.
class InvariantError : public std::logic_error {
public:
  using std::logic_error::logic_error;
};

} // namespace pcan
