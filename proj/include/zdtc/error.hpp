#pragma once

#include <stdexcept>
#include <string>

namespace zdtc {

/// Bad or inconsistent input data (flow logs, model files, labels).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Bad invocation: unknown config keys, malformed values, missing arguments.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace zdtc
