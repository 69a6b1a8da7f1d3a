#pragma once

#include <stdexcept>
#include <string>

namespace stepwise {

// Error taxonomy mirrors the CLI exit codes: config 2, data 3, numeric 4.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Graph misuse (wrong shapes, bad var ids). Always a bug in the caller.
struct ShapeError : std::logic_error {
  using std::logic_error::logic_error;
};

}  // namespace stepwise
