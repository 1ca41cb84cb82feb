#pragma once

#include <stdexcept>
#include <string>

namespace samlab {

/// Bad user input: config files, CLI arguments, malformed data files. CLI exit code 1.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Contract violation or numerical failure while running. CLI exit code 2.
struct EngineError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace samlab
