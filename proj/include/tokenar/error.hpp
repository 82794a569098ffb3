#pragma once

#include <stdexcept>
#include <string>

namespace tokenar {

// Bad arguments or violated preconditions.
struct InvalidArgument : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Filesystem and format failures. The message always names the path.
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Non-finite losses or gradients.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Checkpoint produced under a configuration that does not match the requested one.
struct VersionError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Configuration document rejected during validation.
struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

inline void require(bool cond, const std::string& what) {
  if (!cond) throw InvalidArgument(what);
}

}  // namespace tokenar
