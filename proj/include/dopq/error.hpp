#pragma once

#include <stdexcept>
#include <string>

namespace dopq {

// Shape/dimension disagreements between operands.
struct DimensionError : std::invalid_argument {
  explicit DimensionError(const std::string& what) : std::invalid_argument(what) {}
};

// Inputs outside an operation's mathematical domain (empty vectors,
// negative values fed to a log quantizer, angles past the branch guard).
struct DomainError : std::domain_error {
  explicit DomainError(const std::string& what) : std::domain_error(what) {}
};

// Invalid or inconsistent configuration (infeasible quantizer parameters,
// empty search grids, malformed config files).
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

// Missing or corrupt external data (files, corpora).
struct DataError : std::runtime_error {
  explicit DataError(const std::string& what) : std::runtime_error(what) {}
};

// A violated internal invariant; maps to exit code 4 in the CLI.
struct InternalError : std::logic_error {
  explicit InternalError(const std::string& what) : std::logic_error(what) {}
};

}  // namespace dopq
