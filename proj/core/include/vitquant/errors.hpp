#pragma once

#include <stdexcept>
#include <string>

namespace vitquant {

// Shape/axis disagreements between tensors.
class DimensionError : public std::runtime_error {
 public:
  explicit DimensionError(const std::string& what) : std::runtime_error(what) {}
};

// A caller violated an operation's stated precondition.
class ContractError : public std::runtime_error {
 public:
  explicit ContractError(const std::string& what) : std::runtime_error(what) {}
};

// Bad user-facing configuration (CLI flags, config files, checkpoints).
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

// NaN/Inf surfaced where the pipeline cannot continue.
class NumericalError : public std::runtime_error {
 public:
  explicit NumericalError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace vitquant
