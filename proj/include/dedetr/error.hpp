#pragma once

#include <stdexcept>
#include <string>

namespace dedetr {

// Error taxonomy shared by the library and the CLI. The CLI maps these to
// process exit codes; library code throws and never calls exit().
struct ShapeError : std::runtime_error {
  explicit ShapeError(const std::string& msg) : std::runtime_error("shape error: " + msg) {}
};

struct AxisError : std::runtime_error {
  explicit AxisError(const std::string& msg) : std::runtime_error("axis error: " + msg) {}
};

struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error("config error: " + msg) {}
};

struct ContractError : std::runtime_error {
  explicit ContractError(const std::string& msg) : std::runtime_error("contract error: " + msg) {}
};

struct GeometryError : std::runtime_error {
  explicit GeometryError(const std::string& msg) : std::runtime_error("geometry error: " + msg) {}
};

struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& msg) : std::runtime_error("numeric error: " + msg) {}
};

struct AugmentationError : std::runtime_error {
  explicit AugmentationError(const std::string& msg)
      : std::runtime_error("augmentation error: " + msg) {}
};

struct IoError : std::runtime_error {
  explicit IoError(const std::string& msg) : std::runtime_error("io error: " + msg) {}
};

}  // namespace dedetr
