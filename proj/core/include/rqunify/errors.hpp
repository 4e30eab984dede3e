#pragma once

#include <stdexcept>
#include <string>

namespace rqunify {

// Error taxonomy shared by the whole project. The CLI maps these to exit
// codes: ConfigError -> 2, NumericError -> 3, IoError -> 4. ContractError
// covers shape/precondition violations inside the library.

struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct ContractError : std::runtime_error {
  explicit ContractError(const std::string& msg) : std::runtime_error(msg) {}
};

struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

struct IoError : std::runtime_error {
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace rqunify
