#pragma once

#include <stdexcept>
#include <string>

namespace reflgrad {

// Invalid model/run configuration (bad bounds, malformed spec, ...).
struct config_error : std::runtime_error {
  explicit config_error(const std::string& m) : std::runtime_error(m) {}
};

// Malformed or unusable measurement data.
struct data_error : std::runtime_error {
  explicit data_error(const std::string& m) : std::runtime_error(m) {}
};

// Numerical failure during evaluation (non-finite values, singular scales).
struct numeric_error : std::runtime_error {
  explicit numeric_error(const std::string& m) : std::runtime_error(m) {}
};

}  // namespace reflgrad
