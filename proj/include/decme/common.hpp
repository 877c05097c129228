#pragma once

#include <Eigen/Dense>

#include <atomic>
#include <cstddef>
#include <iostream>
#include <stdexcept>
#include <string>
#include <string_view>

namespace decme {

/// A point in the p-dimensional parameter space.
using ParamVec = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

/// Base of every error thrown by this library.
class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

class DimensionMismatch : public Error {
public:
  DimensionMismatch(std::string_view what, std::size_t expected, std::size_t got)
      : Error(std::string(what) + ": expected dimension " + std::to_string(expected) +
              ", got " + std::to_string(got)) {}
};

class EigenFailure : public Error {
public:
  using Error::Error;
};

inline void require_dim(std::string_view what, Eigen::Index expected, Eigen::Index got) {
  if (expected != got)
    throw DimensionMismatch(what, static_cast<std::size_t>(expected), static_cast<std::size_t>(got));
}

// Minimal diagnostics channel. Warnings are off unless enabled by the caller.
enum class LogLevel { quiet = 0, warn = 1, info = 2 };

inline std::atomic<int>& log_level_storage() {
  static std::atomic<int> level{static_cast<int>(LogLevel::quiet)};
  return level;
}

inline void set_log_level(LogLevel level) { log_level_storage().store(static_cast<int>(level)); }

inline void log(LogLevel level, std::string_view msg) {
  if (static_cast<int>(level) <= log_level_storage().load())
    std::clog << (level == LogLevel::warn ? "[decme warn] " : "[decme] ") << msg << '\n';
}

} // namespace decme
