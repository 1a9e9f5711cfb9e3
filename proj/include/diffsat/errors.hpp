#pragma once

#include <stdexcept>
#include <string>

namespace diffsat {

// Process exit codes used by the command line tool.
enum class ExitCode : int {
  kOk = 0,
  kFailure = 1,
  kUsage = 2,
  kDependencyMissing = 3,
  kDataValidation = 4,
  kNumerical = 5,
};

class Error : public std::runtime_error {
 public:
  Error(const std::string& what, ExitCode code) : std::runtime_error(what), code_(code) {}
  ExitCode code() const noexcept { return code_; }

 private:
  ExitCode code_;
};

/// Invalid configuration value (unknown schedule kind, odd projection dim, ...).
class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error(what, ExitCode::kUsage) {}
};

/// Caller broke a documented precondition (shape mismatch, bad index, ...).
class ContractViolation : public Error {
 public:
  explicit ContractViolation(const std::string& what) : Error(what, ExitCode::kFailure) {}
};

/// A required artifact (checkpoint, manifest, file) is missing.
class DependencyError : public Error {
 public:
  explicit DependencyError(const std::string& what)
      : Error(what, ExitCode::kDependencyMissing) {}
};

/// Malformed or inconsistent input data.
class DataError : public Error {
 public:
  explicit DataError(const std::string& what) : Error(what, ExitCode::kDataValidation) {}
};

/// Training or sampling produced non-finite values.
class NumericalError : public Error {
 public:
  explicit NumericalError(const std::string& what) : Error(what, ExitCode::kNumerical) {}
};

#define DIFFSAT_EXPECT(cond, msg)                                     \
  do {                                                                \
    if (!(cond)) throw ::diffsat::ContractViolation(std::string(msg)); \
  } while (0)

}  // namespace diffsat
