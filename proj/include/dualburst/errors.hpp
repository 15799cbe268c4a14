#pragma once

#include <stdexcept>
#include <string>

namespace dualburst {

// Invalid argument values: negative rates, out-of-range levels, shape mismatches.
struct DomainError : std::domain_error {
  using std::domain_error::domain_error;
};

// Inconsistent or missing configuration (e.g. clean anchor requested but absent).
struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Container header is not DBT1 or carries an unknown dtype.
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Container payload ends early or sizes disagree.
struct CorruptionError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace dualburst
