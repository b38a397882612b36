#pragma once

#include <stdexcept>
#include <string>

namespace dql {

/// Base class for every failure raised by this library.
class error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A caller-supplied value violated a precondition (epsilon <= 0, ell <= 1, ...).
class invalid_parameter : public error {
 public:
  using error::error;
};

/// The shared inverse-cdf draw fell beyond F_T(t_cap).
class truncation_overflow : public error {
 public:
  using error::error;
};

/// The decoder's reproduced shared draw disagrees with the description.
class desync_error : public error {
 public:
  using error::error;
};

/// Malformed wire data: truncated code, trailing bits, bad magic/version.
class decode_error : public error {
 public:
  using error::error;
};

/// A request outside the representable range (t > t_cap, description overflow).
class range_error : public error {
 public:
  using error::error;
};

/// Internal invariant broken; indicates table corruption, not caller misuse.
class internal_error : public error {
 public:
  using error::error;
};

/// Session/seed configuration problems (unknown seed id, ...).
class config_error : public error {
 public:
  using error::error;
};

}  // namespace dql
