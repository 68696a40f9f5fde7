// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace mpa {

// Every error raised by the library derives from Error so the CLI can map it
// onto a process exit code.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual int exit_code() const { return 1; }
};

class ConfigError : public Error {
 public:
  using Error::Error;
  int exit_code() const override { return 2; }
};

// IO failures and malformed files share an exit code.
class FormatError : public Error {
 public:
  using Error::Error;
  int exit_code() const override { return 3; }
};

class NumericError : public Error {
 public:
  using Error::Error;
  int exit_code() const override { return 4; }
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

class IndexError : public Error {
 public:
  using Error::Error;
};

class ContractError : public Error {
 public:
  using Error::Error;
};

}  // namespace mpa
