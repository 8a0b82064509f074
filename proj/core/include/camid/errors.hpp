#pragma once

#include <stdexcept>
#include <string>

namespace camid {

/// Process exit codes shared by the CLI and CI scripts.
/// 0 success, 1 usage error, 2 data error, 3 verification failure.
enum class ExitCode : int {
  Ok = 0,
  Usage = 1,
  Data = 2,
  Verification = 3,
};

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Bad flags, invalid configuration values, unsupported combinations.
class UsageError : public Error {
 public:
  using Error::Error;
};

/// Missing/corrupt/inconsistent input data (files, manifests, labels).
class DataError : public Error {
 public:
  using Error::Error;
};

/// Tensor shape mismatches; the message names the offending dimensions.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A verification pass failed (gradient check, leakage check).
class VerificationError : public Error {
 public:
  using Error::Error;
};

}  // namespace camid
