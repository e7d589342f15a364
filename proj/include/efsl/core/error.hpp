// Copyright 2026 The efsl Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace efsl {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Incompatible tensor or config shapes.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// NaN or Inf produced where a finite value is required.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Truncated, corrupted or otherwise malformed archive / container bytes.
class FormatError : public Error {
 public:
  using Error::Error;
};

class VersionError : public FormatError {
 public:
  using FormatError::FormatError;
};

// Rejected user input: config values, sampling requests, dataset specs.
class ValidationError : public Error {
 public:
  using Error::Error;
};

// Broken internal contract (e.g. gradient leaking into frozen weights).
class InternalError : public Error {
 public:
  using Error::Error;
};

}  // namespace efsl
