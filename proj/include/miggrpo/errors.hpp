// Copyright 2026 The miggrpo Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace miggrpo {

inline constexpr int kUsageExit = 1;
inline constexpr int kDataErrorExit = 2;
inline constexpr int kNumericErrorExit = 3;

/// Malformed, missing, or inconsistent input data (task files, checkpoints,
/// configs). Maps to CLI exit code 2.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Non-finite loss, exploding importance ratio, or similar numeric failure.
/// Maps to CLI exit code 3.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace miggrpo
