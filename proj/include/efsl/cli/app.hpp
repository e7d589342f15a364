// Copyright 2026 The efsl Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>
#include <vector>

namespace efsl::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitInvalid = 1;  // bad command line, config or input files
inline constexpr int kExitFailure = 2;  // anything that goes wrong while running

/// Runs one command line (args[0] is the program name) and returns the exit
/// code. Progress goes to stderr and <out>/log.txt; stdout receives only the
/// path of the command's main output file.
int run(const std::vector<std::string>& args);

}  // namespace efsl::cli
