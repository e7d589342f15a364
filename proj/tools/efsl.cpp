// Copyright 2026 The efsl Authors
// SPDX-License-Identifier: Apache-2.0

#include "efsl/cli/app.hpp"

int main(int argc, char** argv) { return efsl::cli::run(std::vector<std::string>(argv, argv + argc)); }
