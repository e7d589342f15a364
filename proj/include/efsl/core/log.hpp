// Copyright 2026 The efsl Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <sstream>
#include <string>
#include <string_view>

namespace efsl {

enum class LogLevel { quiet = 0, info = 1, debug = 2 };

void set_log_level(LogLevel level);
LogLevel log_level();
// Also append every emitted line to `path`; an empty path stops the copy.
void set_log_file(const std::filesystem::path& path);

// One line to stderr, prefixed with elapsed seconds since process start.
void log_line(LogLevel level, std::string_view message);

template <typename... Args>
void log_info(const Args&... args) {
  if (log_level() < LogLevel::info) return;
  std::ostringstream os;
  (os << ... << args);
  log_line(LogLevel::info, os.str());
}

// Emitted at every level, including quiet.
template <typename... Args>
void log_error(const Args&... args) {
  std::ostringstream os;
  os << "error: ";
  (os << ... << args);
  log_line(LogLevel::quiet, os.str());
}

template <typename... Args>
void log_debug(const Args&... args) {
  if (log_level() < LogLevel::debug) return;
  std::ostringstream os;
  (os << ... << args);
  log_line(LogLevel::debug, os.str());
}

}  // namespace efsl
