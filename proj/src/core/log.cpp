// Copyright 2026 The efsl Authors
// SPDX-License-Identifier: Apache-2.0

#include "efsl/core/log.hpp"

#include <atomic>
#include <chrono>
#include <cstdio>
#include <mutex>

namespace efsl {

namespace {
std::atomic<LogLevel> g_level{LogLevel::info};
std::mutex g_mutex;
std::FILE* g_file = nullptr;
const auto g_start = std::chrono::steady_clock::now();
}  // namespace

void set_log_level(LogLevel level) { g_level = level; }
LogLevel log_level() { return g_level; }

void set_log_file(const std::filesystem::path& path) {
  std::lock_guard lock(g_mutex);
  if (g_file) std::fclose(g_file);
  g_file = path.empty() ? nullptr : std::fopen(path.c_str(), "a");
}

void log_line(LogLevel level, std::string_view message) {
  if (level > g_level.load()) return;
  const double t = std::chrono::duration<double>(std::chrono::steady_clock::now() - g_start).count();
  std::lock_guard lock(g_mutex);
  std::fprintf(stderr, "[%8.2fs] %.*s\n", t, static_cast<int>(message.size()), message.data());
  if (g_file) {
    std::fprintf(g_file, "[%8.2fs] %.*s\n", t, static_cast<int>(message.size()), message.data());
    std::fflush(g_file);
  }
}

}  // namespace efsl
