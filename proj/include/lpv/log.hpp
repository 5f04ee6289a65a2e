#pragma once

// Line-oriented, timestamped logging to stderr.

#include "lpv/common.hpp"

#include <chrono>
#include <ctime>
#include <iostream>

namespace lpv::log {

enum class Level { debug, info, warn, error };

inline Level& threshold() {
  static Level level = Level::info;
  return level;
}

inline const char* level_name(Level l) {
  switch (l) {
    case Level::debug: return "DEBUG";
    case Level::info: return "INFO";
    case Level::warn: return "WARN";
    case Level::error: return "ERROR";
  }
  return "?";
}

inline std::string timestamp() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(now.time_since_epoch()).count() % 1000;
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[40];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%S", &tm);
  char out[48];
  std::snprintf(out, sizeof out, "%s.%03dZ", buf, static_cast<int>(ms));
  return out;
}

template <class... Args>
void write(Level level, const Args&... args) {
  if (level < threshold()) return;
  std::cerr << timestamp() << ' ' << level_name(level) << ' ' << cat(args...) << '\n';
}

template <class... Args>
void info(const Args&... args) { write(Level::info, args...); }
template <class... Args>
void warn(const Args&... args) { write(Level::warn, args...); }
template <class... Args>
void error(const Args&... args) { write(Level::error, args...); }
template <class... Args>
void debug(const Args&... args) { write(Level::debug, args...); }

}  // namespace lpv::log
