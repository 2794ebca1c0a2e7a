#include "capsar/log.hpp"

#include <atomic>
#include <iostream>
#include <mutex>

namespace capsar::log {

namespace {
std::atomic<Level> g_level{Level::info};
std::mutex g_mutex;

void emit(Level lvl, const char* tag, std::string_view message) {
  if (lvl < g_level.load()) return;
  std::lock_guard<std::mutex> lock(g_mutex);
  std::cerr << "[" << tag << "] " << message << '\n';
}
}  // namespace

void set_level(Level level) { g_level.store(level); }
Level level() { return g_level.load(); }

void info(std::string_view message) { emit(Level::info, "info", message); }
void warn(std::string_view message) { emit(Level::warning, "warn", message); }
void error(std::string_view message) { emit(Level::error, "error", message); }

}  // namespace capsar::log
