#include "canopy/log.hpp"

#include <atomic>
#include <cstdlib>
#include <iostream>
#include <mutex>
#include <string_view>

namespace canopy::log {
namespace {

Level from_env() {
  const char* v = std::getenv("CANOPY_LOG");
  if (v == nullptr) return Level::kWarn;
  const std::string_view s(v);
  if (s == "error") return Level::kError;
  if (s == "info") return Level::kInfo;
  if (s == "debug") return Level::kDebug;
  return Level::kWarn;
}

std::atomic<int>& current() {
  static std::atomic<int> level{static_cast<int>(from_env())};
  return level;
}

constexpr std::string_view kNames[] = {"error", "warn", "info", "debug"};

}  // namespace

Level threshold() { return static_cast<Level>(current().load()); }
void set_threshold(Level level) { current().store(static_cast<int>(level)); }
bool enabled(Level level) { return static_cast<int>(level) <= current().load(); }

void write(Level level, const std::string& msg) {
  if (!enabled(level)) return;
  static std::mutex mu;
  std::lock_guard lock(mu);
  std::cerr << "[canopy " << kNames[static_cast<int>(level)] << "] " << msg << '\n';
}

}  // namespace canopy::log
