#pragma once

#include <string>

// Stderr logging filtered by the CANOPY_LOG environment variable
// (error, warn, info, debug; default warn).
namespace canopy::log {

enum class Level { kError = 0, kWarn = 1, kInfo = 2, kDebug = 3 };

Level threshold();
/// Overrides the environment for the rest of the process.
void set_threshold(Level level);
bool enabled(Level level);
void write(Level level, const std::string& msg);

inline void error(const std::string& m) { write(Level::kError, m); }
inline void warn(const std::string& m) { write(Level::kWarn, m); }
inline void info(const std::string& m) { write(Level::kInfo, m); }
inline void debug(const std::string& m) { write(Level::kDebug, m); }

}  // namespace canopy::log
