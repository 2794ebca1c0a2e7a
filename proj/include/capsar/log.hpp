#pragma once

#include <string_view>

namespace capsar::log {

enum class Level { debug, info, warning, error, off };

// Messages below this level are dropped. Defaults to info.
void set_level(Level level);
Level level();

// All diagnostics go to stderr.
void info(std::string_view message);
void warn(std::string_view message);
void error(std::string_view message);

}  // namespace capsar::log
