#pragma once

#include <iostream>
#include <mutex>
#include <string_view>

namespace mre::log {

enum class Level { debug, info, warn, error };

inline Level& threshold() {
    static Level level = Level::info;
    return level;
}

inline std::mutex& sink_mutex() {
    static std::mutex m;
    return m;
}

// One logfmt-style line per event on stderr.
inline void write(Level level, std::string_view module, std::string_view msg) {
    if (level < threshold()) return;
    static constexpr const char* kNames[] = {"debug", "info", "warn", "error"};
    std::lock_guard lock(sink_mutex());
    std::cerr << "level=" << kNames[static_cast<int>(level)] << " module=" << module << " msg=\"";
    for (char c : msg) {
        if (c == '"' || c == '\\') std::cerr << '\\';
        std::cerr << (c == '\n' ? ' ' : c);
    }
    std::cerr << "\"\n";
}

inline void info(std::string_view module, std::string_view msg) { write(Level::info, module, msg); }
inline void warn(std::string_view module, std::string_view msg) { write(Level::warn, module, msg); }
inline void error(std::string_view module, std::string_view msg) { write(Level::error, module, msg); }
inline void debug(std::string_view module, std::string_view msg) { write(Level::debug, module, msg); }

} // namespace mre::log
