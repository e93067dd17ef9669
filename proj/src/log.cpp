#include "calcseg/log.hpp"

#include <iostream>
#include <mutex>

namespace calcseg {

namespace {

std::mutex g_mutex;

void stderr_sink(LogLevel level, const std::string& msg) {
    std::cerr << (level == LogLevel::Warning ? "[warning] " : "[info] ") << msg << '\n';
}

LogSink& sink() {
    static LogSink s = stderr_sink;
    return s;
}

void emit(LogLevel level, const std::string& msg) {
    std::lock_guard<std::mutex> lock(g_mutex);
    if (sink()) sink()(level, msg);
}

}  // namespace

LogSink set_log_sink(LogSink s) {
    std::lock_guard<std::mutex> lock(g_mutex);
    auto previous = std::move(sink());
    sink() = std::move(s);
    return previous;
}

void log_info(const std::string& msg) { emit(LogLevel::Info, msg); }
void log_warning(const std::string& msg) { emit(LogLevel::Warning, msg); }

}  // namespace calcseg
