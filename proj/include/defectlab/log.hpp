#pragma once

#include <functional>
#include <iostream>
#include <string>
#include <utility>

namespace defectlab::log {

using Sink = std::function<void(const std::string&)>;

inline Sink& warning_sink() {
    static Sink sink = [](const std::string& msg) { std::cerr << "warning: " << msg << '\n'; };
    return sink;
}

inline void warn(const std::string& msg) {
    if (auto& s = warning_sink()) s(msg);
}

// Swaps the warning sink for the lifetime of the guard (tests capture
// warnings this way).
class ScopedSink {
public:
    explicit ScopedSink(Sink sink) : previous_(std::exchange(warning_sink(), std::move(sink))) {}
    ~ScopedSink() { warning_sink() = std::move(previous_); }
    ScopedSink(const ScopedSink&) = delete;
    ScopedSink& operator=(const ScopedSink&) = delete;

private:
    Sink previous_;
};

}  // namespace defectlab::log
