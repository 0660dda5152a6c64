#pragma once

#include <functional>
#include <iostream>
#include <string>
#include <string_view>
#include <utility>

namespace clbench::diag {

using Sink = std::function<void(std::string_view)>;

inline Sink& warning_sink() {
  static Sink sink = [](std::string_view msg) { std::cerr << "warning: " << msg << '\n'; };
  return sink;
}

inline void warn(std::string_view msg) { warning_sink()(msg); }

/// Replaces the warning sink for the lifetime of the guard (tests capture warnings this way).
class ScopedSink {
 public:
  explicit ScopedSink(Sink sink) : previous_(std::exchange(warning_sink(), std::move(sink))) {}
  ~ScopedSink() { warning_sink() = std::move(previous_); }
  ScopedSink(const ScopedSink&) = delete;
  ScopedSink& operator=(const ScopedSink&) = delete;

 private:
  Sink previous_;
};

}  // namespace clbench::diag
