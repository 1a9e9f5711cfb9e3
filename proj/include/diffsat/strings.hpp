#pragma once

#include <cstdio>
#include <string>

namespace diffsat {

/// printf-style formatting into a std::string.
template <typename... Args>
std::string strformat(const char* fmt, Args... args) {
  const int n = std::snprintf(nullptr, 0, fmt, args...);
  std::string out(static_cast<std::size_t>(n > 0 ? n : 0), '\0');
  if (n > 0) std::snprintf(out.data(), out.size() + 1, fmt, args...);
  return out;
}

}  // namespace diffsat
