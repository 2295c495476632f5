#pragma once

#include <cstdio>
#include <map>
#include <mutex>
#include <string>
#include <string_view>

namespace fedcp {

// Rate-limited stderr notice: at most 5 repeats per key, then one
// suppression marker. Keeps rare-but-legitimate events (skipped MMD batch,
// dropped client) visible without flooding long runs.
inline void notice(std::string_view key, std::string_view message) {
  static std::mutex mu;
  static std::map<std::string, int, std::less<>> seen;
  std::lock_guard<std::mutex> lock(mu);
  auto it = seen.find(key);
  int n = (it == seen.end()) ? 1 : it->second + 1;
  if (it == seen.end())
    seen.emplace(std::string(key), n);
  else
    it->second = n;
  if (n <= 5) {
    std::fprintf(stderr, "notice: %.*s\n", static_cast<int>(message.size()),
                 message.data());
  } else if (n == 6) {
    std::fprintf(stderr, "notice: '%.*s' keeps happening, suppressing further messages\n",
                 static_cast<int>(key.size()), key.data());
  }
}

}  // namespace fedcp
