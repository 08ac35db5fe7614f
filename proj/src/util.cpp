#include "bivm/util.hpp"

#include <cstdlib>
#include <cstring>
#include <iostream>
#include <thread>

namespace bivm {

namespace {
std::mutex warn_mu;
std::vector<std::string> warn_log;
}  // namespace

void warn(const std::string& msg) {
  std::lock_guard<std::mutex> lock(warn_mu);
  warn_log.push_back(msg);
  std::cerr << "[bivm] warning: " << msg << "\n";
}

std::vector<std::string> drain_warnings() {
  std::lock_guard<std::mutex> lock(warn_mu);
  std::vector<std::string> out;
  out.swap(warn_log);
  return out;
}

int max_threads() {
  static int cached = [] {
    const char* env = std::getenv("BIVM_THREADS");
    if (!env || !*env) return 1;
    int n = std::atoi(env);
    if (n < 1) n = 1;
    int hw = static_cast<int>(std::thread::hardware_concurrency());
    if (hw > 0 && n > hw) n = hw;
    return n;
  }();
  return cached;
}

void parallel_for(int64_t n, const std::function<void(int64_t, int64_t)>& body) {
  if (n <= 0) return;
  int workers = max_threads();
  if (workers <= 1 || n < 2) {
    body(0, n);
    return;
  }
  if (workers > n) workers = static_cast<int>(n);
  int64_t chunk = (n + workers - 1) / workers;
  std::vector<std::thread> pool;
  pool.reserve(static_cast<size_t>(workers));
  for (int t = 0; t < workers; ++t) {
    int64_t lo = t * chunk;
    int64_t hi = std::min<int64_t>(n, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([&body, lo, hi] { body(lo, hi); });
  }
  for (auto& th : pool) th.join();
}

uint64_t fnv1a(const void* data, size_t len, uint64_t seed) {
  const auto* p = static_cast<const unsigned char*>(data);
  uint64_t h = seed;
  for (size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

uint64_t fnv1a(const std::string& s) { return fnv1a(s.data(), s.size()); }

}  // namespace bivm
