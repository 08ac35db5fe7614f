#pragma once

#include <cstdint>
#include <functional>
#include <mutex>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace bivm {

// Library errors signal precondition violations; the CLI maps them to exit 1.
struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

#define BIVM_CHECK(cond, msg)         \
  do {                                \
    if (!(cond)) throw ::bivm::Error(msg); \
  } while (0)

// Non-fatal diagnostics. Collected so tests can assert a warning fired.
void warn(const std::string& msg);
std::vector<std::string> drain_warnings();

// Worker cap: BIVM_THREADS, default 1 (keeps every run bit-reproducible).
int max_threads();

// Splits [0, n) into contiguous chunks. Each index is written by exactly one
// worker, so results do not depend on the thread count.
void parallel_for(int64_t n, const std::function<void(int64_t, int64_t)>& body);

class Rng {
 public:
  explicit Rng(uint64_t seed) : eng_(seed) {}
  double uniform(double lo = 0.0, double hi = 1.0) {
    return std::uniform_real_distribution<double>(lo, hi)(eng_);
  }
  double normal(double mean = 0.0, double stddev = 1.0) {
    return std::normal_distribution<double>(mean, stddev)(eng_);
  }
  int64_t randint(int64_t lo, int64_t hi) {  // inclusive bounds
    return std::uniform_int_distribution<int64_t>(lo, hi)(eng_);
  }
  std::mt19937_64& engine() { return eng_; }

 private:
  std::mt19937_64 eng_;
};

// FNV-1a, used to fingerprint model configs inside checkpoints.
uint64_t fnv1a(const void* data, size_t len, uint64_t seed = 0xcbf29ce484222325ull);
uint64_t fnv1a(const std::string& s);

}  // namespace bivm
