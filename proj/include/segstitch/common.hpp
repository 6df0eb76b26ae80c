#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace segstitch {

// Validation failures (bad shapes, bad configs, bad files) map to CLI exit
// code 1; anything else that escapes is a runtime failure (exit 2).
class DimensionError : public std::runtime_error {
 public:
  explicit DimensionError(const std::string& msg) : std::runtime_error(msg) {}
};

class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

class UsageError : public std::runtime_error {
 public:
  explicit UsageError(const std::string& msg) : std::runtime_error(msg) {}
};

class IoError : public std::runtime_error {
 public:
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

// Checked mode: every op scans its output for NaN/inf and throws.
void set_checked_mode(bool on);
bool checked_mode();

// Worker count for kernel-internal parallelism. Kernels split work over
// independent output elements, so results are bit-identical at any count.
void set_num_threads(int n);
int num_threads();

// Runs fn(begin, end) over [0, n) split into contiguous chunks. Single
// chunk when n < grain or one thread is configured.
void parallel_for(int64_t n, int64_t grain,
                  const std::function<void(int64_t, int64_t)>& fn);

// Deterministic RNG. Gaussian sampling is done by explicit Box-Muller on
// mt19937_64 output so streams do not depend on libstdc++'s distribution
// implementations.
class Rng {
 public:
  explicit Rng(uint64_t seed) : gen_(seed) {}

  uint64_t next_u64() { return gen_(); }
  // uniform in [0, 1)
  double uniform();
  double uniform(double lo, double hi);
  // integer in [0, n)
  int64_t index(int64_t n);
  double normal();
  // normal(0, sigma) resampled until within 2 sigma
  double truncated_normal(double sigma);

  std::string serialize() const;
  static Rng deserialize(const std::string& state);

  std::mt19937_64& engine() { return gen_; }

 private:
  std::mt19937_64 gen_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace segstitch
