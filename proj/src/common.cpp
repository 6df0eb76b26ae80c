#include "segstitch/common.hpp"

#include <atomic>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <sstream>
#include <thread>

namespace segstitch {

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  out += "]";
  return out;
}

namespace {
std::atomic<bool> g_checked{false};

int env_threads() {
  const char* v = std::getenv("SEGSTITCH_THREADS");
  if (!v) return 1;
  int n = std::atoi(v);
  return n >= 1 ? n : 1;
}

std::atomic<int> g_threads{env_threads()};
}  // namespace

void set_checked_mode(bool on) { g_checked.store(on); }
bool checked_mode() { return g_checked.load(std::memory_order_relaxed); }

void set_num_threads(int n) { g_threads.store(n >= 1 ? n : 1); }
int num_threads() { return g_threads.load(std::memory_order_relaxed); }

void parallel_for(int64_t n, int64_t grain,
                  const std::function<void(int64_t, int64_t)>& fn) {
  if (n <= 0) return;
  int workers = num_threads();
  if (workers <= 1 || n < grain * 2) {
    fn(0, n);
    return;
  }
  int64_t chunks = std::min<int64_t>(workers, (n + grain - 1) / grain);
  int64_t per = (n + chunks - 1) / chunks;
  std::vector<std::thread> pool;
  pool.reserve(static_cast<size_t>(chunks) - 1);
  for (int64_t c = 1; c < chunks; ++c) {
    int64_t b = c * per;
    int64_t e = std::min(n, b + per);
    if (b >= e) break;
    pool.emplace_back([&fn, b, e] { fn(b, e); });
  }
  fn(0, std::min(n, per));
  for (auto& t : pool) t.join();
}

double Rng::uniform() {
  // 53 random bits -> [0, 1)
  return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
}

double Rng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

int64_t Rng::index(int64_t n) {
  return n <= 0 ? 0 : static_cast<int64_t>(gen_() % static_cast<uint64_t>(n));
}

double Rng::normal() {
  if (have_spare_) {
    have_spare_ = false;
    return spare_;
  }
  double u1 = 0.0;
  do {
    u1 = uniform();
  } while (u1 <= 0.0);
  double u2 = uniform();
  double r = std::sqrt(-2.0 * std::log(u1));
  double a = 2.0 * M_PI * u2;
  spare_ = r * std::sin(a);
  have_spare_ = true;
  return r * std::cos(a);
}

double Rng::truncated_normal(double sigma) {
  for (;;) {
    double z = normal();
    if (std::fabs(z) <= 2.0) return z * sigma;
  }
}

std::string Rng::serialize() const {
  std::ostringstream os;
  os << gen_;
  uint64_t bits;
  static_assert(sizeof(bits) == sizeof(spare_));
  std::memcpy(&bits, &spare_, sizeof(bits));
  os << " " << (have_spare_ ? 1 : 0) << " " << bits;
  return os.str();
}

Rng Rng::deserialize(const std::string& state) {
  Rng r(0);
  std::istringstream is(state);
  is >> r.gen_;
  int hs = 0;
  uint64_t bits = 0;
  is >> hs >> bits;
  if (is.fail()) throw IoError("rng state: malformed serialized stream");
  std::memcpy(&r.spare_, &bits, sizeof(bits));
  r.have_spare_ = hs != 0;
  return r;
}

}  // namespace segstitch
