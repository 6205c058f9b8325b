#pragma once

#include <array>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <functional>
#include <mutex>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace rimae {

#ifdef RIMAE_FLOAT32
using Real = float;
#else
using Real = double;
#endif

using Index = std::ptrdiff_t;

// Shape/usage violations of an operation's contract.
struct DimensionError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct ArgumentError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Wrong call sequence (e.g. backward on a consumed tape).
struct UsageError : std::logic_error {
  using std::logic_error::logic_error;
};

struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// A patch whose principal frame cannot be sign-disambiguated.
struct DegenerateFrame : std::runtime_error {
  std::array<double, 3> eigenvalues{};
  std::array<double, 3> skewness{};
  std::string reason;

  DegenerateFrame(std::string why, std::array<double, 3> eig, std::array<double, 3> skew)
      : std::runtime_error("degenerate frame: " + why),
        eigenvalues(eig),
        skewness(skew),
        reason(std::move(why)) {}
};

// Deterministic RNG. All distribution transforms are spelled out here so a
// given seed yields the same stream on every platform; std::* distributions
// are implementation-defined and must not be used on hot paths.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : gen_(seed) {}

  std::uint64_t next_u64() { return gen_(); }

  // uniform in [0, 1) with 53 random bits
  double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Box-Muller; consumes exactly two uniforms per call
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  // integer in [0, n)
  std::uint64_t uniform_index(std::uint64_t n) {
    if (n == 0) throw ArgumentError("uniform_index: n must be positive");
    return static_cast<std::uint64_t>(uniform() * static_cast<double>(n)) % n;
  }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(uniform_index(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  std::string state() const {
    std::ostringstream os;
    os << gen_;
    return os.str();
  }

  void set_state(const std::string& s) {
    std::istringstream is(s);
    is >> gen_;
    if (is.fail()) throw ArgumentError("Rng::set_state: malformed state string");
  }

 private:
  std::mt19937_64 gen_;
};

// Worker cap for parallel sections; RIMAE_THREADS overrides hardware_concurrency.
inline int thread_cap() {
  static const int cap = [] {
    if (const char* env = std::getenv("RIMAE_THREADS")) {
      int v = std::atoi(env);
      if (v >= 1) return v;
    }
    unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : static_cast<int>(hw);
  }();
  return cap;
}

// Chunked parallel loop over [0, n). Results must not depend on scheduling:
// callers draw any per-item randomness from the item index, never from a
// shared stream.
inline void parallel_for(Index n, const std::function<void(Index)>& fn) {
  const int workers = std::min<Index>(thread_cap(), n) > 1 ? static_cast<int>(std::min<Index>(thread_cap(), n)) : 1;
  if (workers <= 1) {
    for (Index i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(workers);
  std::atomic<Index> next{0};
  std::exception_ptr err;
  std::mutex err_mu;
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (;;) {
        Index i = next.fetch_add(1);
        if (i >= n) return;
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lk(err_mu);
          if (!err) err = std::current_exception();
          return;
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (err) std::rethrow_exception(err);
}

}  // namespace rimae
