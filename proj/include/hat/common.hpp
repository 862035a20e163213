#ifndef HAT_COMMON_HPP
#define HAT_COMMON_HPP

// Shared scalar type, error taxonomy and deterministic RNG used by every module.
//
// The library computes in 32-bit floats by default.  Compiling with
// -DHAT_REAL_DOUBLE switches the whole library to 64-bit, which the gradient
// check suite uses to push finite differences below 1e-4.

#include <cstdint>
#include <cstdlib>
#include <random>
#include <stdexcept>
#include <string>

namespace hat {

#ifdef HAT_REAL_DOUBLE
using real = double;
#else
using real = float;
#endif

inline constexpr bool kReal64 = sizeof(real) == 8;

// ====== Errors ======
//
// Every failure the library can diagnose is thrown as a subclass of Error so
// callers (CLI, tests) can distinguish bad usage (exit 1) from runtime
// failures (exit 2).

struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Mismatched tensor shapes, invalid axes, out-of-range slices.
struct ShapeError : Error {
  using Error::Error;
};

// Invalid model / train configuration values.
struct ConfigError : Error {
  using Error::Error;
};

// Bad command line arguments or unusable input files (wrong bit depth, ...).
struct UsageError : Error {
  using Error::Error;
};

// Malformed serialized data: checkpoints, images, config files.
struct FormatError : Error {
  using Error::Error;
};

// NaN or Inf appeared in a computation.  Never silently propagated.
struct NumericError : Error {
  using Error::Error;
};

// Library bug or misuse of internal invariants (e.g. backward called twice).
struct InternalError : Error {
  using Error::Error;
};

// ====== Deterministic RNG ======
//
// One seeded engine per logical stream.  All randomness in the library flows
// through this wrapper so that a fixed seed reproduces runs bit for bit on a
// given platform.

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  double uniform(double lo, double hi) {
    std::uniform_real_distribution<double> d(lo, hi);
    return d(gen_);
  }

  double normal(double mean, double stddev) {
    std::normal_distribution<double> d(mean, stddev);
    return d(gen_);
  }

  // Normal(0, stddev) rejected outside +-clip*stddev.
  double trunc_normal(double stddev, double clip = 2.0) {
    for (;;) {
      double v = normal(0.0, stddev);
      if (v >= -clip * stddev && v <= clip * stddev) return v;
    }
  }

  // Uniform integer in [lo, hi).
  std::int64_t randint(std::int64_t lo, std::int64_t hi) {
    std::uniform_int_distribution<std::int64_t> d(lo, hi - 1);
    return d(gen_);
  }

  std::uint64_t next() { return gen_(); }

 private:
  std::mt19937_64 gen_;
};

// ====== Worker thread cap ======
//
// HAT_THREADS caps worker parallelism for the few batch-parallel paths
// (per-file metric evaluation).  Absent or 0 means single-threaded, which is
// the deterministic mode every reproducibility guarantee assumes.
inline int worker_threads() {
  const char* env = std::getenv("HAT_THREADS");
  if (env == nullptr) return 1;
  char* end = nullptr;
  long v = std::strtol(env, &end, 10);
  if (end == env || v < 0) return 1;
  return v == 0 ? 1 : static_cast<int>(v);
}

}  // namespace hat

#endif  // HAT_COMMON_HPP
