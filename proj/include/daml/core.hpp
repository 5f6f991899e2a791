#pragma once

// Shared vocabulary: state vectors, trajectories, error types, seeded random
// streams and the deterministic parallel loop used by the heavier kernels.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

namespace daml {

using State = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// Time-indexed sequence of states separated by a fixed increment.
struct Trajectory {
  std::vector<State> states;
  double dt = 0.0;

  std::size_t size() const { return states.size(); }
  Eigen::Index nx() const { return states.empty() ? 0 : states.front().size(); }
  const State& operator[](std::size_t k) const { return states[k]; }
  State& operator[](std::size_t k) { return states[k]; }
};

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when an integration leaves the finite / bounded regime.
class BlowUpError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Ill-conditioned or rank-deficient linear algebra.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline constexpr double kBlowUpThreshold = 1e6;

inline void require_dim(Eigen::Index got, Eigen::Index want, std::string_view what) {
  if (got != want) {
    throw DimensionError(std::string(what) + ": dimension mismatch (got " + std::to_string(got) +
                         ", expected " + std::to_string(want) + ")");
  }
}

inline bool is_bounded(const State& x) {
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double v = x[i];
    if (!std::isfinite(v) || std::abs(v) > kBlowUpThreshold) return false;
  }
  return true;
}

/// Periodic index on [0, n).
inline Eigen::Index wrap(Eigen::Index i, Eigen::Index n) {
  const Eigen::Index r = i % n;
  return r < 0 ? r + n : r;
}

// ---------------------------------------------------------------------------
// Random streams

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Named stream identifiers; each one is derived from the master seed so that
/// changing one experimental factor never perturbs the draws of another.
enum class StreamId : std::uint64_t { Truth = 1, ObsNoise = 2, ObsNetwork = 3, Init = 4, Eval = 5 };

/// Deterministic generator derived from (master seed, stream id, substream).
class RngStream {
 public:
  RngStream(std::uint64_t master, StreamId id, std::uint64_t substream = 0)
      : engine_(derive(master, static_cast<std::uint64_t>(id), substream)) {}

  explicit RngStream(std::uint64_t seed) : engine_(splitmix64(seed)) {}

  double normal() { return normal_(engine_); }
  double uniform(double lo, double hi) { return lo + (hi - lo) * unit_(engine_); }

  /// Uniform integer on [0, n).
  std::size_t index(std::size_t n) {
    std::uniform_int_distribution<std::size_t> d(0, n - 1);
    return d(engine_);
  }

  Vector normal_vector(Eigen::Index n) {
    Vector v(n);
    for (Eigen::Index i = 0; i < n; ++i) v[i] = normal();
    return v;
  }

  std::mt19937_64& engine() { return engine_; }

  static std::uint64_t derive(std::uint64_t master, std::uint64_t id, std::uint64_t sub) {
    return splitmix64(splitmix64(splitmix64(master) ^ (id * 0xd1b54a32d192ed03ULL)) ^ sub);
  }

 private:
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
  std::uniform_real_distribution<double> unit_{0.0, 1.0};
};

// ---------------------------------------------------------------------------
// Parallel loop

/// Worker count from DAML_NUM_THREADS, else the hardware concurrency.
inline unsigned thread_count() {
  if (const char* env = std::getenv("DAML_NUM_THREADS")) {
    const int n = std::atoi(env);
    if (n > 0) return static_cast<unsigned>(n);
  }
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1U : hw;
}

/// Runs body(chunk_begin, chunk_end, chunk_index) over fixed-size chunks of
/// [0, n). Chunk boundaries depend only on n and chunk_size, never on the
/// thread count, so per-chunk partial results reduce deterministically.
inline std::size_t chunk_count(std::size_t n, std::size_t chunk_size) {
  return (n + chunk_size - 1) / chunk_size;
}

template <class Body>
void parallel_chunks(std::size_t n, std::size_t chunk_size, Body&& body) {
  const std::size_t chunks = chunk_count(n, chunk_size);
  const unsigned workers = std::min<unsigned>(thread_count(), static_cast<unsigned>(chunks));
  auto run_chunk = [&](std::size_t c) {
    const std::size_t b = c * chunk_size;
    body(b, std::min(n, b + chunk_size), c);
  };
  if (workers <= 1) {
    for (std::size_t c = 0; c < chunks; ++c) run_chunk(c);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(workers);
  std::vector<std::exception_ptr> errors(workers);
  for (unsigned w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t c = w; c < chunks; c += workers) run_chunk(c);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

inline double rms(const Vector& v) { return v.size() == 0 ? 0.0 : std::sqrt(v.squaredNorm() / v.size()); }

}  // namespace daml
