#pragma once

#include <cstdint>
#include <cmath>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace tofcal {

// Speed of light in vacuum, mm/ps. The air correction (~3e-4 relative) is far
// below the 0.1 mm stage uncertainty, so this doubles as the default c_air.
inline constexpr double kSpeedOfLightMmPerPs = 0.299792458;

// FWHM of a Gaussian = kFwhmPerSigma * sigma.
inline const double kFwhmPerSigma = 2.0 * std::sqrt(2.0 * std::log(2.0));

inline constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct MissingInputError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Counter-based random generator: xoshiro256++ seeded through splitmix64.
// Streams are keyed by (seed, stream, index) so event-level generation is
// reproducible independent of scheduling or thread count.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) { reseed(seed, 0, 0); }
  Rng(std::uint64_t seed, std::uint64_t stream, std::uint64_t index) {
    reseed(seed, stream, index);
  }

  void reseed(std::uint64_t seed, std::uint64_t stream, std::uint64_t index);

  std::uint64_t next_u64();

  // Uniform in [0, 1).
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Standard normal via Box-Muller (no cached spare, fully deterministic).
  double normal();
  double normal(double mu, double sigma) { return mu + sigma * normal(); }

  // Exponential with the given mean.
  double exponential(double mean);

  // Uniform integer in [0, n).
  std::uint64_t next_below(std::uint64_t n);

 private:
  std::uint64_t s_[4];
};

std::uint64_t splitmix64(std::uint64_t& state);

// FNV-1a, used for schema hashes and artifact checksums.
std::uint64_t fnv1a(std::span<const unsigned char> bytes);
std::uint64_t fnv1a(const std::string& s);

// Lossless text round-trip for doubles (printf %a / strtod).
std::string hex_double(double v);
double parse_hex_double(const std::string& s);

double mean(std::span<const double> v);
double stddev(std::span<const double> v);          // sample stddev (n-1)
double quantile_sorted(std::span<const double> sorted, double q);
double median(std::vector<double> v);              // takes a copy

// Spearman rank correlation; NaN if fewer than 3 points or degenerate ranks.
double spearman(std::span<const double> a, std::span<const double> b);

// Log verbosity from TOFCAL_LOG (0 = warnings only, 1 = info, 2 = debug).
int log_level();
void log_info(const std::string& msg);
void log_debug(const std::string& msg);
void log_warn(const std::string& msg);

}  // namespace tofcal
