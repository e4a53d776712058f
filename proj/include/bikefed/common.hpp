#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <stdexcept>
#include <string>
#include <string_view>

#include <Eigen/Dense>

namespace bikefed {

// Error taxonomy. The CLI maps ConfigError/SchemaError/UsageError to exit code 2,
// everything else to 1.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct IoError : Error {
    using Error::Error;
};
struct SchemaError : Error {
    using Error::Error;
};
struct ConfigError : Error {
    using Error::Error;
};
struct UsageError : Error {
    using Error::Error;
};
struct DataError : Error {
    using Error::Error;
};
struct ShapeError : Error {
    using Error::Error;
};

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Counts = Eigen::Matrix<std::int64_t, Eigen::Dynamic, 1>;

// Naive civil time at second resolution; no timezone is ever attached.
using Timestamp = std::chrono::sys_seconds;
using Hours = std::chrono::hours;

inline constexpr std::int64_t kSecondsPerHour = 3600;
inline constexpr std::int64_t kSecondsPerDay = 86400;

/// Parses "YYYY-MM-DD?HH:MM:SS[.fff]" where '?' is 'T' or ' '. Fractional seconds are truncated.
bool parse_timestamp(std::string_view text, Timestamp& out);
std::string format_timestamp(Timestamp t);
Timestamp floor_to_hour(Timestamp t);
std::int64_t days_since_epoch(Timestamp t);
/// Monday = 0 ... Sunday = 6.
int day_of_week(Timestamp t);
int hour_of_day(Timestamp t);
/// Parses an ISO date "YYYY-MM-DD" into days since 1970-01-01.
bool parse_date(std::string_view text, std::int64_t& days);

/// FNV-1a, 64 bit, over the raw bytes.
std::uint64_t fnv1a64(std::string_view bytes);

/// SplitMix64 finalizer; used to expand one seed into independent streams.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0);

/// xoshiro256** seeded through SplitMix64. The standard distributions are
/// implementation-defined, so every draw used by the pipeline is derived here
/// to keep runs bit-identical across platforms.
class Rng {
public:
    explicit Rng(std::uint64_t seed);
    std::uint64_t next();
    /// Uniform in [0, 1) with 53 random bits.
    double uniform();
    /// Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n);
    bool bernoulli(double p);
    std::int64_t poisson(double lambda);
    double normal();

    template <typename It>
    void shuffle(It first, It last) {
        const auto n = static_cast<std::uint64_t>(last - first);
        for (std::uint64_t i = n; i > 1; --i) {
            const auto j = below(i);
            std::swap(first[i - 1], first[j]);
        }
    }

private:
    std::uint64_t state_[4];
};

/// Write-temp-then-rename.
void atomic_write(const std::filesystem::path& path, std::string_view contents);
std::string read_file(const std::filesystem::path& path);

/// Runs body(i) for i in [0, n) over up to n_threads workers. Callers must
/// write results into pre-sized, index-addressed storage.
void parallel_for(std::size_t n, int n_threads, const std::function<void(std::size_t)>& body);

}  // namespace bikefed
