#ifndef RANKCELL_COMMON_HPP
#define RANKCELL_COMMON_HPP

#include <cstdint>
#include <filesystem>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

/**
 * @file common.hpp
 *
 * @brief Error types, the deterministic random stream and small text helpers shared by every module.
 */

namespace rankcell {

/**
 * @brief Base class of all errors raised by the library.
 */
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Malformed or inconsistent input data. The CLI maps this to exit code 2.
class DataError : public Error {
public:
    using Error::Error;
};

/// Bad command line or configuration. The CLI maps this to exit code 1.
class UsageError : public Error {
public:
    using Error::Error;
};

/// Non-finite or runaway loss during optimization. The CLI maps this to exit code 3.
class DivergenceError : public Error {
public:
    using Error::Error;
};

/// Transport-level failure while fetching remote data.
class NetworkError : public Error {
public:
    NetworkError(const std::string& what, bool retryable) : Error(what), retryable_(retryable) {}
    bool retryable() const { return retryable_; }

private:
    bool retryable_;
};

/// SplitMix64 finalizer, used to derive independent stream seeds.
std::uint64_t mix64(std::uint64_t x);

/**
 * @brief Deterministic random stream.
 *
 * Wraps `std::mt19937_64`, whose output sequence is fixed by the standard, and derives
 * uniform and normal variates by hand so that results do not depend on the standard
 * library's distribution implementations.
 *
 * Streams are addressed by `(seed, a, b)`, e.g. `(global seed, step, cell ordinal)`,
 * so that the draws for one cell never depend on how work is scheduled.
 */
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0);
    Rng(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0);

    std::uint64_t next() { return engine_(); }

    /// Uniform in [0, 1) with 53 random bits.
    double uniform();

    /// Uniform integer in [0, n). `n` must be positive.
    std::uint64_t below(std::uint64_t n);

    /// Standard normal variate (Box-Muller, no caching).
    double normal();

    /// Poisson variate; exact for small means, rounded normal approximation above 30.
    std::uint64_t poisson(double mean);

    template<typename Range>
    void shuffle(Range& range) {
        auto n = std::size(range);
        for (std::size_t i = n; i > 1; --i) {
            auto j = static_cast<std::size_t>(below(i));
            using std::swap;
            swap(range[i - 1], range[j]);
        }
    }

private:
    std::mt19937_64 engine_;
};

/// Lowercase hex SHA-256 of a byte string.
std::string sha256_hex(std::string_view bytes);

/// Lowercase hex SHA-256 of a file's contents.
std::string sha256_file(const std::filesystem::path& path);

/// Incremental SHA-256, used for corpus fingerprints.
class Sha256 {
public:
    Sha256();
    ~Sha256();
    Sha256(const Sha256&) = delete;
    Sha256& operator=(const Sha256&) = delete;

    void update(std::string_view bytes);
    void update_u64(std::uint64_t value);
    std::string hex_digest();

private:
    void* ctx_;
};

/// Splits on a single character, keeping empty fields.
std::vector<std::string_view> split(std::string_view line, char sep);

/// Shortest decimal representation that round-trips to the same double.
std::string format_double(double value);

/// Parses a double from the full string, or throws `DataError` mentioning `what`.
double parse_double(std::string_view text, std::string_view what);

/// Parses an unsigned integer from the full string, or throws `DataError` mentioning `what`.
std::uint64_t parse_uint(std::string_view text, std::string_view what);

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::string_view contents);

}

#endif
