#pragma once

#include <cstdint>
#include <numbers>
#include <random>
#include <stdexcept>
#include <string>

namespace odmr {

inline constexpr double two_pi = 2.0 * std::numbers::pi;

/// Thrown when a pulse sequence or its timing breaks a structural rule.
class SequenceError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Thrown for invalid configuration values.
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Thrown when a simulated acquisition cannot proceed.
class SimulationError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Thrown when inputs to a fit or spectral routine are unusable.
class AnalysisError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

/// Derives an independent stream seed from a root seed and a path of indices.
inline std::uint64_t derive_seed(std::uint64_t root, std::uint64_t a, std::uint64_t b = 0,
                                 std::uint64_t c = 0) {
    std::uint64_t s = splitmix64(root);
    s = splitmix64(s ^ splitmix64(a + 0x1000));
    s = splitmix64(s ^ splitmix64(b + 0x2000));
    s = splitmix64(s ^ splitmix64(c + 0x3000));
    return s;
}

using Rng = std::mt19937_64;

inline void require(bool cond, const std::string& what) {
    if (!cond) throw ConfigError(what);
}

}  // namespace odmr
