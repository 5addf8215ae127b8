#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <atomic>
#include <exception>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace calips {

/// Raised for malformed inputs and violated preconditions.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// File parsing problems; the message names the file and line.
class LoadError : public Error {
public:
    using Error::Error;
};

/// Non-finite loss or a failed numerical routine.
class NumericError : public Error {
public:
    using Error::Error;
};

using Seed = std::uint64_t;
using Engine = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

/// Child seed for stream `index` of `seed`. Distinct (seed, index) pairs give
/// statistically independent engines.
inline Seed derive_seed(Seed seed, std::uint64_t index) {
    return splitmix64(splitmix64(seed) ^ (index * 0xd1b54a32d192ed03ULL + 1));
}

inline Engine make_engine(Seed seed) { return Engine(splitmix64(seed)); }

// Named streams so different stages of one run never share randomness.
namespace stream {
inline constexpr std::uint64_t split = 0x51;
inline constexpr std::uint64_t negatives = 0x52;
inline constexpr std::uint64_t init = 0x53;
inline constexpr std::uint64_t shuffle = 0x54;
inline constexpr std::uint64_t dropout = 0x55;
inline constexpr std::uint64_t ensemble = 0x56;
inline constexpr std::uint64_t world = 0x57;
inline constexpr std::uint64_t indicator = 0x58;
inline constexpr std::uint64_t validation = 0x59;
inline constexpr std::uint64_t rec_negatives = 0x5a;
inline constexpr std::uint64_t test_items = 0x5b;
}  // namespace stream

/// Uniform double in [0, 1) built from the top 53 bits; identical on every
/// standard library, unlike std::uniform_real_distribution.
inline double uniform01(Engine& eng) {
    return static_cast<double>(eng() >> 11) * 0x1.0p-53;
}

/// Unbiased integer in [0, n) (Lemire-style rejection).
inline std::uint64_t uniform_index(Engine& eng, std::uint64_t n) {
    if (n == 0) throw Error("uniform_index: empty range");
    const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
    std::uint64_t x;
    do {
        x = eng();
    } while (x >= limit);
    return x % n;
}

/// Standard normal via Box-Muller on uniform01, platform independent.
inline double standard_normal(Engine& eng) {
    double u1 = uniform01(eng);
    while (u1 <= 0.0) u1 = uniform01(eng);
    const double u2 = uniform01(eng);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
}

/// Fisher-Yates with uniform_index so shuffles are reproducible across toolchains.
template <class Vec>
void shuffle(Vec& v, Engine& eng) {
    for (std::size_t i = v.size(); i > 1; --i) {
        const auto j = static_cast<std::size_t>(uniform_index(eng, i));
        using std::swap;
        swap(v[i - 1], v[j]);
    }
}

inline double sigmoid(double z) {
    if (z >= 0) {
        const double e = std::exp(-z);
        return 1.0 / (1.0 + e);
    }
    const double e = std::exp(z);
    return e / (1.0 + e);
}

inline double logit(double p) { return std::log(p) - std::log1p(-p); }

/// Runs fn(0..n-1) on up to hardware_concurrency threads. Results are stored
/// by index, so output never depends on scheduling.
template <class Fn>
auto parallel_map(std::size_t n, Fn fn) -> std::vector<decltype(fn(std::size_t{}))> {
    using R = decltype(fn(std::size_t{}));
    std::vector<R> out(n);
    const std::size_t workers = std::min<std::size_t>(n, std::max(1u, std::thread::hardware_concurrency()));
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) out[i] = fn(i);
        return out;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::exception_ptr> errors(n);
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w)
        pool.emplace_back([&] {
            for (std::size_t i; (i = next++) < n;) {
                try {
                    out[i] = fn(i);
                } catch (...) {
                    errors[i] = std::current_exception();
                }
            }
        });
    for (auto& t : pool) t.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
    return out;
}

}  // namespace calips
