#pragma once

#include <cstdint>
#include <random>
#include <string_view>

#include "damp/matrix.hpp"

namespace damp {

inline uint64_t fnv1a(std::string_view s) {
    uint64_t h = 14695981039346656037ull;
    for (char c : s) {
        h ^= static_cast<uint64_t>(static_cast<unsigned char>(c));
        h *= 1099511628211ull;
    }
    return h;
}

// Independent deterministic stream per (seed, name). The derivation is part of the
// documented seed procedure; it is stable within one build of this library.
inline std::mt19937_64 named_rng(uint64_t seed, std::string_view stream) {
    return std::mt19937_64(seed ^ fnv1a(stream));
}

inline Matrix randn(std::mt19937_64& rng, int rows, int cols, double stddev = 1.0) {
    std::normal_distribution<double> dist(0.0, stddev);
    Matrix m(rows, cols);
    for (double& v : m.data) v = dist(rng);
    return m;
}

inline Matrix rand_uniform(std::mt19937_64& rng, int rows, int cols, double lo, double hi) {
    std::uniform_real_distribution<double> dist(lo, hi);
    Matrix m(rows, cols);
    for (double& v : m.data) v = dist(rng);
    return m;
}

}  // namespace damp
