#pragma once

// Named RNG streams. Every source of randomness in the project is an
// explicit std::mt19937_64 derived from (master seed, stream tag), so
// ablations can change exactly one source and checkpoints can persist
// stream states as text.

#include <cstdint>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>

namespace maskvar {

// splitmix64; used only to stretch (seed, tag) into engine seeds.
inline std::uint64_t splitmix64(std::uint64_t& state) {
    std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t master, std::string_view tag) {
    std::uint64_t h = 0xcbf29ce484222325ULL ^ master;
    for (unsigned char c : tag) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return splitmix64(h);
}

inline std::uint64_t derive_seed(std::uint64_t master, std::string_view tag, std::uint64_t index) {
    std::uint64_t h = derive_seed(master, tag);
    h ^= 0x9e3779b97f4a7c15ULL * (index + 1);
    return splitmix64(h);
}

inline std::mt19937_64 make_stream(std::uint64_t master, std::string_view tag) {
    return std::mt19937_64(derive_seed(master, tag));
}

inline std::mt19937_64 make_stream(std::uint64_t master, std::string_view tag, std::uint64_t index) {
    return std::mt19937_64(derive_seed(master, tag, index));
}

inline double uniform01(std::mt19937_64& rng) {
    return std::uniform_real_distribution<double>(0.0, 1.0)(rng);
}

// Uniform integer in [0, n).
inline int uniform_below(std::mt19937_64& rng, int n) {
    if (n <= 0) throw std::invalid_argument("uniform_below: n must be positive");
    return std::uniform_int_distribution<int>(0, n - 1)(rng);
}

// mt19937_64 streams its full state as whitespace-separated decimals;
// that is the representation checkpoints store.
inline std::string rng_state_to_string(const std::mt19937_64& rng) {
    std::ostringstream os;
    os << rng;
    return os.str();
}

inline std::mt19937_64 rng_state_from_string(const std::string& text) {
    std::mt19937_64 rng;
    std::istringstream is(text);
    is >> rng;
    if (is.fail()) throw std::runtime_error("rng_state_from_string: malformed engine state");
    return rng;
}

}  // namespace maskvar
