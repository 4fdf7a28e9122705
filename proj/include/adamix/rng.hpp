#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <sstream>
#include <string>

namespace adamix {

using Rng = std::mt19937_64;

/// Named sub-streams derived from one master seed. Every consumer of
/// randomness owns its own engine; nothing in the library touches a
/// global generator.
enum class Stream : std::uint64_t {
    backbone = 1,
    adaptation = 2,
    routing = 3,
    data_order = 4,
    dataset = 5,
    evaluation = 6,
};

/// splitmix64 finalizer over (master, stream).
inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t stream) {
    std::uint64_t z = master + 0x9e3779b97f4a7c15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t master, Stream stream) {
    return derive_seed(master, static_cast<std::uint64_t>(stream));
}

inline void fill_gaussian(std::span<double> out, double stddev, Rng& rng) {
    std::normal_distribution<double> dist(0.0, stddev);
    for (double& v : out) v = dist(rng);
}

inline std::string rng_state(const Rng& rng) {
    std::ostringstream os;
    os << rng;
    return os.str();
}

inline void restore_rng_state(Rng& rng, const std::string& state) {
    std::istringstream is(state);
    is >> rng;
}

}  // namespace adamix
