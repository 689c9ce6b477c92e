#pragma once

#include <cstdint>
#include <initializer_list>
#include <limits>
#include <random>

namespace smlmreg {

/// SplitMix64 finalizer. Used to derive independent child seeds from a master seed.
constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

/// Child seed for a tagged sub-stream, e.g. derive_seed(master, {iteration, j, i, k}).
/// The result depends only on the tags, never on how many draws other streams made.
inline std::uint64_t derive_seed(std::uint64_t master, std::initializer_list<std::uint64_t> tags) noexcept {
    std::uint64_t h = mix64(master);
    for (std::uint64_t t : tags) h = mix64(h ^ mix64(t + 0x632be59bd9b4e019ULL));
    return h;
}

/// Small counter-free generator for per-index streams; satisfies UniformRandomBitGenerator.
class SplitMix64 {
public:
    using result_type = std::uint64_t;

    explicit SplitMix64(std::uint64_t seed) noexcept : state_(seed) {}

    static constexpr result_type min() noexcept { return 0; }
    static constexpr result_type max() noexcept { return std::numeric_limits<result_type>::max(); }

    result_type operator()() noexcept {
        state_ += 0x9e3779b97f4a7c15ULL;
        std::uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

private:
    std::uint64_t state_;
};

using Engine = std::mt19937_64;

inline Engine make_engine(std::uint64_t master, std::initializer_list<std::uint64_t> tags) {
    return Engine(derive_seed(master, tags));
}

// Stream tags for the modules that draw randomness.
namespace stream {
constexpr std::uint64_t gmm_init = 0x11;
constexpr std::uint64_t sampling = 0x22;
constexpr std::uint64_t restart = 0x33;
constexpr std::uint64_t simulation = 0x44;
constexpr std::uint64_t perturbation = 0x55;
constexpr std::uint64_t sweep_cell = 0x66;
constexpr std::uint64_t mesh_sampling = 0x77;
}  // namespace stream

}  // namespace smlmreg
