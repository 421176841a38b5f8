#pragma once

#include <cmath>
#include <cstdint>

namespace mimg {

// Deterministic generator with a single u64 state word (splitmix64 core).
// The standard <random> distributions are implementation-defined, so every
// draw here is spelled out to keep runs reproducible across platforms and
// to let checkpoints carry the exact generator state.
class Rng {
public:
    explicit Rng(uint64_t seed = 0) : state_(seed) {}

    uint64_t next_u64() {
        state_ += 0x9e3779b97f4a7c15ull;
        uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1), 53-bit resolution.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Uniform integer in [0, n). n must be positive.
    int uniform_int(int n) {
        return static_cast<int>((static_cast<unsigned __int128>(next_u64()) *
                                 static_cast<uint64_t>(n)) >> 64);
    }

    // Standard normal via Box-Muller. Consumes two draws per value; the
    // second output is discarded so the state stays a single word.
    double gaussian() {
        double u1 = 1.0 - uniform(); // (0, 1], keeps the log finite
        double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }

    // Standard Gumbel(0, 1) noise.
    double gumbel() {
        double u = 1.0 - uniform();
        return -std::log(-std::log(u));
    }

    // Derive an independent child stream (e.g. one per batch item).
    Rng fork() { return Rng(next_u64()); }

    uint64_t state() const { return state_; }
    void set_state(uint64_t s) { state_ = s; }

private:
    uint64_t state_;
};

} // namespace mimg
