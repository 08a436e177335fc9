#pragma once

#include <cstdint>
#include <string>

namespace promptvid {

// Counter-based random stream (splitmix64 finalizer over seed + counter).
//
// The draw at position n is a pure function of (seed, n), so identical
// (seed, counter) states produce identical sequences on every platform.
// Streams are split by deriving a child seed from a label; child streams are
// statistically independent of the parent and of each other.
class RngStream {
public:
    RngStream() : RngStream(0) {}
    explicit RngStream(std::uint64_t seed, std::uint64_t counter = 0)
        : seed_(seed), counter_(counter) {}

    std::uint64_t seed() const { return seed_; }
    std::uint64_t counter() const { return counter_; }

    std::uint64_t next_u64() {
        std::uint64_t z = seed_ + 0x9E3779B97F4A7C15ull * ++counter_;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1) with 53 bits of mantissa.
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    // Uniform integer in [0, n); n must be > 0. Rejection-free modulo is fine
    // for the small n used here (bias < 2^-50).
    std::uint64_t uniform_index(std::uint64_t n) {
        return next_u64() % n;
    }

    // Standard normal via the polar method; uses det_log so the result is a
    // fixed IEEE op sequence. Consumes a variable number of uniforms.
    double normal();

    // Child stream whose seed is derived from this stream's seed and a label.
    RngStream split(const std::string& label) const;
    RngStream split(std::uint64_t label) const;

private:
    std::uint64_t seed_;
    std::uint64_t counter_;
};

// FNV-1a over arbitrary bytes; used for config hashes, checkpoint hashes and
// rng stream labels.
std::uint64_t fnv1a(const void* data, std::size_t len, std::uint64_t h = 0xcbf29ce484222325ull);
std::uint64_t fnv1a(const std::string& s);
std::string hash_hex(std::uint64_t h);

} // namespace promptvid
