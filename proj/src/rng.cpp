#include "promptvid/rng.hpp"

#include <cmath>

#include "promptvid/detmath.hpp"

namespace promptvid {

double RngStream::normal() {
    // Polar (Marsaglia) method. Rejection keeps u*u + v*v in (0, 1].
    for (;;) {
        double u = 2.0 * uniform() - 1.0;
        double v = 2.0 * uniform() - 1.0;
        double s = u * u + v * v;
        if (s > 0.0 && s < 1.0) {
            return u * std::sqrt(-2.0 * detmath::det_log(s) / s);
        }
    }
}

RngStream RngStream::split(const std::string& label) const {
    return split(fnv1a(label));
}

RngStream RngStream::split(std::uint64_t label) const {
    std::uint64_t z = seed_ ^ (0x9E3779B97F4A7C15ull + label);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return RngStream(z ^ (z >> 31));
}

std::uint64_t fnv1a(const void* data, std::size_t len, std::uint64_t h) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

std::uint64_t fnv1a(const std::string& s) {
    return fnv1a(s.data(), s.size());
}

std::string hash_hex(std::uint64_t h) {
    static const char* digits = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[static_cast<std::size_t>(i)] = digits[h & 0xf];
        h >>= 4;
    }
    return out;
}

} // namespace promptvid
