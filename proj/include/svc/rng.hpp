#pragma once

#include <cstdint>
#include <string_view>

namespace svc {

// splitmix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t x) noexcept {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

constexpr std::uint64_t fnv1a64(std::string_view s) noexcept {
    std::uint64_t h = 0xCBF29CE484222325ULL;
    for (char c : s) {
        h ^= static_cast<std::uint8_t>(c);
        h *= 0x100000001B3ULL;
    }
    return h;
}

// Counter-based stream: the n-th draw is a pure function of (seed, key,
// stream, n), so results are independent of evaluation order and threading.
class KeyedRng {
public:
    KeyedRng(std::uint64_t seed, std::string_view key, std::uint64_t stream) noexcept
        : state_(mix64(mix64(mix64(seed) ^ fnv1a64(key)) ^ stream)) {}

    std::uint64_t bits(std::uint64_t counter) const noexcept {
        return mix64(state_ + counter * 0x9E3779B97F4A7C15ULL);
    }

    // Uniform in [0, 1).
    double uniform(std::uint64_t counter) const noexcept {
        return static_cast<double>(bits(counter) >> 11) * 0x1.0p-53;
    }

private:
    std::uint64_t state_;
};

}  // namespace svc
