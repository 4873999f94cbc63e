#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>

namespace cbdiff {

// Counter-based random numbers. Every draw is a pure function of
// (key, counter), so streams can be split per sample / per pixel and
// replayed regardless of batch order or thread scheduling.

inline uint64_t mix64(uint64_t x) {
    // splitmix64 finalizer
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

inline uint64_t mix64(uint64_t a, uint64_t b) { return mix64(a ^ mix64(b)); }

inline uint64_t hash_key(std::initializer_list<uint64_t> parts) {
    uint64_t h = 0x6a09e667f3bcc909ull;
    for (uint64_t p : parts) h = mix64(h, p);
    return h;
}

// uniform in [0,1) with 53 bits of mantissa
inline double unit_from_bits(uint64_t bits) {
    return static_cast<double>(bits >> 11) * 0x1.0p-53;
}

// Stateless access: i-th uniform of the stream identified by `key`.
inline double unit_at(uint64_t key, uint64_t index) {
    return unit_from_bits(mix64(key, index));
}

class RngStream {
  public:
    explicit RngStream(uint64_t key) : key_(key) {}
    RngStream(uint64_t seed, std::initializer_list<uint64_t> parts)
        : key_(mix64(seed, hash_key(parts))) {}

    uint64_t key() const { return key_; }

    uint64_t next_u64() { return mix64(key_, counter_++); }
    double next_unit() { return unit_from_bits(next_u64()); }

    // Claims a block of n counter slots (for bulk/parallel draws via
    // unit_at(key(), start+i)) and returns the block start.
    uint64_t reserve(uint64_t n) {
        uint64_t c = counter_;
        counter_ += n;
        return c;
    }

    // standard normal via Box-Muller; caches the second draw
    double next_normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        while (u1 <= 0.0) u1 = next_unit();
        const double u2 = next_unit();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double two_pi = 6.283185307179586;
        spare_ = r * std::sin(two_pi * u2);
        has_spare_ = true;
        return r * std::cos(two_pi * u2);
    }

    // Derived independent stream; does not advance this one.
    RngStream split(uint64_t salt) const { return RngStream(mix64(key_, mix64(salt, 0x517cc1b727220a95ull))); }

  private:
    uint64_t key_ = 0;
    uint64_t counter_ = 0;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace cbdiff
