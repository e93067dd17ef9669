#pragma once

#include <cstdint>
#include <initializer_list>

namespace calcseg {

/// SplitMix64 finaliser; folds any number of values into one well-mixed seed.
/// Every stochastic choice in training (batch order, masks) is derived from
/// such a seed so results are a pure function of (run seed, epoch, step).
constexpr uint64_t splitmix64(uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

constexpr uint64_t mix_seed(std::initializer_list<uint64_t> parts) {
    uint64_t h = 0x6A09E667F3BCC909ull;
    for (uint64_t p : parts) h = splitmix64(h ^ splitmix64(p));
    return h;
}

}  // namespace calcseg
