// Seeded randomness. Every consumer draws from a named stream derived from a
// single root seed, so adding or removing one consumer (e.g. selection-layer
// parameters) never perturbs the draws seen by the others.
#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace lasformer {

inline std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

inline std::uint64_t stream_seed(std::uint64_t root, std::string_view stream,
                                 std::uint64_t index = 0) {
    return splitmix64(splitmix64(root ^ fnv1a(stream)) ^ index);
}

class Rng {
public:
    explicit Rng(std::uint64_t seed) : gen_(seed) {}
    Rng(std::uint64_t root, std::string_view stream, std::uint64_t index = 0)
        : gen_(stream_seed(root, stream, index)) {}

    double normal(double mean = 0.0, double stddev = 1.0) {
        std::normal_distribution<double> dist(mean, stddev);
        return dist(gen_);
    }
    double uniform(double lo, double hi) {
        std::uniform_real_distribution<double> dist(lo, hi);
        return dist(gen_);
    }
    // Inclusive bounds.
    int uniform_int(int lo, int hi) {
        std::uniform_int_distribution<int> dist(lo, hi);
        return dist(gen_);
    }
    std::uint64_t next_u64() { return gen_(); }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(uniform_int(0, static_cast<int>(i) - 1));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::mt19937_64 gen_;
};

}  // namespace lasformer
