#ifndef DCV_RNG_HPP
#define DCV_RNG_HPP

#include "dcv/tensor.hpp"

#include <cstdint>
#include <random>

namespace dcv {

/// Seeded generator shared by data synthesis, initialization and training.
/// Uses the standard engines so a given (seed, build) pair is reproducible.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    /// Independent stream derived from (seed, stream) by SplitMix64 mixing.
    static Rng derive(std::uint64_t seed, std::uint64_t stream) { return Rng(mix(seed ^ mix(stream + 0x9e3779b97f4a7c15ULL))); }

    double uniform(double lo = 0.0, double hi = 1.0) { return std::uniform_real_distribution<double>(lo, hi)(engine_); }
    double normal(double mean = 0.0, double stddev = 1.0) { return std::normal_distribution<double>(mean, stddev)(engine_); }
    Index integer(Index lo, Index hi) { return std::uniform_int_distribution<Index>(lo, hi)(engine_); }
    std::uint64_t next() { return engine_(); }

    template <typename S>
    Tensor<S> normal_tensor(Shape shape, double stddev = 1.0) {
        Tensor<S> t(std::move(shape));
        for (Index i = 0; i < t.numel(); ++i) t.data[i] = S(normal(0.0, stddev));
        return t;
    }

    template <typename S>
    Tensor<S> uniform_tensor(Shape shape, double lo, double hi) {
        Tensor<S> t(std::move(shape));
        for (Index i = 0; i < t.numel(); ++i) t.data[i] = S(uniform(lo, hi));
        return t;
    }

    static std::uint64_t mix(std::uint64_t z) {
        z += 0x9e3779b97f4a7c15ULL;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

private:
    std::mt19937_64 engine_;
};

}  // namespace dcv

#endif  // DCV_RNG_HPP
