#pragma once

// Named parameter registry and deterministic initialization.
//
// Every parameter draws from its own RNG seeded by (model seed, full name),
// so two models that share a component initialize it bit-identically even
// when the rest of their architecture differs.

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "mvssm/tensor.hpp"

namespace mvssm {

template <typename T>
struct NamedParam {
    std::string name;
    Tensor<T> tensor;
    bool trainable = true;
};

inline std::uint64_t fnv1a64(const std::string& s) {
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

inline std::uint64_t mix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

template <typename T>
class ParamFactory {
public:
    ParamFactory(std::uint64_t seed, std::vector<NamedParam<T>>* registry)
        : seed_(seed), registry_(registry) {}

    std::uint64_t seed() const { return seed_; }
    bool trainable = true;

    // U(-1/sqrt(fan_in), 1/sqrt(fan_in))
    Tensor<T> uniform_fan(const std::string& name, Shape shape, std::size_t fan_in) {
        const double lim = 1.0 / std::sqrt(static_cast<double>(fan_in));
        return uniform(name, std::move(shape), -lim, lim);
    }

    Tensor<T> uniform(const std::string& name, Shape shape, double lo, double hi) {
        std::mt19937_64 rng(mix64(seed_ ^ fnv1a64(name)));
        std::uniform_real_distribution<double> dist(lo, hi);
        std::vector<T> v(shape_numel(shape));
        for (T& x : v) x = static_cast<T>(dist(rng));
        return emplace(name, Tensor<T>(std::move(shape), std::move(v)));
    }

    Tensor<T> constant(const std::string& name, Shape shape, T value) {
        return emplace(name, Tensor<T>::full(std::move(shape), value));
    }

private:
    Tensor<T> emplace(const std::string& name, Tensor<T> t) {
        t.set_requires_grad(trainable);
        if (registry_) registry_->push_back(NamedParam<T>{name, t, trainable});
        return t;
    }

    std::uint64_t seed_;
    std::vector<NamedParam<T>>* registry_;
};

}  // namespace mvssm
