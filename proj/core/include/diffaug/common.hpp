#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace diffaug {

// Bad or inconsistent configuration (CLI maps this to exit code 1).
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// A required artifact (checkpoint, dataset, file) is absent (exit code 2).
struct MissingArtifactError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Deterministic random source. One Rng per purpose, seeded from a master
// seed plus a stream tag, so adding a consumer never shifts another stream.
class Rng {
public:
    explicit Rng(uint64_t seed) : engine_(seed) {}
    Rng(uint64_t master_seed, const std::string& stream);

    std::mt19937_64& engine() { return engine_; }

    double uniform(double lo, double hi) {
        std::uniform_real_distribution<double> d(lo, hi);
        return d(engine_);
    }
    int uniform_int(int lo, int hi) {  // inclusive bounds
        std::uniform_int_distribution<int> d(lo, hi);
        return d(engine_);
    }
    double normal() {
        std::normal_distribution<double> d(0.0, 1.0);
        return d(engine_);
    }
    void fill_normal(std::vector<float>& out) {
        std::normal_distribution<double> d(0.0, 1.0);
        for (auto& v : out) v = static_cast<float>(d(engine_));
    }
    bool bernoulli(double p) {
        std::bernoulli_distribution d(p);
        return d(engine_);
    }
    // Derive an independent child seed, e.g. for per-scene or per-node rngs.
    uint64_t fork();

private:
    std::mt19937_64 engine_;
};

// Derives a 64-bit seed from a seed and a label (splitmix-style mixing).
uint64_t derive_seed(uint64_t seed, const std::string& label);
uint64_t derive_seed(uint64_t seed, uint64_t index);

// FNV-1a over raw bytes; used for parameter freeze checks and content hashes.
class Hasher {
public:
    void update(const void* data, size_t n);
    void update(const std::string& s) { update(s.data(), s.size()); }
    template <typename T>
    void update_pod(const T& v) {
        update(&v, sizeof(T));
    }
    uint64_t digest() const { return state_; }
    std::string hex() const;

private:
    uint64_t state_ = 0xcbf29ce484222325ull;
};

std::string hash_bytes_hex(const void* data, size_t n);

// Version info baked in at configure time.
std::string version_string();

}  // namespace diffaug
