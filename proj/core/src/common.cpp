#include "diffaug/common.hpp"

#include <cstdio>

namespace diffaug {

namespace {

uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

}  // namespace

uint64_t derive_seed(uint64_t seed, const std::string& label) {
    uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : label) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return splitmix64(seed ^ h);
}

uint64_t derive_seed(uint64_t seed, uint64_t index) {
    return splitmix64(seed ^ splitmix64(index + 0x632be59bd9b4e019ull));
}

Rng::Rng(uint64_t master_seed, const std::string& stream)
    : engine_(derive_seed(master_seed, stream)) {}

uint64_t Rng::fork() { return engine_(); }

void Hasher::update(const void* data, size_t n) {
    const unsigned char* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
        state_ ^= p[i];
        state_ *= 0x100000001b3ull;
    }
}

std::string Hasher::hex() const {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(state_));
    return std::string(buf);
}

std::string hash_bytes_hex(const void* data, size_t n) {
    Hasher h;
    h.update(data, n);
    return h.hex();
}

std::string version_string() {
#if defined(DIFFAUG_VERSION) && defined(DIFFAUG_GIT_REV)
    return std::string(DIFFAUG_VERSION) + "+" + DIFFAUG_GIT_REV;
#else
    return "dev";
#endif
}

}  // namespace diffaug
