// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace tina {

// splitmix64 finalizer, used for seed derivation and stable hashing.
uint64_t mix64(uint64_t x);

// FNV-1a over bytes; stable across platforms (unlike std::hash).
uint64_t fnv1a(const void* data, size_t len);
uint64_t fnv1a(const std::string& s);
std::string hex16(uint64_t v);

/// Deterministic RNG. mt19937_64 is fully specified by the standard and the
/// gaussian/bounded-int transforms are hand-rolled, so streams are
/// reproducible across platforms and library versions.
class Rng {
public:
    explicit Rng(uint64_t seed) : seed_(seed), gen_(mix64(seed)) {}

    uint64_t next_u64() { return gen_(); }

    // uniform in [0,1), 53-bit resolution
    double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // unbiased integer in [0, n)
    uint64_t below(uint64_t n);

    // Box-Muller with cached spare
    double gaussian();

    void fill_gaussian(std::vector<double>& v);

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    // independent substream; a pure function of (seed, stream), not of
    // how much the parent has consumed
    Rng fork(uint64_t stream) const { return Rng(mix64(seed_ ^ mix64(stream + 0x9e3779b97f4a7c15ull))); }

    uint64_t seed() const { return seed_; }

private:
    uint64_t seed_;
    std::mt19937_64 gen_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

// float32 little-endian blob IO (the on-disk precision for all parameter data)
void write_f32_blob(const std::string& path, const std::vector<double>& v);
std::vector<double> read_f32_blob(const std::string& path);
void append_f32(std::vector<unsigned char>& out, const std::vector<double>& v);
std::vector<double> decode_f32(const unsigned char* data, size_t count);

// round a double vector through float32, matching what a disk round-trip does
std::vector<double> to_f32_precision(const std::vector<double>& v);

void write_text_file(const std::string& path, const std::string& content);
std::string read_text_file(const std::string& path);

} // namespace tina
