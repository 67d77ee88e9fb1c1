// SPDX-License-Identifier: Apache-2.0
#include "tina/common.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

namespace tina {

uint64_t mix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

uint64_t fnv1a(const void* data, size_t len) {
    const auto* p = static_cast<const unsigned char*>(data);
    uint64_t h = 0xcbf29ce484222325ull;
    for (size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

uint64_t fnv1a(const std::string& s) { return fnv1a(s.data(), s.size()); }

std::string hex16(uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[static_cast<size_t>(i)] = digits[v & 0xf];
        v >>= 4;
    }
    return out;
}

uint64_t Rng::below(uint64_t n) {
    if (n == 0) throw std::invalid_argument("Rng::below: n must be positive");
    // rejection sampling to stay unbiased
    uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    uint64_t v;
    do {
        v = gen_();
    } while (v >= limit);
    return v % n;
}

double Rng::gaussian() {
    if (has_spare_) {
        has_spare_ = false;
        return spare_;
    }
    // Box-Muller; u clamped away from 0 so log stays finite
    double u = uniform();
    if (u < 1e-300) u = 1e-300;
    double v = uniform();
    double r = std::sqrt(-2.0 * std::log(u));
    double theta = 2.0 * 3.14159265358979323846 * v;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
}

void Rng::fill_gaussian(std::vector<double>& v) {
    for (double& x : v) x = gaussian();
}

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big,
              "mixed-endian platforms unsupported");

static void to_le_f32(const std::vector<double>& v, std::vector<unsigned char>& out) {
    size_t base = out.size();
    out.resize(base + v.size() * 4);
    for (size_t i = 0; i < v.size(); ++i) {
        float f = static_cast<float>(v[i]);
        uint32_t u;
        std::memcpy(&u, &f, 4);
        if constexpr (std::endian::native == std::endian::big) {
            u = __builtin_bswap32(u);
        }
        std::memcpy(out.data() + base + i * 4, &u, 4);
    }
}

void append_f32(std::vector<unsigned char>& out, const std::vector<double>& v) { to_le_f32(v, out); }

std::vector<double> decode_f32(const unsigned char* data, size_t count) {
    std::vector<double> v(count);
    for (size_t i = 0; i < count; ++i) {
        uint32_t u;
        std::memcpy(&u, data + i * 4, 4);
        if constexpr (std::endian::native == std::endian::big) {
            u = __builtin_bswap32(u);
        }
        float f;
        std::memcpy(&f, &u, 4);
        v[i] = static_cast<double>(f);
    }
    return v;
}

void write_f32_blob(const std::string& path, const std::vector<double>& v) {
    std::vector<unsigned char> bytes;
    to_le_f32(v, bytes);
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot open for write: " + path);
    os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw std::runtime_error("write failed: " + path);
}

std::vector<double> read_f32_blob(const std::string& path) {
    std::ifstream is(path, std::ios::binary | std::ios::ate);
    if (!is) throw std::runtime_error("cannot open: " + path);
    auto size = static_cast<size_t>(is.tellg());
    if (size % 4 != 0) throw std::runtime_error("blob size not a multiple of 4: " + path);
    is.seekg(0);
    std::vector<unsigned char> bytes(size);
    is.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(size));
    if (!is) throw std::runtime_error("read failed: " + path);
    return decode_f32(bytes.data(), size / 4);
}

std::vector<double> to_f32_precision(const std::vector<double>& v) {
    std::vector<double> out(v.size());
    for (size_t i = 0; i < v.size(); ++i) out[i] = static_cast<double>(static_cast<float>(v[i]));
    return out;
}

void write_text_file(const std::string& path, const std::string& content) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot open for write: " + path);
    os << content;
    if (!os) throw std::runtime_error("write failed: " + path);
}

std::string read_text_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary | std::ios::ate);
    if (!is) throw std::runtime_error("cannot open: " + path);
    auto size = static_cast<size_t>(is.tellg());
    is.seekg(0);
    std::string s(size, '\0');
    is.read(s.data(), static_cast<std::streamsize>(size));
    if (!is) throw std::runtime_error("read failed: " + path);
    return s;
}

} // namespace tina
