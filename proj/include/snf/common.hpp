// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace snf {

// ----------------------------- errors -----------------------------

struct ValidationError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct DimensionError : ValidationError {
    using ValidationError::ValidationError;
};

struct ParameterError : ValidationError {
    using ValidationError::ValidationError;
};

struct IndexError : ValidationError {
    using ValidationError::ValidationError;
};

struct IngestionError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct RejectionError : std::runtime_error {
    size_t attempts;
    explicit RejectionError(const std::string& msg, size_t n)
        : std::runtime_error(msg), attempts(n) {}
};

struct InfeasibleBinError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct FitnessError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct DivergenceError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// ----------------------------- rng -----------------------------

// xoshiro256** seeded via splitmix64. Self-contained so that sampling is
// bit-reproducible across standard libraries and platforms; the state is
// four words, which makes run resumption a matter of storing them.
class Rng {
public:
    explicit Rng(uint64_t seed = 0) { reseed(seed); }

    void reseed(uint64_t seed) {
        uint64_t x = seed;
        for (auto& w : s_) {
            x += 0x9e3779b97f4a7c15ull;
            uint64_t z = x;
            z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
            z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
            w = z ^ (z >> 31);
        }
    }

    uint64_t next_u64() {
        const uint64_t result = rotl(s_[1] * 5, 7) * 9;
        const uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = rotl(s_[3], 45);
        return result;
    }

    // Uniform integer in [0, n). Lemire's multiply-shift with rejection.
    uint64_t below(uint64_t n) {
        if (n == 0) throw ParameterError("Rng::below: n must be positive");
        while (true) {
            uint64_t x = next_u64();
            __uint128_t m = static_cast<__uint128_t>(x) * n;
            uint64_t lo = static_cast<uint64_t>(m);
            if (lo >= n || lo >= static_cast<uint64_t>(-static_cast<int64_t>(n)) % n)
                return static_cast<uint64_t>(m >> 64);
        }
    }

    size_t index(size_t n) { return static_cast<size_t>(below(n)); }

    // Uniform in [0, 1).
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    bool coin(double p) { return uniform() < p; }

    // Box-Muller; the second variate of each pair is discarded so the
    // state stays exactly four words.
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586477 * u2);
    }

    std::array<uint64_t, 4> state() const { return {s_[0], s_[1], s_[2], s_[3]}; }
    void set_state(const std::array<uint64_t, 4>& st) {
        for (int i = 0; i < 4; ++i) s_[i] = st[i];
    }

    // Independent stream for a sub-task (per-bin search, per-worker init).
    Rng fork(uint64_t salt) {
        Rng r(0);
        r.s_[0] = s_[0] ^ (0x9e3779b97f4a7c15ull * (salt + 1));
        r.s_[1] = s_[1] + 0xbf58476d1ce4e5b9ull * (salt + 1);
        r.s_[2] = s_[2] ^ rotl(salt + 0x94d049bb133111ebull, 23);
        r.s_[3] = s_[3] + rotl(salt, 51) + 1;
        for (int i = 0; i < 8; ++i) r.next_u64();
        return r;
    }

private:
    static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
    uint64_t s_[4];
};

// Partial Fisher-Yates: k distinct values from [0, n), in selection order.
inline std::vector<uint32_t> sample_distinct(uint32_t n, uint32_t k, Rng& rng) {
    if (k > n) throw ParameterError("sample_distinct: k exceeds n");
    std::vector<uint32_t> pool(n);
    for (uint32_t i = 0; i < n; ++i) pool[i] = i;
    for (uint32_t i = 0; i < k; ++i) {
        uint32_t j = i + static_cast<uint32_t>(rng.below(n - i));
        std::swap(pool[i], pool[j]);
    }
    pool.resize(k);
    return pool;
}

// ----------------------------- hashing -----------------------------

// FNV-1a, used for content hashes in run manifests.
inline uint64_t fnv1a64(const void* data, size_t len, uint64_t h = 0xcbf29ce484222325ull) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

inline std::string hex64(uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i) {
        s[static_cast<size_t>(i)] = digits[v & 0xf];
        v >>= 4;
    }
    return s;
}

// ----------------------------- binary io -----------------------------

struct ByteWriter {
    std::vector<unsigned char> buf;

    void raw(const void* p, size_t n) {
        const auto* b = static_cast<const unsigned char*>(p);
        buf.insert(buf.end(), b, b + n);
    }
    void u8(uint8_t v) { raw(&v, 1); }
    void u16(uint16_t v) {
        unsigned char b[2] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8)};
        raw(b, 2);
    }
    void u32(uint32_t v) {
        unsigned char b[4];
        for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
        raw(b, 4);
    }
    void u64(uint64_t v) {
        unsigned char b[8];
        for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
        raw(b, 8);
    }
    void f32(float v) {
        uint32_t bits;
        std::memcpy(&bits, &v, 4);
        u32(bits);
    }
    void f64(double v) {
        uint64_t bits;
        std::memcpy(&bits, &v, 8);
        u64(bits);
    }
};

struct ByteReader {
    const unsigned char* p;
    size_t n;
    size_t off = 0;

    ByteReader(const void* data, size_t len)
        : p(static_cast<const unsigned char*>(data)), n(len) {}

    void need(size_t k) const {
        if (off + k > n) throw IoError("truncated input");
    }
    void raw(void* out, size_t k) {
        need(k);
        std::memcpy(out, p + off, k);
        off += k;
    }
    uint8_t u8() {
        need(1);
        return p[off++];
    }
    uint16_t u16() {
        need(2);
        uint16_t v = static_cast<uint16_t>(p[off] | (p[off + 1] << 8));
        off += 2;
        return v;
    }
    uint32_t u32() {
        need(4);
        uint32_t v = 0;
        for (int i = 3; i >= 0; --i) v = (v << 8) | p[off + static_cast<size_t>(i)];
        off += 4;
        return v;
    }
    uint64_t u64() {
        need(8);
        uint64_t v = 0;
        for (int i = 7; i >= 0; --i) v = (v << 8) | p[off + static_cast<size_t>(i)];
        off += 8;
        return v;
    }
    float f32() {
        uint32_t bits = u32();
        float v;
        std::memcpy(&v, &bits, 4);
        return v;
    }
    double f64() {
        uint64_t bits = u64();
        double v;
        std::memcpy(&v, &bits, 8);
        return v;
    }
    bool done() const { return off == n; }
};

inline std::vector<unsigned char> read_file_bytes(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open file: " + path);
    f.seekg(0, std::ios::end);
    std::streamoff len = f.tellg();
    f.seekg(0, std::ios::beg);
    std::vector<unsigned char> out(static_cast<size_t>(len));
    if (len > 0) f.read(reinterpret_cast<char*>(out.data()), len);
    if (!f) throw IoError("cannot read file: " + path);
    return out;
}

// Write-temp-then-rename so partially written files are never observed.
inline void write_file_atomic(const std::string& path, const void* data, size_t len) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw IoError("cannot open file for writing: " + tmp);
        if (len > 0) f.write(static_cast<const char*>(data), static_cast<std::streamsize>(len));
        if (!f) throw IoError("cannot write file: " + tmp);
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0)
        throw IoError("cannot rename " + tmp + " to " + path);
}

inline void write_file_atomic(const std::string& path, const std::string& text) {
    write_file_atomic(path, text.data(), text.size());
}

}  // namespace snf
