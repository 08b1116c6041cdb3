// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "snf/common.hpp"

namespace snf {

// Tensor archive: magic "SNFW", u32 format version, length-prefixed UTF-8
// config text, then tensor records until end of file. Each record is
// {u32 name length, name bytes, u8 dtype (0 = f32), u32 rank, u64 dims,
// little-endian payload}. Everything is bit-exact: a round trip preserves
// float payloads identically.
inline constexpr uint32_t kArchiveVersion = 1;

struct NamedTensor {
    std::string name;
    std::vector<uint64_t> dims;
    std::vector<float> data;

    uint64_t numel() const {
        uint64_t n = 1;
        for (uint64_t d : dims) n *= d;
        return n;
    }
};

struct Archive {
    std::string config_text;
    std::vector<NamedTensor> tensors;

    const NamedTensor* find(const std::string& name) const {
        for (const auto& t : tensors)
            if (t.name == name) return &t;
        return nullptr;
    }
};

inline std::vector<unsigned char> encode_archive(const Archive& a) {
    ByteWriter w;
    w.raw("SNFW", 4);
    w.u32(kArchiveVersion);
    w.u32(static_cast<uint32_t>(a.config_text.size()));
    w.raw(a.config_text.data(), a.config_text.size());
    for (const auto& t : a.tensors) {
        if (t.numel() != t.data.size())
            throw IoError("tensor " + t.name + " dims do not match payload");
        w.u32(static_cast<uint32_t>(t.name.size()));
        w.raw(t.name.data(), t.name.size());
        w.u8(0);
        w.u32(static_cast<uint32_t>(t.dims.size()));
        for (uint64_t d : t.dims) w.u64(d);
        for (float v : t.data) w.f32(v);
    }
    return w.buf;
}

inline void save_archive(const std::string& path, const Archive& a) {
    auto bytes = encode_archive(a);
    write_file_atomic(path, bytes.data(), bytes.size());
}

inline Archive decode_archive(const std::vector<unsigned char>& bytes) {
    ByteReader r(bytes.data(), bytes.size());
    char magic[4];
    r.raw(magic, 4);
    if (std::memcmp(magic, "SNFW", 4) != 0) throw IoError("bad archive magic");
    uint32_t version = r.u32();
    if (version != kArchiveVersion)
        throw IoError("unsupported archive version " + std::to_string(version));
    Archive a;
    uint32_t clen = r.u32();
    a.config_text.resize(clen);
    r.raw(a.config_text.data(), clen);
    while (!r.done()) {
        NamedTensor t;
        uint32_t nlen = r.u32();
        t.name.resize(nlen);
        r.raw(t.name.data(), nlen);
        uint8_t dtype = r.u8();
        if (dtype != 0) throw IoError("unsupported dtype " + std::to_string(dtype));
        uint32_t rank = r.u32();
        t.dims.resize(rank);
        uint64_t n = 1;
        for (uint32_t i = 0; i < rank; ++i) {
            t.dims[i] = r.u64();
            n *= t.dims[i];
        }
        t.data.resize(n);
        for (uint64_t i = 0; i < n; ++i) t.data[i] = r.f32();
        a.tensors.push_back(std::move(t));
    }
    return a;
}

inline Archive load_archive(const std::string& path) {
    return decode_archive(read_file_bytes(path));
}

}  // namespace snf
