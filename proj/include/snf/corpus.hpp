// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "snf/common.hpp"

namespace snf {

// Byte-level tokenization: one token per byte, vocabulary of 256. The
// validation range is the corpus tail; ranges never overlap.
struct TokenizedCorpus {
    std::vector<uint16_t> tokens;
    uint32_t vocab_size = 256;
    size_t train_begin = 0, train_end = 0;  // [begin, end)
    size_t val_begin = 0, val_end = 0;
};

enum class Split { Train, Validation };

struct Batch {
    size_t batch_size = 0, seq_len = 0;
    std::vector<int32_t> inputs;   // batch_size * seq_len
    std::vector<int32_t> targets;  // inputs shifted one position left
};

inline TokenizedCorpus tokenize_bytes(const std::vector<unsigned char>& bytes,
                                      double val_fraction = 0.1) {
    if (bytes.empty()) throw IngestionError("cannot tokenize an empty corpus");
    if (!(val_fraction > 0.0 && val_fraction < 1.0))
        throw ParameterError("val_fraction must lie in (0,1)");
    if (bytes.size() < 2) throw IngestionError("corpus too small to split");
    TokenizedCorpus c;
    c.tokens.resize(bytes.size());
    for (size_t i = 0; i < bytes.size(); ++i) c.tokens[i] = bytes[i];
    c.vocab_size = 256;
    size_t n_val = static_cast<size_t>(static_cast<double>(bytes.size()) * val_fraction);
    n_val = std::min(std::max<size_t>(n_val, 1), bytes.size() - 1);
    c.train_begin = 0;
    c.train_end = bytes.size() - n_val;
    c.val_begin = c.train_end;
    c.val_end = bytes.size();
    return c;
}

inline std::vector<unsigned char> detokenize(const TokenizedCorpus& c, size_t begin, size_t end) {
    if (begin > end || end > c.tokens.size())
        throw ParameterError("detokenize range out of bounds");
    std::vector<unsigned char> out(end - begin);
    for (size_t i = begin; i < end; ++i) {
        if (c.tokens[i] > 255)
            throw IngestionError("token id " + std::to_string(c.tokens[i]) +
                                 " is not a byte value");
        out[i - begin] = static_cast<unsigned char>(c.tokens[i]);
    }
    return out;
}

inline std::vector<unsigned char> detokenize(const TokenizedCorpus& c) {
    return detokenize(c, 0, c.tokens.size());
}

// ----------------------------- token cache -----------------------------

// Layout: "SNFC" magic, u32 vocab size, u64 token count, u16 ids, all
// little-endian.
inline void save_token_cache(const std::string& path, const TokenizedCorpus& c) {
    ByteWriter w;
    w.raw("SNFC", 4);
    w.u32(c.vocab_size);
    w.u64(c.tokens.size());
    for (uint16_t t : c.tokens) w.u16(t);
    write_file_atomic(path, w.buf.data(), w.buf.size());
}

inline bool is_token_cache(const std::vector<unsigned char>& bytes) {
    return bytes.size() >= 4 && std::memcmp(bytes.data(), "SNFC", 4) == 0;
}

inline TokenizedCorpus load_token_cache(const std::vector<unsigned char>& bytes,
                                        double val_fraction = 0.1) {
    ByteReader r(bytes.data(), bytes.size());
    char magic[4];
    r.raw(magic, 4);
    if (std::memcmp(magic, "SNFC", 4) != 0) throw IoError("bad token cache magic");
    TokenizedCorpus c;
    c.vocab_size = r.u32();
    if (c.vocab_size == 0) throw IoError("token cache vocab size is zero");
    uint64_t count = r.u64();
    if (count < 2) throw IngestionError("token cache too small to split");
    c.tokens.resize(count);
    for (uint64_t i = 0; i < count; ++i) {
        c.tokens[i] = r.u16();
        if (c.tokens[i] >= c.vocab_size)
            throw IoError("token id out of vocabulary range in cache");
    }
    if (!r.done()) throw IoError("trailing bytes after token cache payload");
    if (!(val_fraction > 0.0 && val_fraction < 1.0))
        throw ParameterError("val_fraction must lie in (0,1)");
    size_t n_val = static_cast<size_t>(static_cast<double>(count) * val_fraction);
    n_val = std::min(std::max<size_t>(n_val, 1), static_cast<size_t>(count) - 1);
    c.train_begin = 0;
    c.train_end = static_cast<size_t>(count) - n_val;
    c.val_begin = c.train_end;
    c.val_end = static_cast<size_t>(count);
    return c;
}

// Raw bytes and cache files share a loader; the magic decides.
inline TokenizedCorpus load_corpus_file(const std::string& path, double val_fraction = 0.1) {
    auto bytes = read_file_bytes(path);
    if (is_token_cache(bytes)) return load_token_cache(bytes, val_fraction);
    return tokenize_bytes(bytes, val_fraction);
}

// ----------------------------- batching -----------------------------

inline Batch sample_batch(const TokenizedCorpus& c, Split split, size_t batch_size,
                          size_t seq_len, Rng& rng) {
    size_t begin = split == Split::Train ? c.train_begin : c.val_begin;
    size_t end = split == Split::Train ? c.train_end : c.val_end;
    if (batch_size == 0 || seq_len == 0)
        throw ParameterError("batch dimensions must be positive");
    if (end - begin < seq_len + 1)
        throw ParameterError("split holds " + std::to_string(end - begin) +
                             " tokens, need at least " + std::to_string(seq_len + 1));
    Batch b;
    b.batch_size = batch_size;
    b.seq_len = seq_len;
    b.inputs.resize(batch_size * seq_len);
    b.targets.resize(batch_size * seq_len);
    for (size_t r = 0; r < batch_size; ++r) {
        size_t o = begin + static_cast<size_t>(rng.below(end - begin - seq_len));
        for (size_t i = 0; i < seq_len; ++i) {
            b.inputs[r * seq_len + i] = c.tokens[o + i];
            b.targets[r * seq_len + i] = c.tokens[o + i + 1];
        }
    }
    return b;
}

// Fixed evaluation schedule: the same seed always yields the same batches,
// so perplexity comparisons across runs and processes are exact.
struct EvalPlan {
    size_t batches = 4;
    size_t batch_size = 8;
    size_t seq_len = 64;
    uint64_t seed = 9001;
};

inline std::vector<Batch> make_eval_batches(const TokenizedCorpus& c, const EvalPlan& plan) {
    Rng rng(plan.seed);
    std::vector<Batch> out;
    out.reserve(plan.batches);
    for (size_t i = 0; i < plan.batches; ++i)
        out.push_back(sample_batch(c, Split::Validation, plan.batch_size, plan.seq_len, rng));
    return out;
}

}  // namespace snf
