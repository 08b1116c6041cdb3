// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <optional>

#include <json.hpp>

#include "snf/common.hpp"

namespace snf {

using Json = nlohmann::json;

// ----------------------------- supernet -----------------------------

// The supernet is a homogeneous decoder-only transformer: every layer has
// the same width limits. Sub-networks select within these limits.
struct SupernetConfig {
    uint32_t layer_count = 0;
    uint32_t embed_dim = 0;
    uint32_t head_count = 0;
    uint32_t head_dim = 0;
    uint32_t mlp_dim = 0;
    uint32_t query_groups = 0;  // == head_count for standard attention
    uint32_t vocab_size = 0;
    uint32_t max_seq_len = 0;

    bool operator==(const SupernetConfig&) const = default;

    bool is_mha() const { return query_groups == head_count; }
    uint32_t heads_per_group() const { return head_count / query_groups; }
};

inline void validate_supernet(const SupernetConfig& s) {
    auto positive = [](uint32_t v, const char* name) {
        if (v == 0) throw ValidationError(std::string(name) + " must be positive");
    };
    positive(s.layer_count, "layer_count");
    positive(s.embed_dim, "embed_dim");
    positive(s.head_count, "head_count");
    positive(s.head_dim, "head_dim");
    positive(s.mlp_dim, "mlp_dim");
    positive(s.query_groups, "query_groups");
    positive(s.vocab_size, "vocab_size");
    positive(s.max_seq_len, "max_seq_len");
    if (s.head_count % s.query_groups != 0)
        throw ValidationError("query_groups must divide head_count");
}

inline Json to_json(const SupernetConfig& s) {
    return Json{{"layer_count", s.layer_count},   {"embed_dim", s.embed_dim},
                {"head_count", s.head_count},     {"head_dim", s.head_dim},
                {"mlp_dim", s.mlp_dim},           {"query_groups", s.query_groups},
                {"vocab_size", s.vocab_size},     {"max_seq_len", s.max_seq_len}};
}

inline SupernetConfig supernet_from_json(const Json& j) {
    SupernetConfig s;
    try {
        s.layer_count = j.at("layer_count").get<uint32_t>();
        s.embed_dim = j.at("embed_dim").get<uint32_t>();
        s.head_count = j.at("head_count").get<uint32_t>();
        s.head_dim = j.at("head_dim").get<uint32_t>();
        s.mlp_dim = j.at("mlp_dim").get<uint32_t>();
        s.query_groups = j.value("query_groups", s.head_count);
        s.vocab_size = j.at("vocab_size").get<uint32_t>();
        s.max_seq_len = j.at("max_seq_len").get<uint32_t>();
    } catch (const Json::exception& e) {
        throw ValidationError(std::string("bad supernet config: ") + e.what());
    }
    validate_supernet(s);
    return s;
}

// ----------------------------- sub-network -----------------------------

// Per-layer vectors run over the ACTIVE layers (length layer_count). Index
// lists, when present, carry the fine-grained selection; coarse configs
// leave them empty and mean "first n" everywhere. Index lists preserve
// selection order; shrinking drops from the tail.
struct SubnetworkConfig {
    uint32_t layer_count = 0;
    uint32_t embed_dim = 0;
    std::vector<uint32_t> heads;
    std::vector<uint32_t> head_dims;
    std::vector<uint32_t> query_groups;
    std::vector<uint32_t> mlp_dims;

    std::vector<uint32_t> embed_indices;
    std::vector<uint32_t> layer_indices;
    std::vector<std::vector<uint32_t>> head_indices;      // global head ids, group-major
    std::vector<std::vector<uint32_t>> group_indices;     // selected kv groups
    std::vector<std::vector<uint32_t>> head_dim_indices;  // shared by q/k/v of a layer
    std::vector<std::vector<uint32_t>> mlp_indices;

    bool operator==(const SubnetworkConfig&) const = default;

    bool has_index_sets() const { return !embed_indices.empty(); }
};

inline SubnetworkConfig coarse_uniform_config(uint32_t l, uint32_t e, uint32_t h, uint32_t s,
                                              uint32_t q, uint32_t d) {
    SubnetworkConfig c;
    c.layer_count = l;
    c.embed_dim = e;
    c.heads.assign(l, h);
    c.head_dims.assign(l, s);
    c.query_groups.assign(l, q);
    c.mlp_dims.assign(l, d);
    return c;
}

inline SubnetworkConfig full_config(const SupernetConfig& s) {
    return coarse_uniform_config(s.layer_count, s.embed_dim, s.head_count, s.head_dim,
                                 s.query_groups, s.mlp_dim);
}

namespace detail {

inline void check_distinct_in_range(const std::vector<uint32_t>& idx, uint32_t limit,
                                    const std::string& what) {
    std::vector<bool> seen(limit, false);
    for (uint32_t i : idx) {
        if (i >= limit)
            throw ValidationError(what + ": index " + std::to_string(i) + " out of range [0," +
                                  std::to_string(limit) + ")");
        if (seen[i]) throw ValidationError(what + ": duplicate index " + std::to_string(i));
        seen[i] = true;
    }
}

}  // namespace detail

// Structural validation against the supernet limits. Search-space
// membership is a separate, stricter check.
inline void validate_subnetwork(const SupernetConfig& s, const SubnetworkConfig& c) {
    validate_supernet(s);
    if (c.layer_count == 0 || c.layer_count > s.layer_count)
        throw ValidationError("layer_count " + std::to_string(c.layer_count) +
                              " outside [1," + std::to_string(s.layer_count) + "]");
    if (c.embed_dim == 0 || c.embed_dim > s.embed_dim)
        throw ValidationError("embed_dim " + std::to_string(c.embed_dim) + " outside [1," +
                              std::to_string(s.embed_dim) + "]");
    const size_t l = c.layer_count;
    if (c.heads.size() != l || c.head_dims.size() != l || c.query_groups.size() != l ||
        c.mlp_dims.size() != l)
        throw ValidationError("per-layer vectors must have length layer_count");
    const uint32_t hpg = s.heads_per_group();
    for (size_t i = 0; i < l; ++i) {
        uint32_t h = c.heads[i], hd = c.head_dims[i], q = c.query_groups[i], d = c.mlp_dims[i];
        if (h == 0 || h > s.head_count)
            throw ValidationError("heads out of range at layer " + std::to_string(i));
        if (hd == 0 || hd > s.head_dim)
            throw ValidationError("head_dims out of range at layer " + std::to_string(i));
        if (d == 0 || d > s.mlp_dim)
            throw ValidationError("mlp_dims out of range at layer " + std::to_string(i));
        if (q == 0 || q > s.query_groups)
            throw ValidationError("query_groups out of range at layer " + std::to_string(i));
        if (h % q != 0)
            throw ValidationError("query_groups must divide heads at layer " +
                                  std::to_string(i));
        if (h / q > hpg)
            throw ValidationError("heads per group exceeds supernet ratio at layer " +
                                  std::to_string(i));
    }

    const bool any_sets = !c.embed_indices.empty() || !c.layer_indices.empty() ||
                          !c.head_indices.empty() || !c.group_indices.empty() ||
                          !c.head_dim_indices.empty() || !c.mlp_indices.empty();
    if (!any_sets) return;
    if (c.embed_indices.size() != c.embed_dim)
        throw ValidationError("embed_indices size must equal embed_dim");
    if (c.layer_indices.size() != l)
        throw ValidationError("layer_indices size must equal layer_count");
    if (c.head_indices.size() != l || c.group_indices.size() != l ||
        c.head_dim_indices.size() != l || c.mlp_indices.size() != l)
        throw ValidationError("per-layer index lists must have length layer_count");
    detail::check_distinct_in_range(c.embed_indices, s.embed_dim, "embed_indices");
    detail::check_distinct_in_range(c.layer_indices, s.layer_count, "layer_indices");
    for (size_t i = 0; i < l; ++i) {
        if (c.head_indices[i].size() != c.heads[i])
            throw ValidationError("head_indices size mismatch at layer " + std::to_string(i));
        if (c.group_indices[i].size() != c.query_groups[i])
            throw ValidationError("group_indices size mismatch at layer " + std::to_string(i));
        if (c.head_dim_indices[i].size() != c.head_dims[i])
            throw ValidationError("head_dim_indices size mismatch at layer " +
                                  std::to_string(i));
        if (c.mlp_indices[i].size() != c.mlp_dims[i])
            throw ValidationError("mlp_indices size mismatch at layer " + std::to_string(i));
        detail::check_distinct_in_range(c.head_indices[i], s.head_count, "head_indices");
        detail::check_distinct_in_range(c.group_indices[i], s.query_groups, "group_indices");
        detail::check_distinct_in_range(c.head_dim_indices[i], s.head_dim, "head_dim_indices");
        detail::check_distinct_in_range(c.mlp_indices[i], s.mlp_dim, "mlp_indices");
        // Heads are listed group-major: slot block j holds the heads that
        // attend through group_indices[i][j].
        uint32_t per_group = c.heads[i] / c.query_groups[i];
        for (uint32_t j = 0; j < c.query_groups[i]; ++j)
            for (uint32_t t = 0; t < per_group; ++t) {
                uint32_t head = c.head_indices[i][j * per_group + t];
                if (head / hpg != c.group_indices[i][j])
                    throw ValidationError(
                        "head " + std::to_string(head) + " not in selected group " +
                        std::to_string(c.group_indices[i][j]) + " at layer " +
                        std::to_string(i));
            }
    }
}

inline Json to_json(const SubnetworkConfig& c) {
    Json j{{"layer_count", c.layer_count}, {"embed_dim", c.embed_dim},
           {"heads", c.heads},             {"head_dims", c.head_dims},
           {"query_groups", c.query_groups}, {"mlp_dims", c.mlp_dims}};
    if (c.has_index_sets()) {
        j["embed_indices"] = c.embed_indices;
        j["layer_indices"] = c.layer_indices;
        j["head_indices"] = c.head_indices;
        j["group_indices"] = c.group_indices;
        j["head_dim_indices"] = c.head_dim_indices;
        j["mlp_indices"] = c.mlp_indices;
    }
    return j;
}

inline SubnetworkConfig subnetwork_from_json(const Json& j) {
    SubnetworkConfig c;
    try {
        c.layer_count = j.at("layer_count").get<uint32_t>();
        c.embed_dim = j.at("embed_dim").get<uint32_t>();
        c.heads = j.at("heads").get<std::vector<uint32_t>>();
        c.head_dims = j.at("head_dims").get<std::vector<uint32_t>>();
        c.query_groups = j.at("query_groups").get<std::vector<uint32_t>>();
        c.mlp_dims = j.at("mlp_dims").get<std::vector<uint32_t>>();
        if (j.contains("embed_indices")) {
            c.embed_indices = j.at("embed_indices").get<std::vector<uint32_t>>();
            c.layer_indices = j.at("layer_indices").get<std::vector<uint32_t>>();
            c.head_indices = j.at("head_indices").get<std::vector<std::vector<uint32_t>>>();
            c.group_indices = j.at("group_indices").get<std::vector<std::vector<uint32_t>>>();
            c.head_dim_indices =
                j.at("head_dim_indices").get<std::vector<std::vector<uint32_t>>>();
            c.mlp_indices = j.at("mlp_indices").get<std::vector<std::vector<uint32_t>>>();
        }
    } catch (const Json::exception& e) {
        throw ValidationError(std::string("bad sub-network config: ") + e.what());
    }
    return c;
}

// Stable serialization used as a cache/equality key.
inline std::string canonical_key(const SubnetworkConfig& c) { return to_json(c).dump(); }

// ----------------------------- resolved dims -----------------------------

// A concrete (possibly heterogeneous) model geometry; extraction output.
struct LayerDims {
    uint32_t heads = 0, head_dim = 0, query_groups = 0, mlp_dim = 0;
    bool operator==(const LayerDims&) const = default;
};

struct ModelDims {
    uint32_t vocab_size = 0;
    uint32_t max_seq_len = 0;
    uint32_t embed_dim = 0;
    std::vector<LayerDims> layers;
    bool operator==(const ModelDims&) const = default;
};

inline ModelDims dims_of(const SupernetConfig& s) {
    ModelDims d;
    d.vocab_size = s.vocab_size;
    d.max_seq_len = s.max_seq_len;
    d.embed_dim = s.embed_dim;
    d.layers.assign(s.layer_count, LayerDims{s.head_count, s.head_dim, s.query_groups,
                                             s.mlp_dim});
    return d;
}

inline ModelDims resolve_dims(const SupernetConfig& s, const SubnetworkConfig& c) {
    validate_subnetwork(s, c);
    ModelDims d;
    d.vocab_size = s.vocab_size;
    d.max_seq_len = s.max_seq_len;
    d.embed_dim = c.embed_dim;
    d.layers.resize(c.layer_count);
    for (size_t i = 0; i < c.layer_count; ++i)
        d.layers[i] = LayerDims{c.heads[i], c.head_dims[i], c.query_groups[i], c.mlp_dims[i]};
    return d;
}

// Reconstructs the supernet description from a homogeneous geometry.
inline std::optional<SupernetConfig> homogeneous_supernet(const ModelDims& d) {
    if (d.layers.empty()) return std::nullopt;
    for (const auto& l : d.layers)
        if (!(l == d.layers[0])) return std::nullopt;
    SupernetConfig s;
    s.layer_count = static_cast<uint32_t>(d.layers.size());
    s.embed_dim = d.embed_dim;
    s.head_count = d.layers[0].heads;
    s.head_dim = d.layers[0].head_dim;
    s.query_groups = d.layers[0].query_groups;
    s.mlp_dim = d.layers[0].mlp_dim;
    s.vocab_size = d.vocab_size;
    s.max_seq_len = d.max_seq_len;
    return s;
}

inline Json to_json(const ModelDims& d) {
    Json layers = Json::array();
    for (const auto& l : d.layers)
        layers.push_back(Json{{"heads", l.heads},
                              {"head_dim", l.head_dim},
                              {"query_groups", l.query_groups},
                              {"mlp_dim", l.mlp_dim}});
    return Json{{"vocab_size", d.vocab_size},
                {"max_seq_len", d.max_seq_len},
                {"embed_dim", d.embed_dim},
                {"layers", layers}};
}

inline ModelDims model_dims_from_json(const Json& j) {
    ModelDims d;
    try {
        d.vocab_size = j.at("vocab_size").get<uint32_t>();
        d.max_seq_len = j.at("max_seq_len").get<uint32_t>();
        d.embed_dim = j.at("embed_dim").get<uint32_t>();
        for (const auto& lj : j.at("layers")) {
            LayerDims l;
            l.heads = lj.at("heads").get<uint32_t>();
            l.head_dim = lj.at("head_dim").get<uint32_t>();
            l.query_groups = lj.at("query_groups").get<uint32_t>();
            l.mlp_dim = lj.at("mlp_dim").get<uint32_t>();
            d.layers.push_back(l);
        }
    } catch (const Json::exception& e) {
        throw ValidationError(std::string("bad model dims: ") + e.what());
    }
    return d;
}

// ----------------------------- parameter counting -----------------------------

// Exact element count of the dense model with these dims. Tied to the
// weight layout in model.hpp; the test suite asserts agreement with the
// actual tensor sizes of extracted models.
inline uint64_t count_params(const ModelDims& d) {
    const uint64_t v = d.vocab_size, e = d.embed_dim, s = d.max_seq_len;
    uint64_t total = v * e + s * e;  // token + position tables
    for (const auto& l : d.layers) {
        const uint64_t h = l.heads, hd = l.head_dim, q = l.query_groups, m = l.mlp_dim;
        total += 2 * e;                      // pre-attention norm
        total += h * hd * e + h * hd;        // query projection
        total += 2 * (q * hd * e + q * hd);  // key and value projections
        total += e * h * hd + e;             // output projection
        total += 2 * e;                      // pre-mlp norm
        total += m * e + m;                  // mlp expand
        total += e * m + e;                  // mlp contract
    }
    total += 2 * e;  // final norm
    total += v * e;  // untied output head
    return total;
}

inline uint64_t count_params(const SupernetConfig& s, const SubnetworkConfig& c) {
    return count_params(resolve_dims(s, c));
}

}  // namespace snf
