// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <boost/multiprecision/cpp_int.hpp>

#include "snf/config.hpp"

namespace snf {

using BigInt = boost::multiprecision::cpp_int;

enum class Granularity { Coarse, FineGrained };
enum class Layering { Uniform, LayerWise };

// Choice sets are explicit ordered lists so stepped sets like {4,6,...,128}
// are expressible. group_choices is empty exactly when the supernet uses
// standard attention (every head its own key/value group); then the group
// count always equals the head count and is not searched.
struct SearchSpace {
    Granularity granularity = Granularity::Coarse;
    Layering layering = Layering::Uniform;
    std::vector<uint32_t> layer_choices;
    std::vector<uint32_t> embed_choices;
    std::vector<uint32_t> head_choices;
    std::vector<uint32_t> head_dim_choices;
    std::vector<uint32_t> mlp_choices;
    std::vector<uint32_t> group_choices;

    bool fine_grained() const { return granularity == Granularity::FineGrained; }
    bool layer_wise() const { return layering == Layering::LayerWise; }
};

// Attention dimensions are sampled jointly over the valid (heads, groups)
// pairs: the group count must divide the head count and the heads-per-group
// ratio can not exceed the supernet's.
struct AttnPair {
    uint32_t heads = 0, groups = 0;
    bool operator==(const AttnPair&) const = default;
};

inline std::vector<AttnPair> attn_pairs(const SearchSpace& sp, const SupernetConfig& su) {
    std::vector<AttnPair> out;
    const uint32_t hpg = su.heads_per_group();
    if (sp.group_choices.empty()) {
        for (uint32_t h : sp.head_choices) out.push_back({h, h});
    } else {
        for (uint32_t h : sp.head_choices)
            for (uint32_t q : sp.group_choices)
                if (h % q == 0 && h / q <= hpg) out.push_back({h, q});
    }
    return out;
}

inline void validate_space(const SearchSpace& sp, const SupernetConfig& su) {
    validate_supernet(su);
    auto check = [](const std::vector<uint32_t>& v, uint32_t limit, const char* name) {
        if (v.empty()) throw ValidationError(std::string(name) + " is empty");
        std::vector<bool> seen(limit + 1, false);
        for (uint32_t x : v) {
            if (x == 0 || x > limit)
                throw ValidationError(std::string(name) + " value " + std::to_string(x) +
                                      " outside [1," + std::to_string(limit) + "]");
            if (seen[x])
                throw ValidationError(std::string(name) + " has duplicate value " +
                                      std::to_string(x));
            seen[x] = true;
        }
    };
    check(sp.layer_choices, su.layer_count, "layer_choices");
    check(sp.embed_choices, su.embed_dim, "embed_choices");
    check(sp.head_choices, su.head_count, "head_choices");
    check(sp.head_dim_choices, su.head_dim, "head_dim_choices");
    check(sp.mlp_choices, su.mlp_dim, "mlp_choices");
    if (su.is_mha()) {
        if (!sp.group_choices.empty())
            throw ValidationError(
                "group_choices must be empty for a standard-attention supernet");
    } else {
        check(sp.group_choices, su.query_groups, "group_choices");
    }
    if (attn_pairs(sp, su).empty())
        throw ValidationError("no valid (heads, groups) combination in this space");
}

// The everything-searchable space: full ranges 1..max on every dimension.
inline SearchSpace full_space(const SupernetConfig& su, Granularity g, Layering lw) {
    auto range = [](uint32_t n) {
        std::vector<uint32_t> v(n);
        for (uint32_t i = 0; i < n; ++i) v[i] = i + 1;
        return v;
    };
    SearchSpace sp;
    sp.granularity = g;
    sp.layering = lw;
    sp.layer_choices = range(su.layer_count);
    sp.embed_choices = range(su.embed_dim);
    sp.head_choices = range(su.head_count);
    sp.head_dim_choices = range(su.head_dim);
    sp.mlp_choices = range(su.mlp_dim);
    if (!su.is_mha()) sp.group_choices = range(su.query_groups);
    return sp;
}

// ----------------------------- json io -----------------------------

inline Json to_json(const SearchSpace& sp) {
    Json j{{"granularity", sp.fine_grained() ? "fine_grained" : "coarse"},
           {"layering", sp.layer_wise() ? "layer_wise" : "uniform"},
           {"layer_choices", sp.layer_choices},
           {"embed_choices", sp.embed_choices},
           {"head_choices", sp.head_choices},
           {"head_dim_choices", sp.head_dim_choices},
           {"mlp_choices", sp.mlp_choices}};
    if (!sp.group_choices.empty()) j["group_choices"] = sp.group_choices;
    return j;
}

inline SearchSpace space_from_json(const Json& j) {
    SearchSpace sp;
    try {
        std::string g = j.at("granularity").get<std::string>();
        if (g == "coarse")
            sp.granularity = Granularity::Coarse;
        else if (g == "fine_grained")
            sp.granularity = Granularity::FineGrained;
        else
            throw ValidationError("unknown granularity: " + g);
        std::string lw = j.at("layering").get<std::string>();
        if (lw == "uniform")
            sp.layering = Layering::Uniform;
        else if (lw == "layer_wise")
            sp.layering = Layering::LayerWise;
        else
            throw ValidationError("unknown layering: " + lw);
        sp.layer_choices = j.at("layer_choices").get<std::vector<uint32_t>>();
        sp.embed_choices = j.at("embed_choices").get<std::vector<uint32_t>>();
        sp.head_choices = j.at("head_choices").get<std::vector<uint32_t>>();
        sp.head_dim_choices = j.at("head_dim_choices").get<std::vector<uint32_t>>();
        sp.mlp_choices = j.at("mlp_choices").get<std::vector<uint32_t>>();
        if (j.contains("group_choices"))
            sp.group_choices = j.at("group_choices").get<std::vector<uint32_t>>();
    } catch (const Json::exception& e) {
        throw ValidationError(std::string("bad search space: ") + e.what());
    }
    return sp;
}

// ----------------------------- sampling -----------------------------

namespace detail {

template <class T>
const T& pick(const std::vector<T>& v, Rng& rng) {
    return v[rng.index(v.size())];
}

// Group-major head sampling: choose the kv groups, then distinct heads
// inside each chosen group, so slot block j belongs to group j.
inline void sample_heads(uint32_t heads, uint32_t groups, const SupernetConfig& su, Rng& rng,
                         std::vector<uint32_t>& head_idx, std::vector<uint32_t>& group_idx) {
    const uint32_t hpg = su.heads_per_group();
    group_idx = sample_distinct(su.query_groups, groups, rng);
    head_idx.clear();
    uint32_t per_group = heads / groups;
    for (uint32_t g : group_idx) {
        auto offs = sample_distinct(hpg, per_group, rng);
        for (uint32_t o : offs) head_idx.push_back(g * hpg + o);
    }
}

}  // namespace detail

inline SubnetworkConfig sample(const SearchSpace& sp, const SupernetConfig& su, Rng& rng) {
    const auto pairs = attn_pairs(sp, su);
    const uint32_t l = detail::pick(sp.layer_choices, rng);
    const uint32_t e = detail::pick(sp.embed_choices, rng);
    SubnetworkConfig c;
    c.layer_count = l;
    c.embed_dim = e;
    c.heads.resize(l);
    c.head_dims.resize(l);
    c.query_groups.resize(l);
    c.mlp_dims.resize(l);
    if (sp.layer_wise()) {
        for (uint32_t i = 0; i < l; ++i) {
            AttnPair p = detail::pick(pairs, rng);
            c.heads[i] = p.heads;
            c.query_groups[i] = p.groups;
            c.head_dims[i] = detail::pick(sp.head_dim_choices, rng);
            c.mlp_dims[i] = detail::pick(sp.mlp_choices, rng);
        }
    } else {
        AttnPair p = detail::pick(pairs, rng);
        uint32_t hs = detail::pick(sp.head_dim_choices, rng);
        uint32_t d = detail::pick(sp.mlp_choices, rng);
        for (uint32_t i = 0; i < l; ++i) {
            c.heads[i] = p.heads;
            c.query_groups[i] = p.groups;
            c.head_dims[i] = hs;
            c.mlp_dims[i] = d;
        }
    }
    if (sp.fine_grained()) {
        c.embed_indices = sample_distinct(su.embed_dim, e, rng);
        c.layer_indices = sample_distinct(su.layer_count, l, rng);
        c.head_indices.resize(l);
        c.group_indices.resize(l);
        c.head_dim_indices.resize(l);
        c.mlp_indices.resize(l);
        for (uint32_t i = 0; i < l; ++i) {
            detail::sample_heads(c.heads[i], c.query_groups[i], su, rng, c.head_indices[i],
                                 c.group_indices[i]);
            c.head_dim_indices[i] = sample_distinct(su.head_dim, c.head_dims[i], rng);
            c.mlp_indices[i] = sample_distinct(su.mlp_dim, c.mlp_dims[i], rng);
        }
    }
    return c;
}

// ----------------------------- membership validation -----------------------------

struct Violation {
    std::string code;
    std::string message;
};

// Space-membership checks only; structural bounds against the supernet are
// validate_subnetwork's job. Returns violations instead of throwing.
inline std::vector<Violation> validate(const SearchSpace& sp, const SubnetworkConfig& c) {
    std::vector<Violation> out;
    auto member = [&out](uint32_t v, const std::vector<uint32_t>& choices,
                         const std::string& what) {
        if (std::find(choices.begin(), choices.end(), v) == choices.end())
            out.push_back({"membership", what + " value " + std::to_string(v) +
                                              " not in choice set"});
    };
    member(c.layer_count, sp.layer_choices, "layer_count");
    member(c.embed_dim, sp.embed_choices, "embed_dim");
    if (c.heads.size() != c.layer_count || c.head_dims.size() != c.layer_count ||
        c.query_groups.size() != c.layer_count || c.mlp_dims.size() != c.layer_count) {
        out.push_back({"index_sets", "per-layer vectors must have length layer_count"});
        return out;
    }
    for (size_t i = 0; i < c.layer_count; ++i) {
        member(c.heads[i], sp.head_choices, "heads[" + std::to_string(i) + "]");
        member(c.head_dims[i], sp.head_dim_choices, "head_dims[" + std::to_string(i) + "]");
        member(c.mlp_dims[i], sp.mlp_choices, "mlp_dims[" + std::to_string(i) + "]");
        if (sp.group_choices.empty()) {
            if (c.query_groups[i] != c.heads[i])
                out.push_back({"membership",
                               "query_groups[" + std::to_string(i) +
                                   "] must equal heads in a standard-attention space"});
        } else {
            member(c.query_groups[i], sp.group_choices,
                   "query_groups[" + std::to_string(i) + "]");
        }
    }
    if (!sp.layer_wise()) {
        for (size_t i = 1; i < c.layer_count; ++i)
            if (c.heads[i] != c.heads[0] || c.head_dims[i] != c.head_dims[0] ||
                c.query_groups[i] != c.query_groups[0] || c.mlp_dims[i] != c.mlp_dims[0]) {
                out.push_back({"uniformity",
                               "layer " + std::to_string(i) + " differs in a uniform space"});
                break;
            }
    }
    const bool any_sets = !c.embed_indices.empty() || !c.layer_indices.empty() ||
                          !c.head_indices.empty() || !c.group_indices.empty() ||
                          !c.head_dim_indices.empty() || !c.mlp_indices.empty();
    if (!sp.fine_grained()) {
        if (any_sets)
            out.push_back({"granularity", "coarse config must not carry index sets"});
        return out;
    }
    if (!any_sets) {
        out.push_back({"granularity", "fine-grained config requires index sets"});
        return out;
    }
    auto check_set = [&out](const std::vector<uint32_t>& idx, size_t want,
                            const std::string& what) {
        if (idx.size() != want) {
            out.push_back({"index_sets", what + " has " + std::to_string(idx.size()) +
                                             " entries, expected " + std::to_string(want)});
            return;
        }
        std::vector<uint32_t> sorted = idx;
        std::sort(sorted.begin(), sorted.end());
        if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end())
            out.push_back({"index_sets", what + " contains duplicates"});
    };
    check_set(c.embed_indices, c.embed_dim, "embed_indices");
    check_set(c.layer_indices, c.layer_count, "layer_indices");
    if (c.head_indices.size() != c.layer_count || c.group_indices.size() != c.layer_count ||
        c.head_dim_indices.size() != c.layer_count || c.mlp_indices.size() != c.layer_count) {
        out.push_back({"index_sets", "per-layer index lists must have length layer_count"});
        return out;
    }
    for (size_t i = 0; i < c.layer_count; ++i) {
        check_set(c.head_indices[i], c.heads[i], "head_indices[" + std::to_string(i) + "]");
        check_set(c.group_indices[i], c.query_groups[i],
                  "group_indices[" + std::to_string(i) + "]");
        check_set(c.head_dim_indices[i], c.head_dims[i],
                  "head_dim_indices[" + std::to_string(i) + "]");
        check_set(c.mlp_indices[i], c.mlp_dims[i], "mlp_indices[" + std::to_string(i) + "]");
    }
    return out;
}

// ----------------------------- cardinality -----------------------------

// Closed-form size of the space, generalizing each published factor to the
// size of its choice set; the attention factor counts valid (heads, groups)
// pairs. Fine-grained forms use 2^(set size) and intentionally overcount
// relative to distinct subset tuples; only coarse spaces are enumerable.
inline BigInt cardinality(const SearchSpace& sp, const SupernetConfig& su) {
    validate_space(sp, su);
    const uint64_t p = attn_pairs(sp, su).size();
    const uint64_t ul = sp.layer_choices.size();
    const uint64_t ue = sp.embed_choices.size();
    const uint64_t us = sp.head_dim_choices.size();
    const uint64_t ud = sp.mlp_choices.size();
    const uint64_t L = su.layer_count;
    if (!sp.fine_grained()) {
        if (!sp.layer_wise()) return BigInt(ul) * ue * p * us * ud;
        return BigInt(ue) * boost::multiprecision::pow(BigInt(p) * us * ud,
                                                       static_cast<unsigned>(L));
    }
    if (!sp.layer_wise()) return BigInt(1) << static_cast<unsigned>(ue * p * us * ud * ul);
    return BigInt(1) << static_cast<unsigned>(ue + (p + us + ud) * L + ul);
}

// ----------------------------- enumeration -----------------------------

// Exhaustive listing for coarse spaces (the enumeration oracle). Uniform
// spaces enumerate all (l, e, pair, h_s, d) tuples; layer-wise spaces
// enumerate per-layer tuples at full supernet depth, matching the
// closed-form count.
inline std::vector<SubnetworkConfig> enumerate_coarse(const SearchSpace& sp,
                                                      const SupernetConfig& su) {
    if (sp.fine_grained())
        throw ParameterError("enumeration is defined for coarse spaces only");
    validate_space(sp, su);
    const auto pairs = attn_pairs(sp, su);
    std::vector<SubnetworkConfig> out;
    if (!sp.layer_wise()) {
        for (uint32_t l : sp.layer_choices)
            for (uint32_t e : sp.embed_choices)
                for (const auto& p : pairs)
                    for (uint32_t hs : sp.head_dim_choices)
                        for (uint32_t d : sp.mlp_choices)
                            out.push_back(
                                coarse_uniform_config(l, e, p.heads, hs, p.groups, d));
        return out;
    }
    struct LayerTuple {
        AttnPair p;
        uint32_t hs, d;
    };
    std::vector<LayerTuple> tuples;
    for (const auto& p : pairs)
        for (uint32_t hs : sp.head_dim_choices)
            for (uint32_t d : sp.mlp_choices) tuples.push_back({p, hs, d});
    const uint32_t L = su.layer_count;
    std::vector<size_t> odo(L, 0);
    for (uint32_t e : sp.embed_choices) {
        std::fill(odo.begin(), odo.end(), 0);
        while (true) {
            SubnetworkConfig c;
            c.layer_count = L;
            c.embed_dim = e;
            for (uint32_t i = 0; i < L; ++i) {
                const auto& t = tuples[odo[i]];
                c.heads.push_back(t.p.heads);
                c.head_dims.push_back(t.hs);
                c.query_groups.push_back(t.p.groups);
                c.mlp_dims.push_back(t.d);
            }
            out.push_back(std::move(c));
            size_t i = 0;
            for (; i < L; ++i) {
                if (++odo[i] < tuples.size()) break;
                odo[i] = 0;
            }
            if (i == L) break;
        }
    }
    return out;
}

}  // namespace snf
