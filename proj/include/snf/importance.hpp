// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "snf/checkpoint.hpp"
#include "snf/evolution.hpp"
#include "snf/model.hpp"

namespace snf {

enum class ImportanceSource { Activation, WeightMagnitude };

// Per-unit saliency tables for one supernet: one value per FFN neuron,
// embedding channel, attention head, and block. Scores are kept in double
// precision; persistence narrows to f32.
struct ImportanceTables {
    SupernetConfig super;
    ImportanceSource source = ImportanceSource::Activation;
    std::vector<std::vector<double>> ffn;    // [layer][mlp neuron]
    std::vector<double> emb;                 // [embed channel]
    std::vector<std::vector<double>> heads;  // [layer][head]
    std::vector<double> blocks;              // [layer]
};

// Activation-based saliency accumulated over full-network forward passes
// on training batches: mean |pre-activation| per FFN neuron, mean |normed
// activation| per embedding channel across every norm output, mean L2 of
// each head's attention context, and 1 - mean cosine between block input
// and output.
inline ImportanceTables compute_importance(const Supernet& net, const TokenizedCorpus& corpus,
                                           uint32_t batches, uint32_t batch_size,
                                           uint32_t seq_len, uint64_t seed) {
    if (batches == 0) throw ParameterError("importance requires at least one batch");
    const SupernetConfig& su = net.config();
    const ModelDims dims = dims_of(su);
    NoGradGuard ng;
    ForwardTrace trace(dims);
    Rng rng(seed);
    for (uint32_t i = 0; i < batches; ++i) {
        Batch b = sample_batch(corpus, Split::Train, batch_size, seq_len, rng);
        net.network().forward(b, &trace);
    }
    const double pos = static_cast<double>(trace.positions);
    const size_t L = dims.layers.size();

    ImportanceTables t;
    t.super = su;
    t.source = ImportanceSource::Activation;
    t.ffn.resize(L);
    t.heads.resize(L);
    t.blocks.resize(L);
    for (size_t l = 0; l < L; ++l) {
        t.ffn[l].resize(trace.ffn_abs[l].size());
        for (size_t i = 0; i < t.ffn[l].size(); ++i) t.ffn[l][i] = trace.ffn_abs[l][i] / pos;
        t.heads[l].resize(trace.head_l2[l].size());
        for (size_t h = 0; h < t.heads[l].size(); ++h)
            t.heads[l][h] = trace.head_l2[l][h] / pos;
        t.blocks[l] = 1.0 - trace.block_cos[l] / pos;
    }
    const double norm_outputs = pos * static_cast<double>(2 * L + 1);
    t.emb.resize(trace.emb_abs.size());
    for (size_t c = 0; c < t.emb.size(); ++c) t.emb[c] = trace.emb_abs[c] / norm_outputs;
    return t;
}

namespace detail {

inline void accum_abs(const Tensor& t, double& sum, uint64_t& count) {
    for (float v : t.val()) sum += std::fabs(static_cast<double>(v));
    count += t.size();
}

}  // namespace detail

// Data-free saliency from parameter magnitudes. Each unit owns the weight
// slices that exist only because of it: an FFN neuron owns its first-layer
// row and second-layer column; a head owns its query rows, its group's
// key/value rows, and its output-projection columns; an embedding channel
// owns its token and position columns plus every norm gain entry at that
// channel; a block owns all of its tensors.
inline ImportanceTables weight_magnitude_importance(const Supernet& net) {
    const SupernetConfig& su = net.config();
    const GptModel& m = net.network();
    const size_t L = su.layer_count;
    const size_t E = su.embed_dim;
    const size_t H = su.head_count;
    const size_t hd = su.head_dim;
    const size_t D = su.mlp_dim;
    const size_t hpg = su.heads_per_group();

    ImportanceTables t;
    t.super = su;
    t.source = ImportanceSource::WeightMagnitude;
    t.ffn.assign(L, std::vector<double>(D, 0.0));
    t.heads.assign(L, std::vector<double>(H, 0.0));
    t.blocks.assign(L, 0.0);
    t.emb.assign(E, 0.0);

    for (size_t l = 0; l < L; ++l) {
        const LayerParams& lp = m.layer(l);
        const auto& w1 = lp.w1.val();  // [D, E]
        const auto& w2 = lp.w2.val();  // [E, D]
        for (size_t i = 0; i < D; ++i) {
            double s = 0.0;
            for (size_t c = 0; c < E; ++c) s += std::fabs(static_cast<double>(w1[i * E + c]));
            for (size_t c = 0; c < E; ++c) s += std::fabs(static_cast<double>(w2[c * D + i]));
            t.ffn[l][i] = s / static_cast<double>(2 * E);
        }
        const auto& wq = lp.wq.val();  // [H*hd, E]
        const auto& wk = lp.wk.val();  // [Q*hd, E]
        const auto& wv = lp.wv.val();  // [Q*hd, E]
        const auto& wo = lp.wo.val();  // [E, H*hd]
        for (size_t h = 0; h < H; ++h) {
            const size_t g = h / hpg;
            double s = 0.0;
            for (size_t r = h * hd; r < (h + 1) * hd; ++r)
                for (size_t c = 0; c < E; ++c) s += std::fabs(static_cast<double>(wq[r * E + c]));
            for (size_t r = g * hd; r < (g + 1) * hd; ++r)
                for (size_t c = 0; c < E; ++c)
                    s += std::fabs(static_cast<double>(wk[r * E + c])) +
                         std::fabs(static_cast<double>(wv[r * E + c]));
            for (size_t r = 0; r < E; ++r)
                for (size_t c = h * hd; c < (h + 1) * hd; ++c)
                    s += std::fabs(static_cast<double>(wo[r * (H * hd) + c]));
            t.heads[l][h] = s / static_cast<double>(4 * hd * E);
        }
        double bs = 0.0;
        uint64_t bc = 0;
        for (const Tensor* p :
             {&lp.ln1_g, &lp.ln1_b, &lp.wq, &lp.bq, &lp.wk, &lp.bk, &lp.wv, &lp.bv, &lp.wo,
              &lp.bo, &lp.ln2_g, &lp.ln2_b, &lp.w1, &lp.b1, &lp.w2, &lp.b2})
            detail::accum_abs(*p, bs, bc);
        t.blocks[l] = bs / static_cast<double>(bc);
    }

    const auto& wte = m.wte().val();  // [V, E]
    const auto& wpe = m.wpe().val();  // [S, E]
    const size_t V = su.vocab_size;
    const size_t S = su.max_seq_len;
    for (size_t c = 0; c < E; ++c) {
        double s = 0.0;
        for (size_t r = 0; r < V; ++r) s += std::fabs(static_cast<double>(wte[r * E + c]));
        for (size_t r = 0; r < S; ++r) s += std::fabs(static_cast<double>(wpe[r * E + c]));
        for (size_t l = 0; l < L; ++l) {
            s += std::fabs(static_cast<double>(m.layer(l).ln1_g.val()[c]));
            s += std::fabs(static_cast<double>(m.layer(l).ln2_g.val()[c]));
        }
        s += std::fabs(static_cast<double>(m.lnf_g().val()[c]));
        t.emb[c] = s / static_cast<double>(V + S + 2 * L + 1);
    }
    return t;
}

// Sums softmax-normalized unit scores over the selected units. Every unit
// group (embedding channels, blocks, and per-layer FFN neurons and heads)
// is normalized independently, so a full configuration scores exactly the
// number of groups and any added unit strictly increases the score.
inline double score_subnetwork(const ImportanceTables& t, const SubnetworkConfig& cfg) {
    validate_subnetwork(t.super, cfg);
    ActivePlan plan = resolve_plan(t.super, cfg);

    auto group_sum = [](const std::vector<double>& vals, const std::vector<uint32_t>& sel) {
        double mx = vals[0];
        for (double v : vals) mx = std::max(mx, v);
        double z = 0.0;
        for (double v : vals) z += std::exp(v - mx);
        double s = 0.0;
        for (uint32_t i : sel) s += std::exp(vals[i] - mx) / z;
        return s;
    };

    double score = group_sum(t.emb, plan.embed_idx);
    std::vector<uint32_t> active_layers;
    for (const auto& al : plan.layers) active_layers.push_back(al.phys);
    score += group_sum(t.blocks, active_layers);
    for (const auto& al : plan.layers) {
        score += group_sum(t.ffn[al.phys], al.mlp_idx);
        score += group_sum(t.heads[al.phys], al.head_idx);
    }
    return score;
}

// Fitness wrapper: evolutionary search minimizes, so higher importance
// maps to lower fitness. The closure owns a copy of the tables, so a
// temporary argument is fine.
inline FitnessFn make_importance_fitness(ImportanceTables t) {
    return [t = std::move(t)](const SubnetworkConfig& cfg) {
        return -score_subnetwork(t, cfg);
    };
}

// ----------------------------- persistence -----------------------------

inline const char* to_string(ImportanceSource s) {
    return s == ImportanceSource::Activation ? "activation" : "weight_magnitude";
}

inline ImportanceSource importance_source_from_string(const std::string& s) {
    if (s == "activation") return ImportanceSource::Activation;
    if (s == "weight_magnitude") return ImportanceSource::WeightMagnitude;
    throw ValidationError("unknown importance source: " + s);
}

inline void save_importance(const std::string& path, const ImportanceTables& t) {
    Archive a;
    a.config_text =
        Json{{"supernet", to_json(t.super)}, {"source", to_string(t.source)}}.dump(2);
    auto put = [&a](const std::string& name, const std::vector<double>& vals) {
        NamedTensor nt;
        nt.name = name;
        nt.dims = {vals.size()};
        nt.data.reserve(vals.size());
        for (double v : vals) nt.data.push_back(static_cast<float>(v));
        a.tensors.push_back(std::move(nt));
    };
    for (size_t l = 0; l < t.ffn.size(); ++l) put("imp/ffn/" + std::to_string(l), t.ffn[l]);
    put("imp/emb", t.emb);
    for (size_t l = 0; l < t.heads.size(); ++l) put("imp/head/" + std::to_string(l), t.heads[l]);
    put("imp/block", t.blocks);
    save_archive(path, a);
}

inline ImportanceTables load_importance(const std::string& path) {
    Archive a = load_archive(path);
    ImportanceTables t;
    Json j;
    try {
        j = Json::parse(a.config_text);
        t.super = supernet_from_json(j.at("supernet"));
        t.source = importance_source_from_string(j.at("source").get<std::string>());
    } catch (const Json::exception& ex) {
        throw ValidationError(std::string("bad importance archive config: ") + ex.what());
    }
    auto get = [&a, &path](const std::string& name) {
        const NamedTensor* nt = a.find(name);
        if (!nt) throw ValidationError("importance archive " + path + " missing " + name);
        std::vector<double> vals(nt->data.begin(), nt->data.end());
        return vals;
    };
    const size_t L = t.super.layer_count;
    t.ffn.resize(L);
    t.heads.resize(L);
    for (size_t l = 0; l < L; ++l) {
        t.ffn[l] = get("imp/ffn/" + std::to_string(l));
        t.heads[l] = get("imp/head/" + std::to_string(l));
        if (t.ffn[l].size() != t.super.mlp_dim || t.heads[l].size() != t.super.head_count)
            throw ValidationError("importance table size mismatch in " + path);
    }
    t.emb = get("imp/emb");
    t.blocks = get("imp/block");
    if (t.emb.size() != t.super.embed_dim || t.blocks.size() != L)
        throw ValidationError("importance table size mismatch in " + path);
    return t;
}

}  // namespace snf
