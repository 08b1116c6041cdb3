// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "snf/checkpoint.hpp"
#include "snf/config.hpp"
#include "snf/corpus.hpp"
#include "snf/tensor.hpp"

namespace snf {

// ----------------------------- forward trace -----------------------------

// Activation statistics accumulated during traced forwards; consumed by
// importance scoring. All accumulators are plain sums so several batches
// can be folded in before taking means.
struct ForwardTrace {
    std::vector<std::vector<double>> ffn_abs;  // per layer: sum |mlp pre-activation|
    std::vector<std::vector<double>> head_l2;  // per layer: sum per-position context norms
    std::vector<double> block_cos;             // per layer: sum cos(input, output)
    std::vector<double> emb_abs;               // per channel: sum |norm outputs|
    uint64_t positions = 0;                    // total positions folded in

    explicit ForwardTrace(const ModelDims& d) {
        ffn_abs.resize(d.layers.size());
        head_l2.resize(d.layers.size());
        for (size_t i = 0; i < d.layers.size(); ++i) {
            ffn_abs[i].assign(d.layers[i].mlp_dim, 0.0);
            head_l2[i].assign(d.layers[i].heads, 0.0);
        }
        block_cos.assign(d.layers.size(), 0.0);
        emb_abs.assign(d.embed_dim, 0.0);
    }
};

// ----------------------------- weight containers -----------------------------

struct LayerParams {
    Tensor ln1_g, ln1_b;
    Tensor wq, bq;  // [heads*head_dim, E]
    Tensor wk, bk;  // [groups*head_dim, E]
    Tensor wv, bv;
    Tensor wo, bo;  // [E, heads*head_dim]
    Tensor ln2_g, ln2_b;
    Tensor w1, b1;  // [mlp, E]
    Tensor w2, b2;  // [E, mlp]
};

// A view is the weight set a forward pass consumes: either the dense
// parameters themselves or graph-recorded slices of a supernet. Running
// the same forward code over both is what makes masked evaluation and
// extracted models agree exactly.
struct ModelView {
    ModelDims dims;
    Tensor wte, wpe, lnf_g, lnf_b, lm_w;
    std::vector<LayerParams> layers;
};

Tensor forward_core(const ModelView& v, const Batch& b, ForwardTrace* trace);

class GptModel {
public:
    GptModel() = default;

    static GptModel zeros(const ModelDims& dims) {
        GptModel m;
        m.dims_ = dims;
        auto P = [](Shape s) { return Tensor::zeros(std::move(s), true); };
        const size_t e = dims.embed_dim;
        m.wte_ = P({dims.vocab_size, e});
        m.wpe_ = P({dims.max_seq_len, e});
        for (const auto& ld : dims.layers) {
            LayerParams l;
            const size_t hd = static_cast<size_t>(ld.heads) * ld.head_dim;
            const size_t kd = static_cast<size_t>(ld.query_groups) * ld.head_dim;
            l.ln1_g = P({e});
            l.ln1_b = P({e});
            l.wq = P({hd, e});
            l.bq = P({hd});
            l.wk = P({kd, e});
            l.bk = P({kd});
            l.wv = P({kd, e});
            l.bv = P({kd});
            l.wo = P({e, hd});
            l.bo = P({e});
            l.ln2_g = P({e});
            l.ln2_b = P({e});
            l.w1 = P({ld.mlp_dim, e});
            l.b1 = P({ld.mlp_dim});
            l.w2 = P({e, ld.mlp_dim});
            l.b2 = P({e});
            m.layers_.push_back(std::move(l));
        }
        m.lnf_g_ = P({e});
        m.lnf_b_ = P({e});
        m.lm_w_ = P({dims.vocab_size, e});
        return m;
    }

    // GPT-2 style initialization: gaussian weights with std 0.02, residual
    // output projections scaled down by sqrt(2 * layer_count), unit norm
    // gains, zero biases. Draw order follows named_parameters().
    static GptModel random_init(const ModelDims& dims, uint64_t seed) {
        GptModel m = zeros(dims);
        Rng rng(seed);
        const double base = 0.02;
        const double resid = base / std::sqrt(2.0 * static_cast<double>(dims.layers.size()));
        auto fill = [&rng](Tensor& t, double std_dev) {
            for (auto& v : t.val()) v = static_cast<float>(rng.normal() * std_dev);
        };
        auto ones = [](Tensor& t) { std::fill(t.val().begin(), t.val().end(), 1.0f); };
        fill(m.wte_, base);
        fill(m.wpe_, base);
        for (auto& l : m.layers_) {
            ones(l.ln1_g);
            fill(l.wq, base);
            fill(l.wk, base);
            fill(l.wv, base);
            fill(l.wo, resid);
            ones(l.ln2_g);
            fill(l.w1, base);
            fill(l.w2, resid);
        }
        ones(m.lnf_g_);
        fill(m.lm_w_, base);
        return m;
    }

    const ModelDims& dims() const { return dims_; }

    ModelView view() const {
        ModelView v;
        v.dims = dims_;
        v.wte = wte_;
        v.wpe = wpe_;
        v.lnf_g = lnf_g_;
        v.lnf_b = lnf_b_;
        v.lm_w = lm_w_;
        v.layers = layers_;
        return v;
    }

    Tensor forward(const Batch& b, ForwardTrace* trace = nullptr) const {
        return forward_core(view(), b, trace);
    }

    std::vector<std::pair<std::string, Tensor>> named_parameters() const {
        std::vector<std::pair<std::string, Tensor>> out;
        out.emplace_back("wte", wte_);
        out.emplace_back("wpe", wpe_);
        for (size_t i = 0; i < layers_.size(); ++i) {
            const auto& l = layers_[i];
            const std::string p = "layers/" + std::to_string(i) + "/";
            out.emplace_back(p + "ln1_g", l.ln1_g);
            out.emplace_back(p + "ln1_b", l.ln1_b);
            out.emplace_back(p + "wq", l.wq);
            out.emplace_back(p + "bq", l.bq);
            out.emplace_back(p + "wk", l.wk);
            out.emplace_back(p + "bk", l.bk);
            out.emplace_back(p + "wv", l.wv);
            out.emplace_back(p + "bv", l.bv);
            out.emplace_back(p + "wo", l.wo);
            out.emplace_back(p + "bo", l.bo);
            out.emplace_back(p + "ln2_g", l.ln2_g);
            out.emplace_back(p + "ln2_b", l.ln2_b);
            out.emplace_back(p + "w1", l.w1);
            out.emplace_back(p + "b1", l.b1);
            out.emplace_back(p + "w2", l.w2);
            out.emplace_back(p + "b2", l.b2);
        }
        out.emplace_back("lnf_g", lnf_g_);
        out.emplace_back("lnf_b", lnf_b_);
        out.emplace_back("lm_w", lm_w_);
        return out;
    }

    std::vector<Tensor> parameters() const {
        std::vector<Tensor> out;
        for (auto& [name, t] : named_parameters()) out.push_back(t);
        return out;
    }

    uint64_t param_count() const {
        uint64_t n = 0;
        for (const auto& t : parameters()) n += t.size();
        return n;
    }

    void zero_grads() const {
        for (auto t : parameters()) t.zero_grad();
    }

    LayerParams& layer(size_t i) { return layers_.at(i); }
    const LayerParams& layer(size_t i) const { return layers_.at(i); }
    Tensor& wte() { return wte_; }
    Tensor& wpe() { return wpe_; }
    Tensor& lnf_g() { return lnf_g_; }
    Tensor& lnf_b() { return lnf_b_; }
    Tensor& lm_w() { return lm_w_; }
    const Tensor& wte() const { return wte_; }
    const Tensor& wpe() const { return wpe_; }
    const Tensor& lnf_g() const { return lnf_g_; }
    const Tensor& lnf_b() const { return lnf_b_; }
    const Tensor& lm_w() const { return lm_w_; }

private:
    ModelDims dims_;
    Tensor wte_, wpe_, lnf_g_, lnf_b_, lm_w_;
    std::vector<LayerParams> layers_;
};

// ----------------------------- checkpoint io -----------------------------

inline void save_model(const std::string& path, const GptModel& m) {
    Archive a;
    a.config_text = to_json(m.dims()).dump();
    for (const auto& [name, t] : m.named_parameters()) {
        NamedTensor nt;
        nt.name = name;
        for (size_t d : t.shape()) nt.dims.push_back(d);
        nt.data = t.val();
        a.tensors.push_back(std::move(nt));
    }
    save_archive(path, a);
}

inline GptModel model_from_archive(const Archive& a) {
    ModelDims dims = model_dims_from_json(Json::parse(a.config_text));
    GptModel m = GptModel::zeros(dims);
    auto named = m.named_parameters();
    if (named.size() != a.tensors.size())
        throw IoError("archive holds " + std::to_string(a.tensors.size()) + " tensors, model needs " +
                      std::to_string(named.size()));
    for (auto& [name, t] : named) {
        const NamedTensor* nt = a.find(name);
        if (!nt) throw IoError("archive is missing tensor " + name);
        if (nt->numel() != t.size())
            throw IoError("tensor " + name + " has wrong element count");
        std::copy(nt->data.begin(), nt->data.end(), t.val().begin());
    }
    return m;
}

inline GptModel load_model(const std::string& path) {
    return model_from_archive(load_archive(path));
}

// ----------------------------- forward pass -----------------------------

namespace detail {

template <class F>
TensorT<F> causal_mask(size_t t) {
    std::vector<F> v(t * t, F(0));
    const F neg_inf = -std::numeric_limits<F>::infinity();
    for (size_t i = 0; i < t; ++i)
        for (size_t j = i + 1; j < t; ++j) v[i * t + j] = neg_inf;
    return TensorT<F>::from({t, t}, std::move(v));
}

inline void trace_norm_output(ForwardTrace* tr, const Tensor& t) {
    if (!tr) return;
    size_t e = tr->emb_abs.size();
    const auto& v = t.val();
    for (size_t i = 0; i < v.size(); ++i)
        tr->emb_abs[i % e] += std::abs(static_cast<double>(v[i]));
}

}  // namespace detail

// Pre-norm decoder block stack over an arbitrary weight view. Heads and
// key/value groups may differ per layer; each head reads the key/value
// group its slot falls in, so grouped and multi-query attention are the
// same code path as standard attention.
inline Tensor forward_core(const ModelView& v, const Batch& b, ForwardTrace* trace = nullptr) {
    const size_t B = b.batch_size, T = b.seq_len, E = v.dims.embed_dim;
    if (T > v.dims.max_seq_len)
        throw DimensionError("sequence length " + std::to_string(T) +
                             " exceeds model maximum " + std::to_string(v.dims.max_seq_len));
    if (b.inputs.size() != B * T) throw DimensionError("batch id count mismatch");

    auto tok = embedding(v.wte, b.inputs);  // [B*T, E]
    std::vector<uint32_t> pos_ids(T);
    for (size_t i = 0; i < T; ++i) pos_ids[i] = static_cast<uint32_t>(i);
    auto pos = index_select(v.wpe, 0, pos_ids);  // [T, E]
    auto x = add(reshape(tok, {B, T, E}), pos);
    Tensor mask = detail::causal_mask<float>(T);

    for (size_t li = 0; li < v.layers.size(); ++li) {
        const auto& l = v.layers[li];
        const auto& ld = v.dims.layers[li];
        const size_t h = ld.heads, hd = ld.head_dim, q = ld.query_groups, m = ld.mlp_dim;

        std::vector<float> block_in;
        if (trace) block_in = x.val();

        auto x_ln = layer_norm(x, l.ln1_g, l.ln1_b);
        detail::trace_norm_output(trace, x_ln);
        auto x2 = reshape(x_ln, {B * T, E});
        auto qp = add(matmul_nt(x2, l.wq), l.bq);  // [B*T, h*hd]
        auto kp = add(matmul_nt(x2, l.wk), l.bk);  // [B*T, q*hd]
        auto vp = add(matmul_nt(x2, l.wv), l.bv);

        auto qh = reshape(transpose(reshape(qp, {B, T, h, hd}), {0, 2, 1, 3}), {B * h, T, hd});
        auto kh = transpose(reshape(kp, {B, T, q, hd}), {0, 2, 1, 3});  // [B,q,T,hd]
        auto vh = transpose(reshape(vp, {B, T, q, hd}), {0, 2, 1, 3});
        if (q != h) {
            std::vector<uint32_t> rep(h);
            for (size_t j = 0; j < h; ++j) rep[j] = static_cast<uint32_t>(j / (h / q));
            kh = index_select(kh, 1, rep);  // [B,h,T,hd]
            vh = index_select(vh, 1, rep);
        }
        auto k3 = reshape(kh, {B * h, T, hd});
        auto v3 = reshape(vh, {B * h, T, hd});

        auto scores = scale(bmm_nt(qh, k3), 1.0f / std::sqrt(static_cast<float>(hd)));
        auto attn = softmax(add(scores, mask));
        auto ctx = bmm(attn, v3);  // [B*h, T, hd]
        if (trace) {
            const auto& cv = ctx.val();
            for (size_t bh = 0; bh < B * h; ++bh) {
                size_t head = bh % h;
                for (size_t t = 0; t < T; ++t) {
                    double s2 = 0.0;
                    const float* p = cv.data() + (bh * T + t) * hd;
                    for (size_t i = 0; i < hd; ++i)
                        s2 += static_cast<double>(p[i]) * static_cast<double>(p[i]);
                    trace->head_l2[li][head] += std::sqrt(s2);
                }
            }
        }
        auto ctx2 =
            reshape(transpose(reshape(ctx, {B, h, T, hd}), {0, 2, 1, 3}), {B * T, h * hd});
        auto attn_out = add(matmul_nt(ctx2, l.wo), l.bo);
        x = add(x, reshape(attn_out, {B, T, E}));

        auto x_ln2 = layer_norm(x, l.ln2_g, l.ln2_b);
        detail::trace_norm_output(trace, x_ln2);
        auto mm = matmul_nt(reshape(x_ln2, {B * T, E}), l.w1);  // [B*T, m]
        if (trace) {
            const auto& pv = mm.val();
            for (size_t i = 0; i < pv.size(); ++i)
                trace->ffn_abs[li][i % m] += std::abs(static_cast<double>(pv[i]));
        }
        auto pre = add(mm, l.b1);
        auto mlp_out = add(matmul_nt(gelu(pre), l.w2), l.b2);
        x = add(x, reshape(mlp_out, {B, T, E}));

        if (trace) {
            const auto& xo = x.val();
            for (size_t p = 0; p < B * T; ++p) {
                double dot = 0.0, na = 0.0, nb = 0.0;
                for (size_t i = 0; i < E; ++i) {
                    double a = block_in[p * E + i], c = xo[p * E + i];
                    dot += a * c;
                    na += a * a;
                    nb += c * c;
                }
                double cos;
                if (na == 0.0 && nb == 0.0)
                    cos = 1.0;
                else if (na == 0.0 || nb == 0.0)
                    cos = 0.0;
                else
                    cos = dot / (std::sqrt(na) * std::sqrt(nb));
                trace->block_cos[li] += cos;
            }
        }
    }

    auto x_f = layer_norm(x, v.lnf_g, v.lnf_b);
    detail::trace_norm_output(trace, x_f);
    auto logits = matmul_nt(reshape(x_f, {B * T, E}), v.lm_w);
    if (trace) trace->positions += B * T;
    return reshape(logits, {B, T, v.dims.vocab_size});
}

// ----------------------------- activation plan -----------------------------

// Resolved index lists for one activated sub-network. Coarse configs mean
// "the first n" of everything; fine-grained configs carry explicit lists.
struct ActivePlan {
    std::vector<uint32_t> embed_idx;
    struct Layer {
        uint32_t phys = 0;
        LayerDims dims;
        std::vector<uint32_t> head_idx;   // global head ids, group-major
        std::vector<uint32_t> group_idx;  // kv group ids
        std::vector<uint32_t> hd_idx;     // head-dim channels (shared q/k/v)
        std::vector<uint32_t> mlp_idx;
    };
    std::vector<Layer> layers;
};

namespace detail {

inline std::vector<uint32_t> iota_u32(uint32_t n) {
    std::vector<uint32_t> v(n);
    for (uint32_t i = 0; i < n; ++i) v[i] = i;
    return v;
}

inline bool is_identity(const std::vector<uint32_t>& idx, size_t dim) {
    if (idx.size() != dim) return false;
    for (size_t i = 0; i < dim; ++i)
        if (idx[i] != i) return false;
    return true;
}

}  // namespace detail

inline ActivePlan resolve_plan(const SupernetConfig& s, const SubnetworkConfig& c) {
    validate_subnetwork(s, c);
    ActivePlan p;
    const bool fine = c.has_index_sets();
    p.embed_idx = fine ? c.embed_indices : detail::iota_u32(c.embed_dim);
    const uint32_t hpg = s.heads_per_group();
    for (uint32_t i = 0; i < c.layer_count; ++i) {
        ActivePlan::Layer L;
        L.phys = fine ? c.layer_indices[i] : i;
        L.dims = LayerDims{c.heads[i], c.head_dims[i], c.query_groups[i], c.mlp_dims[i]};
        if (fine) {
            L.head_idx = c.head_indices[i];
            L.group_idx = c.group_indices[i];
            L.hd_idx = c.head_dim_indices[i];
            L.mlp_idx = c.mlp_indices[i];
        } else {
            // First q groups, first heads-per-group heads inside each.
            uint32_t per_group = c.heads[i] / c.query_groups[i];
            for (uint32_t g = 0; g < c.query_groups[i]; ++g) {
                L.group_idx.push_back(g);
                for (uint32_t t = 0; t < per_group; ++t) L.head_idx.push_back(g * hpg + t);
            }
            L.hd_idx = detail::iota_u32(c.head_dims[i]);
            L.mlp_idx = detail::iota_u32(c.mlp_dims[i]);
        }
        p.layers.push_back(std::move(L));
    }
    return p;
}

// ----------------------------- supernet -----------------------------

class Supernet {
public:
    Supernet(SupernetConfig cfg, GptModel net) : cfg_(cfg), net_(std::move(net)) {
        validate_supernet(cfg_);
        if (!(net_.dims() == dims_of(cfg_)))
            throw ValidationError("network dims do not match supernet config");
    }

    static Supernet random_init(const SupernetConfig& cfg, uint64_t seed) {
        return Supernet(cfg, GptModel::random_init(dims_of(cfg), seed));
    }

    const SupernetConfig& config() const { return cfg_; }
    GptModel& network() { return net_; }
    const GptModel& network() const { return net_; }

    // Activation handle: subsequent masked forwards see only the selected
    // units. Exclusive access is required around activation changes.
    void set_sub_network(const SubnetworkConfig& c) {
        plan_ = resolve_plan(cfg_, c);
        active_ = c;
    }

    void clear_sub_network() {
        active_.reset();
        plan_.reset();
    }

    const std::optional<SubnetworkConfig>& active() const { return active_; }

    // Weight view of the active sub-network. Slices are autodiff gathers,
    // so gradients of a masked forward flow back into the full supernet
    // parameters (scatter-add over the selected units).
    ModelView masked_view() const {
        if (!plan_) return net_.view();
        return sliced_view(*plan_);
    }

    Tensor forward(const Batch& b, ForwardTrace* trace = nullptr) const {
        return forward_core(masked_view(), b, trace);
    }

    // Materializes the active slices as an independent dense model. The
    // forward code is shared with masked evaluation, so both agree.
    GptModel extract(const SubnetworkConfig& c) const {
        NoGradGuard ng;
        ActivePlan plan = resolve_plan(cfg_, c);
        ModelView sv = sliced_view(plan);
        GptModel out = GptModel::zeros(sv.dims);
        auto copy_into = [](Tensor dst, const Tensor& src) {
            if (dst.size() != src.size())
                throw DimensionError("extraction slice size mismatch");
            std::copy(src.val().begin(), src.val().end(), dst.val().begin());
        };
        copy_into(out.wte(), sv.wte);
        copy_into(out.wpe(), sv.wpe);
        copy_into(out.lnf_g(), sv.lnf_g);
        copy_into(out.lnf_b(), sv.lnf_b);
        copy_into(out.lm_w(), sv.lm_w);
        for (size_t i = 0; i < sv.layers.size(); ++i) {
            auto& d = out.layer(i);
            const auto& s = sv.layers[i];
            copy_into(d.ln1_g, s.ln1_g);
            copy_into(d.ln1_b, s.ln1_b);
            copy_into(d.wq, s.wq);
            copy_into(d.bq, s.bq);
            copy_into(d.wk, s.wk);
            copy_into(d.bk, s.bk);
            copy_into(d.wv, s.wv);
            copy_into(d.bv, s.bv);
            copy_into(d.wo, s.wo);
            copy_into(d.bo, s.bo);
            copy_into(d.ln2_g, s.ln2_g);
            copy_into(d.ln2_b, s.ln2_b);
            copy_into(d.w1, s.w1);
            copy_into(d.b1, s.b1);
            copy_into(d.w2, s.w2);
            copy_into(d.b2, s.b2);
        }
        return out;
    }

private:
    // Gather helpers skip work when a selection is the full range, so a
    // full-dims activation is byte-identical to the plain dense forward.
    static Tensor rows(const Tensor& t, const std::vector<uint32_t>& idx) {
        if (detail::is_identity(idx, t.shape()[0])) return t;
        return index_select(t, 0, idx);
    }
    static Tensor cols(const Tensor& t, const std::vector<uint32_t>& idx) {
        if (detail::is_identity(idx, t.shape()[1])) return t;
        return index_select(t, 1, idx);
    }

    ModelView sliced_view(const ActivePlan& p) const {
        const auto& e_idx = p.embed_idx;
        ModelView v;
        v.dims.vocab_size = cfg_.vocab_size;
        v.dims.max_seq_len = cfg_.max_seq_len;
        v.dims.embed_dim = static_cast<uint32_t>(e_idx.size());
        v.wte = cols(net_.wte(), e_idx);
        v.wpe = cols(net_.wpe(), e_idx);
        v.lnf_g = rows(net_.lnf_g(), e_idx);
        v.lnf_b = rows(net_.lnf_b(), e_idx);
        v.lm_w = cols(net_.lm_w(), e_idx);
        for (const auto& L : p.layers) {
            v.dims.layers.push_back(L.dims);
            const auto& src = net_.layer(L.phys);
            // Row blocks inside fused q/k/v projections: head (or group)
            // id picks the block, head-dim channels pick rows inside it.
            std::vector<uint32_t> q_rows, kv_rows;
            for (uint32_t head : L.head_idx)
                for (uint32_t ch : L.hd_idx) q_rows.push_back(head * cfg_.head_dim + ch);
            for (uint32_t g : L.group_idx)
                for (uint32_t ch : L.hd_idx) kv_rows.push_back(g * cfg_.head_dim + ch);
            LayerParams l;
            l.ln1_g = rows(src.ln1_g, e_idx);
            l.ln1_b = rows(src.ln1_b, e_idx);
            l.wq = cols(rows(src.wq, q_rows), e_idx);
            l.bq = rows(src.bq, q_rows);
            l.wk = cols(rows(src.wk, kv_rows), e_idx);
            l.bk = rows(src.bk, kv_rows);
            l.wv = cols(rows(src.wv, kv_rows), e_idx);
            l.bv = rows(src.bv, kv_rows);
            l.wo = cols(rows(src.wo, e_idx), q_rows);
            l.bo = rows(src.bo, e_idx);
            l.ln2_g = rows(src.ln2_g, e_idx);
            l.ln2_b = rows(src.ln2_b, e_idx);
            l.w1 = cols(rows(src.w1, L.mlp_idx), e_idx);
            l.b1 = rows(src.b1, L.mlp_idx);
            l.w2 = cols(rows(src.w2, e_idx), L.mlp_idx);
            l.b2 = rows(src.b2, e_idx);
            v.layers.push_back(std::move(l));
        }
        return v;
    }

    SupernetConfig cfg_;
    GptModel net_;
    std::optional<SubnetworkConfig> active_;
    std::optional<ActivePlan> plan_;
};

// ----------------------------- perplexity -----------------------------

inline double evaluate_perplexity(const GptModel& m, const std::vector<Batch>& batches) {
    if (batches.empty()) throw ParameterError("evaluate_perplexity: no batches");
    NoGradGuard ng;
    double loss_sum = 0.0;
    uint64_t tokens = 0;
    for (const auto& b : batches) {
        auto logits = m.forward(b);
        auto ce = cross_entropy(logits, b.targets);
        loss_sum += static_cast<double>(ce.item()) * static_cast<double>(b.targets.size());
        tokens += b.targets.size();
    }
    return std::exp(loss_sum / static_cast<double>(tokens));
}

inline double evaluate_perplexity(const GptModel& m, const TokenizedCorpus& c,
                                  const EvalPlan& plan) {
    return evaluate_perplexity(m, make_eval_batches(c, plan));
}

}  // namespace snf
