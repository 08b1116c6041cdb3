// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <optional>

#include "snf/checkpoint.hpp"
#include "snf/model.hpp"

namespace snf {

// ----------------------------- distillation losses -----------------------------

// Forward KL divergence KL(teacher || student) between temperature-scaled
// softmax distributions, averaged over rows. The last axis is the class
// axis; leading axes are flattened. Gradients flow to both inputs.
template <class F>
TensorT<F> forward_kl(const TensorT<F>& teacher, const TensorT<F>& student,
                      double temperature = 1.0) {
    if (teacher.shape() != student.shape())
        throw DimensionError("forward_kl: teacher shape " + shape_str(teacher.shape()) +
                             " vs student shape " + shape_str(student.shape()));
    if (teacher.rank() < 2) throw DimensionError("forward_kl: logits rank must be >= 2");
    if (!(temperature > 0.0)) throw ParameterError("forward_kl: temperature must be > 0");
    const size_t c = teacher.shape().back();
    const size_t rows = teacher.size() / c;

    auto row_kl = [c, temperature](const F* zt, const F* zs) {
        double mt = static_cast<double>(zt[0]) / temperature;
        double ms = static_cast<double>(zs[0]) / temperature;
        for (size_t i = 1; i < c; ++i) {
            mt = std::max(mt, static_cast<double>(zt[i]) / temperature);
            ms = std::max(ms, static_cast<double>(zs[i]) / temperature);
        }
        double st = 0.0, ss = 0.0;
        for (size_t i = 0; i < c; ++i) {
            st += std::exp(static_cast<double>(zt[i]) / temperature - mt);
            ss += std::exp(static_cast<double>(zs[i]) / temperature - ms);
        }
        double lzt = std::log(st) + mt, lzs = std::log(ss) + ms;
        double kl = 0.0;
        for (size_t i = 0; i < c; ++i) {
            double lt = static_cast<double>(zt[i]) / temperature - lzt;
            double ls = static_cast<double>(zs[i]) / temperature - lzs;
            kl += std::exp(lt) * (lt - ls);
        }
        return kl;
    };

    double acc = 0.0;
    for (size_t r = 0; r < rows; ++r)
        acc += row_kl(teacher.val().data() + r * c, student.val().data() + r * c);

    auto tn = teacher.node();
    auto sn = student.node();
    const F t = static_cast<F>(temperature);
    return detail::make_op<F>(
        {1}, {static_cast<F>(acc / static_cast<double>(rows))}, {tn, sn},
        [tn, sn, t, rows, c](detail::Node<F>& out) {
            F g = out.grad[0] / static_cast<F>(rows);
            if (sn->rg) sn->ensure_grad();
            if (tn->rg) tn->ensure_grad();
            std::vector<F> pt(c), ps(c), lpt(c), lps(c);
            for (size_t r = 0; r < rows; ++r) {
                const F* zt = tn->val.data() + r * c;
                const F* zs = sn->val.data() + r * c;
                F mt = zt[0] / t, ms = zs[0] / t;
                for (size_t i = 1; i < c; ++i) {
                    mt = std::max(mt, zt[i] / t);
                    ms = std::max(ms, zs[i] / t);
                }
                F st = F(0), ss = F(0);
                for (size_t i = 0; i < c; ++i) {
                    st += std::exp(zt[i] / t - mt);
                    ss += std::exp(zs[i] / t - ms);
                }
                F lst = std::log(st), lss = std::log(ss);
                F kl = F(0);
                for (size_t i = 0; i < c; ++i) {
                    lpt[i] = zt[i] / t - mt - lst;
                    lps[i] = zs[i] / t - ms - lss;
                    pt[i] = std::exp(lpt[i]);
                    ps[i] = std::exp(lps[i]);
                    kl += pt[i] * (lpt[i] - lps[i]);
                }
                if (sn->rg) {
                    F* d = sn->grad.data() + r * c;
                    for (size_t i = 0; i < c; ++i) d[i] += g * (ps[i] - pt[i]) / t;
                }
                if (tn->rg) {
                    F* d = tn->grad.data() + r * c;
                    for (size_t i = 0; i < c; ++i)
                        d[i] += g * (pt[i] / t) * ((lpt[i] - lps[i]) - kl);
                }
            }
        });
}

// Forward KL restricted per row to the k highest logits of one side
// (teacher by default). Both distributions are re-normalized over the
// selected classes; ties in the selection break toward the lower index.
// The selection is treated as constant under differentiation.
template <class F>
TensorT<F> topk_kl(const TensorT<F>& teacher, const TensorT<F>& student, double temperature,
                   uint32_t k, bool select_by_teacher = true) {
    if (teacher.shape() != student.shape())
        throw DimensionError("topk_kl: teacher shape " + shape_str(teacher.shape()) +
                             " vs student shape " + shape_str(student.shape()));
    if (teacher.rank() < 2) throw DimensionError("topk_kl: logits rank must be >= 2");
    if (!(temperature > 0.0)) throw ParameterError("topk_kl: temperature must be > 0");
    if (k == 0) throw ParameterError("topk_kl: k must be >= 1");
    const size_t c = teacher.shape().back();
    const size_t rows = teacher.size() / c;
    const size_t kk = std::min<size_t>(k, c);

    std::vector<uint32_t> sel(rows * kk);
    {
        std::vector<uint32_t> idx(c);
        for (size_t r = 0; r < rows; ++r) {
            const F* src =
                (select_by_teacher ? teacher.val().data() : student.val().data()) + r * c;
            for (size_t i = 0; i < c; ++i) idx[i] = static_cast<uint32_t>(i);
            std::partial_sort(idx.begin(), idx.begin() + kk, idx.end(),
                              [src](uint32_t a, uint32_t b) {
                                  if (src[a] != src[b]) return src[a] > src[b];
                                  return a < b;
                              });
            std::copy(idx.begin(), idx.begin() + kk, sel.begin() + r * kk);
        }
    }

    double acc = 0.0;
    for (size_t r = 0; r < rows; ++r) {
        const F* zt = teacher.val().data() + r * c;
        const F* zs = student.val().data() + r * c;
        const uint32_t* s = sel.data() + r * kk;
        double mt = static_cast<double>(zt[s[0]]) / temperature;
        double ms = static_cast<double>(zs[s[0]]) / temperature;
        for (size_t i = 1; i < kk; ++i) {
            mt = std::max(mt, static_cast<double>(zt[s[i]]) / temperature);
            ms = std::max(ms, static_cast<double>(zs[s[i]]) / temperature);
        }
        double st = 0.0, ss = 0.0;
        for (size_t i = 0; i < kk; ++i) {
            st += std::exp(static_cast<double>(zt[s[i]]) / temperature - mt);
            ss += std::exp(static_cast<double>(zs[s[i]]) / temperature - ms);
        }
        double lst = std::log(st), lss = std::log(ss);
        for (size_t i = 0; i < kk; ++i) {
            double lt = static_cast<double>(zt[s[i]]) / temperature - mt - lst;
            double ls = static_cast<double>(zs[s[i]]) / temperature - ms - lss;
            acc += std::exp(lt) * (lt - ls);
        }
    }

    auto tn = teacher.node();
    auto sn = student.node();
    const F t = static_cast<F>(temperature);
    return detail::make_op<F>(
        {1}, {static_cast<F>(acc / static_cast<double>(rows))}, {tn, sn},
        [tn, sn, t, rows, c, kk, sel = std::move(sel)](detail::Node<F>& out) {
            F g = out.grad[0] / static_cast<F>(rows);
            if (sn->rg) sn->ensure_grad();
            if (tn->rg) tn->ensure_grad();
            std::vector<F> pt(kk), ps(kk), lpt(kk), lps(kk);
            for (size_t r = 0; r < rows; ++r) {
                const F* zt = tn->val.data() + r * c;
                const F* zs = sn->val.data() + r * c;
                const uint32_t* s = sel.data() + r * kk;
                F mt = zt[s[0]] / t, ms = zs[s[0]] / t;
                for (size_t i = 1; i < kk; ++i) {
                    mt = std::max(mt, zt[s[i]] / t);
                    ms = std::max(ms, zs[s[i]] / t);
                }
                F st = F(0), ss = F(0);
                for (size_t i = 0; i < kk; ++i) {
                    st += std::exp(zt[s[i]] / t - mt);
                    ss += std::exp(zs[s[i]] / t - ms);
                }
                F lst = std::log(st), lss = std::log(ss);
                F kl = F(0);
                for (size_t i = 0; i < kk; ++i) {
                    lpt[i] = zt[s[i]] / t - mt - lst;
                    lps[i] = zs[s[i]] / t - ms - lss;
                    pt[i] = std::exp(lpt[i]);
                    ps[i] = std::exp(lps[i]);
                    kl += pt[i] * (lpt[i] - lps[i]);
                }
                if (sn->rg) {
                    F* d = sn->grad.data() + r * c;
                    for (size_t i = 0; i < kk; ++i) d[s[i]] += g * (ps[i] - pt[i]) / t;
                }
                if (tn->rg) {
                    F* d = tn->grad.data() + r * c;
                    for (size_t i = 0; i < kk; ++i)
                        d[s[i]] += g * (pt[i] / t) * ((lpt[i] - lps[i]) - kl);
                }
            }
        });
}

// ----------------------------- distillation spec -----------------------------

enum class KlMode { TopK, Full };
enum class KlSource { Teacher, Student };

struct DistillSpec {
    double alpha = 0.2;        // hard-label cross-entropy weight
    double beta = 0.8;         // teacher KL weight
    double temperature = 0.9;
    uint32_t top_k = 1024;
    KlMode mode = KlMode::TopK;
    KlSource source = KlSource::Teacher;
};

inline void validate_distill_spec(const DistillSpec& d) {
    if (d.alpha < 0.0 || d.beta < 0.0)
        throw ParameterError("distillation weights must be non-negative");
    if (d.alpha == 0.0 && d.beta == 0.0)
        throw ParameterError("distillation weights must not both be zero");
    if (!(d.temperature > 0.0)) throw ParameterError("temperature must be > 0");
    if (d.top_k == 0) throw ParameterError("top_k must be >= 1");
}

inline Json to_json(const DistillSpec& d) {
    return Json{{"alpha", d.alpha},
                {"beta", d.beta},
                {"temperature", d.temperature},
                {"top_k", d.top_k},
                {"mode", d.mode == KlMode::TopK ? "top_k" : "full"},
                {"source", d.source == KlSource::Teacher ? "teacher" : "student"}};
}

inline DistillSpec distill_spec_from_json(const Json& j) {
    DistillSpec d;
    try {
        d.alpha = j.value("alpha", d.alpha);
        d.beta = j.value("beta", d.beta);
        d.temperature = j.value("temperature", d.temperature);
        d.top_k = j.value("top_k", d.top_k);
        std::string mode = j.value("mode", std::string("top_k"));
        std::string source = j.value("source", std::string("teacher"));
        if (mode == "top_k")
            d.mode = KlMode::TopK;
        else if (mode == "full")
            d.mode = KlMode::Full;
        else
            throw ValidationError("unknown kl mode: " + mode);
        if (source == "teacher")
            d.source = KlSource::Teacher;
        else if (source == "student")
            d.source = KlSource::Student;
        else
            throw ValidationError("unknown kl source: " + source);
    } catch (const Json::exception& ex) {
        throw ValidationError(std::string("bad distillation spec: ") + ex.what());
    }
    validate_distill_spec(d);
    return d;
}

struct LossParts {
    Tensor loss;
    double ce = 0.0;
    double kl = 0.0;
};

// alpha * CE(student, labels) + beta * KL(teacher || student). A zero
// weight skips its term entirely, so alpha=1, beta=0 reproduces the plain
// cross-entropy loss bit for bit.
inline LossParts distill_loss(const Tensor& teacher_logits, const Tensor& student_logits,
                              const std::vector<int32_t>& targets, const DistillSpec& ds) {
    validate_distill_spec(ds);
    LossParts out;
    Tensor ce = cross_entropy(student_logits, targets);
    out.ce = static_cast<double>(ce.item());
    if (ds.beta == 0.0) {
        out.loss = ds.alpha == 1.0 ? ce : scale(ce, static_cast<float>(ds.alpha));
        return out;
    }
    Tensor kl = ds.mode == KlMode::TopK
                     ? topk_kl(teacher_logits, student_logits, ds.temperature, ds.top_k,
                               ds.source == KlSource::Teacher)
                     : forward_kl(teacher_logits, student_logits, ds.temperature);
    out.kl = static_cast<double>(kl.item());
    Tensor kterm = scale(kl, static_cast<float>(ds.beta));
    out.loss = ds.alpha == 0.0 ? kterm : add(scale(ce, static_cast<float>(ds.alpha)), kterm);
    return out;
}

// ----------------------------- optimization -----------------------------

struct TrainSpec {
    uint64_t total_tokens = 1000000;
    uint32_t global_batch = 8;
    uint32_t micro_batch = 8;
    uint32_t seq_len = 64;
    double lr = 3e-4;
    double min_lr = 3e-5;
    uint32_t warmup_steps = 10;
    double weight_decay = 0.01;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double eps = 1e-8;
    double clip_norm = 1.0;
    uint64_t seed = 42;
    uint32_t eval_interval = 50;  // 0 = final evaluation only
    uint32_t save_interval = 0;   // 0 = final checkpoint only
    EvalPlan eval;
};

inline void validate_train_spec(const TrainSpec& t) {
    if (t.total_tokens == 0) throw ParameterError("total_tokens must be >= 1");
    if (t.global_batch == 0 || t.micro_batch == 0 || t.seq_len == 0)
        throw ParameterError("batch sizes and seq_len must be >= 1");
    if (t.global_batch % t.micro_batch != 0)
        throw ParameterError("micro_batch must divide global_batch");
    if (!(t.lr > 0.0)) throw ParameterError("lr must be > 0");
    if (t.min_lr < 0.0 || t.min_lr > t.lr) throw ParameterError("min_lr must lie in [0, lr]");
    if (!(t.beta1 >= 0.0 && t.beta1 < 1.0 && t.beta2 >= 0.0 && t.beta2 < 1.0))
        throw ParameterError("betas must lie in [0, 1)");
    if (!(t.eps > 0.0)) throw ParameterError("eps must be > 0");
    if (!(t.clip_norm > 0.0)) throw ParameterError("clip_norm must be > 0");
    if (t.weight_decay < 0.0) throw ParameterError("weight_decay must be >= 0");
}

inline Json to_json(const EvalPlan& p) {
    return Json{{"batches", p.batches},
                {"batch_size", p.batch_size},
                {"seq_len", p.seq_len},
                {"seed", p.seed}};
}

inline EvalPlan eval_plan_from_json(const Json& j) {
    EvalPlan p;
    p.batches = j.value("batches", p.batches);
    p.batch_size = j.value("batch_size", p.batch_size);
    p.seq_len = j.value("seq_len", p.seq_len);
    p.seed = j.value("seed", p.seed);
    return p;
}

inline Json to_json(const TrainSpec& t) {
    return Json{{"total_tokens", t.total_tokens},
                {"global_batch", t.global_batch},
                {"micro_batch", t.micro_batch},
                {"seq_len", t.seq_len},
                {"lr", t.lr},
                {"min_lr", t.min_lr},
                {"warmup_steps", t.warmup_steps},
                {"weight_decay", t.weight_decay},
                {"beta1", t.beta1},
                {"beta2", t.beta2},
                {"eps", t.eps},
                {"clip_norm", t.clip_norm},
                {"seed", t.seed},
                {"eval_interval", t.eval_interval},
                {"save_interval", t.save_interval},
                {"eval", to_json(t.eval)}};
}

inline TrainSpec train_spec_from_json(const Json& j) {
    TrainSpec t;
    try {
        t.total_tokens = j.value("total_tokens", t.total_tokens);
        t.global_batch = j.value("global_batch", t.global_batch);
        t.micro_batch = j.value("micro_batch", t.micro_batch);
        t.seq_len = j.value("seq_len", t.seq_len);
        t.lr = j.value("lr", t.lr);
        t.min_lr = j.value("min_lr", t.min_lr);
        t.warmup_steps = j.value("warmup_steps", t.warmup_steps);
        t.weight_decay = j.value("weight_decay", t.weight_decay);
        t.beta1 = j.value("beta1", t.beta1);
        t.beta2 = j.value("beta2", t.beta2);
        t.eps = j.value("eps", t.eps);
        t.clip_norm = j.value("clip_norm", t.clip_norm);
        t.seed = j.value("seed", t.seed);
        t.eval_interval = j.value("eval_interval", t.eval_interval);
        t.save_interval = j.value("save_interval", t.save_interval);
        if (j.contains("eval")) t.eval = eval_plan_from_json(j.at("eval"));
    } catch (const Json::exception& ex) {
        throw ValidationError(std::string("bad training spec: ") + ex.what());
    }
    validate_train_spec(t);
    return t;
}

inline uint64_t steps_for(const TrainSpec& t) {
    uint64_t tokens_per_step = static_cast<uint64_t>(t.global_batch) * t.seq_len;
    return (t.total_tokens + tokens_per_step - 1) / tokens_per_step;
}

// Linear warmup to the peak rate, then cosine decay toward min_lr over the
// remaining steps. `step` counts completed steps (0-based).
inline double lr_at(const TrainSpec& t, uint64_t step, uint64_t total_steps) {
    if (t.warmup_steps > 0 && step < t.warmup_steps)
        return t.lr * static_cast<double>(step + 1) / static_cast<double>(t.warmup_steps);
    if (total_steps <= t.warmup_steps) return t.lr;
    double progress = static_cast<double>(step - t.warmup_steps) /
                      static_cast<double>(total_steps - t.warmup_steps);
    constexpr double pi = 3.14159265358979323846;
    return t.min_lr + 0.5 * (t.lr - t.min_lr) * (1.0 + std::cos(pi * progress));
}

// Scales every gradient so the global L2 norm does not exceed max_norm.
// Returns the pre-clip norm.
inline double clip_grad_norm(const std::vector<Tensor>& params, double max_norm) {
    double sq = 0.0;
    for (const auto& p : params)
        for (float g : p.grad()) sq += static_cast<double>(g) * g;
    double norm = std::sqrt(sq);
    if (norm > max_norm && norm > 0.0) {
        float s = static_cast<float>(max_norm / norm);
        for (const auto& p : params)
            for (float& g : p.node()->grad) g *= s;
    }
    return norm;
}

// Decoupled-weight-decay Adam with bias correction. Decay applies only to
// rank >= 2 parameters (weight matrices), never to gains or biases.
class AdamW {
public:
    AdamW(std::vector<Tensor> params, double beta1, double beta2, double eps,
          double weight_decay)
        : params_(std::move(params)), b1_(beta1), b2_(beta2), eps_(eps), wd_(weight_decay) {
        for (const auto& p : params_) {
            m_.emplace_back(p.size(), 0.0f);
            v_.emplace_back(p.size(), 0.0f);
            decay_.push_back(p.rank() >= 2);
        }
    }

    explicit AdamW(std::vector<Tensor> params, const TrainSpec& ts)
        : AdamW(std::move(params), ts.beta1, ts.beta2, ts.eps, ts.weight_decay) {}

    uint64_t step_count() const { return t_; }

    void step(double lr) {
        ++t_;
        const double bc1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
        for (size_t i = 0; i < params_.size(); ++i) {
            auto node = params_[i].node();
            if (node->grad.empty()) continue;
            float* val = node->val.data();
            const float* g = node->grad.data();
            float* m = m_[i].data();
            float* v = v_[i].data();
            const bool decay = decay_[i];
            const size_t n = node->val.size();
            for (size_t j = 0; j < n; ++j) {
                double gj = static_cast<double>(g[j]);
                m[j] = static_cast<float>(b1_ * m[j] + (1.0 - b1_) * gj);
                v[j] = static_cast<float>(b2_ * v[j] + (1.0 - b2_) * gj * gj);
                double mhat = static_cast<double>(m[j]) / bc1;
                double vhat = static_cast<double>(v[j]) / bc2;
                double upd = mhat / (std::sqrt(vhat) + eps_);
                if (decay) upd += wd_ * static_cast<double>(val[j]);
                val[j] = static_cast<float>(val[j] - lr * upd);
            }
        }
    }

    Archive state() const {
        Archive a;
        a.config_text = Json{{"step", t_}}.dump();
        for (size_t i = 0; i < params_.size(); ++i) {
            NamedTensor mt, vt;
            mt.name = "opt/m/" + std::to_string(i);
            mt.dims = {m_[i].size()};
            mt.data = m_[i];
            vt.name = "opt/v/" + std::to_string(i);
            vt.dims = {v_[i].size()};
            vt.data = v_[i];
            a.tensors.push_back(std::move(mt));
            a.tensors.push_back(std::move(vt));
        }
        return a;
    }

    void load_state(const Archive& a) {
        uint64_t step = 0;
        try {
            step = Json::parse(a.config_text).at("step").get<uint64_t>();
        } catch (const Json::exception& ex) {
            throw ValidationError(std::string("bad optimizer state: ") + ex.what());
        }
        for (size_t i = 0; i < params_.size(); ++i) {
            const NamedTensor* mt = a.find("opt/m/" + std::to_string(i));
            const NamedTensor* vt = a.find("opt/v/" + std::to_string(i));
            if (!mt || !vt) throw ValidationError("optimizer state missing moments");
            if (mt->data.size() != m_[i].size() || vt->data.size() != v_[i].size())
                throw ValidationError("optimizer state size mismatch");
            m_[i] = mt->data;
            v_[i] = vt->data;
        }
        t_ = step;
    }

private:
    std::vector<Tensor> params_;
    std::vector<std::vector<float>> m_, v_;
    std::vector<bool> decay_;
    double b1_, b2_, eps_, wd_;
    uint64_t t_ = 0;
};

// ----------------------------- training loop -----------------------------

struct MetricRow {
    uint64_t step = 0;  // 1-based, after the step completed
    uint64_t tokens_seen = 0;
    double train_loss = 0.0;
    double ce = 0.0;
    double kl = 0.0;
    std::optional<double> val_ppl;
    double lr = 0.0;
};

inline const char* metric_csv_header() {
    return "step,tokens_seen,train_loss,ce_component,kl_component,val_ppl,lr";
}

inline std::string metric_csv_row(const MetricRow& r) {
    char buf[64];
    std::string s = std::to_string(r.step) + "," + std::to_string(r.tokens_seen);
    auto num = [&](double v) {
        std::snprintf(buf, sizeof buf, "%.10g", v);
        s += ',';
        s += buf;
    };
    num(r.train_loss);
    num(r.ce);
    num(r.kl);
    if (r.val_ppl) {
        num(*r.val_ppl);
    } else {
        s += ',';
    }
    num(r.lr);
    return s;
}

struct TrainState {
    uint64_t step = 0;  // completed optimizer steps
    uint64_t tokens_seen = 0;
    std::array<uint64_t, 4> rng_state{0, 0, 0, 0};
};

inline Json to_json(const TrainState& s) {
    return Json{{"step", s.step},
                {"tokens_seen", s.tokens_seen},
                {"rng", Json::array({s.rng_state[0], s.rng_state[1], s.rng_state[2],
                                     s.rng_state[3]})}};
}

inline TrainState train_state_from_json(const Json& j) {
    TrainState s;
    try {
        s.step = j.at("step").get<uint64_t>();
        s.tokens_seen = j.at("tokens_seen").get<uint64_t>();
        const Json& r = j.at("rng");
        if (!r.is_array() || r.size() != 4)
            throw ValidationError("training state rng must hold 4 words");
        for (size_t i = 0; i < 4; ++i) s.rng_state[i] = r[i].get<uint64_t>();
    } catch (const Json::exception& ex) {
        throw ValidationError(std::string("bad training state: ") + ex.what());
    }
    return s;
}

struct TrainHooks {
    std::function<void(const MetricRow&)> on_row;
    std::function<void(const TrainState&)> on_checkpoint;
};

// Runs (or resumes) the optimization loop: gradient accumulation over
// micro-batches, global-norm clipping, AdamW with the warmup/cosine
// schedule, periodic fixed-plan validation perplexity. With a teacher and
// distillation spec the objective is the combined loss, otherwise plain
// cross-entropy. A non-finite loss aborts before the optimizer step.
inline std::vector<MetricRow> train_model(GptModel& model, const GptModel* teacher,
                                          const TokenizedCorpus& corpus, const TrainSpec& ts,
                                          const DistillSpec* ds, AdamW& opt, TrainState& st,
                                          const TrainHooks& hooks = {}) {
    validate_train_spec(ts);
    if ((teacher == nullptr) != (ds == nullptr))
        throw ParameterError("distillation requires both a teacher and a distillation spec");
    if (ds) validate_distill_spec(*ds);
    const uint64_t total = steps_for(ts);
    const uint32_t accum = ts.global_batch / ts.micro_batch;
    Rng rng(ts.seed);
    if (st.step > 0) rng.set_state(st.rng_state);

    std::vector<MetricRow> rows;
    std::vector<Tensor> params = model.parameters();
    for (uint64_t s = st.step; s < total; ++s) {
        model.zero_grads();
        double loss_acc = 0.0, ce_acc = 0.0, kl_acc = 0.0;
        for (uint32_t mi = 0; mi < accum; ++mi) {
            Batch b = sample_batch(corpus, Split::Train, ts.micro_batch, ts.seq_len, rng);
            Tensor logits = model.forward(b);
            Tensor loss;
            double ce_part = 0.0, kl_part = 0.0;
            if (ds) {
                Tensor teacher_logits;
                {
                    NoGradGuard ng;
                    teacher_logits = teacher->forward(b);
                }
                LossParts parts = distill_loss(teacher_logits, logits, b.targets, *ds);
                loss = parts.loss;
                ce_part = parts.ce;
                kl_part = parts.kl;
            } else {
                loss = cross_entropy(logits, b.targets);
                ce_part = static_cast<double>(loss.item());
            }
            double lval = static_cast<double>(loss.item());
            if (!std::isfinite(lval))
                throw DivergenceError("non-finite loss at step " + std::to_string(s + 1));
            Tensor scaled = accum == 1 ? loss : scale(loss, 1.0f / static_cast<float>(accum));
            scaled.backward();
            loss_acc += lval / accum;
            ce_acc += ce_part / accum;
            kl_acc += kl_part / accum;
        }
        clip_grad_norm(params, ts.clip_norm);
        double lr_s = lr_at(ts, s, total);
        opt.step(lr_s);

        st.step = s + 1;
        st.tokens_seen += static_cast<uint64_t>(ts.global_batch) * ts.seq_len;
        st.rng_state = rng.state();

        MetricRow row;
        row.step = st.step;
        row.tokens_seen = st.tokens_seen;
        row.train_loss = loss_acc;
        row.ce = ce_acc;
        row.kl = kl_acc;
        row.lr = lr_s;
        if ((ts.eval_interval != 0 && st.step % ts.eval_interval == 0) || st.step == total)
            row.val_ppl = evaluate_perplexity(model, corpus, ts.eval);
        if (hooks.on_row) hooks.on_row(row);
        rows.push_back(row);
        if ((ts.save_interval != 0 && st.step % ts.save_interval == 0) || st.step == total)
            if (hooks.on_checkpoint) hooks.on_checkpoint(st);
    }
    return rows;
}

}  // namespace snf
