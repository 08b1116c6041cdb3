// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <atomic>
#include <limits>
#include <map>
#include <thread>

#include "snf/model.hpp"
#include "snf/search_space.hpp"

namespace snf {

// ----------------------------- domain types -----------------------------

struct ParamBin {
    uint64_t lower = 0;
    uint64_t upper = 0;
};

inline void validate_bin(const ParamBin& b) {
    if (b.lower == 0 || b.lower > b.upper)
        throw ValidationError("parameter bin requires 0 < lower <= upper");
}

struct Candidate {
    SubnetworkConfig cfg;
    uint64_t params = 0;
    double fitness = std::numeric_limits<double>::infinity();
    uint64_t id = 0;  // discovery order within the bin
};

struct EvoParams {
    uint32_t population = 16;
    uint32_t elites = 4;
    uint32_t epochs = 20;
    uint32_t offspring = 8;        // mutant slots; also crossover slots
    uint32_t random_samples = 4;
    double mutation_prob = 0.2;
    double crossover_prob = 0.2;
    uint64_t seed = 42;
    uint32_t max_attempts = 1000;
};

inline void validate_evo_params(const EvoParams& e) {
    if (e.population == 0) throw ParameterError("population must be >= 1");
    if (e.elites == 0 || e.elites > e.population)
        throw ParameterError("elites must lie in [1, population]");
    if (e.epochs == 0) throw ParameterError("epochs must be >= 1");
    if (e.max_attempts == 0) throw ParameterError("max_attempts must be >= 1");
    auto prob = [](double p, const char* name) {
        if (!(p >= 0.0 && p <= 1.0))
            throw ParameterError(std::string(name) + " must lie in [0,1]");
    };
    prob(e.mutation_prob, "mutation_prob");
    prob(e.crossover_prob, "crossover_prob");
}

inline Json to_json(const EvoParams& e) {
    return Json{{"population", e.population},
                {"elites", e.elites},
                {"epochs", e.epochs},
                {"offspring", e.offspring},
                {"random_samples", e.random_samples},
                {"mutation_prob", e.mutation_prob},
                {"crossover_prob", e.crossover_prob},
                {"seed", e.seed},
                {"max_attempts", e.max_attempts}};
}

inline EvoParams evo_params_from_json(const Json& j) {
    EvoParams e;
    try {
        e.population = j.value("population", e.population);
        e.elites = j.value("elites", e.elites);
        e.epochs = j.value("epochs", e.epochs);
        e.offspring = j.value("offspring", e.offspring);
        e.random_samples = j.value("random_samples", e.random_samples);
        e.mutation_prob = j.value("mutation_prob", e.mutation_prob);
        e.crossover_prob = j.value("crossover_prob", e.crossover_prob);
        e.seed = j.value("seed", e.seed);
        e.max_attempts = j.value("max_attempts", e.max_attempts);
    } catch (const Json::exception& ex) {
        throw ValidationError(std::string("bad evolution params: ") + ex.what());
    }
    validate_evo_params(e);
    return e;
}

// ----------------------------- mutation -----------------------------

namespace detail {

// Extends an index list with newly sampled distinct values from the
// complement; existing entries keep their order (shrink = drop the tail).
inline void grow_list(std::vector<uint32_t>& list, uint32_t universe, uint32_t target,
                      Rng& rng) {
    std::vector<bool> used(universe, false);
    for (uint32_t i : list) used[i] = true;
    std::vector<uint32_t> pool;
    for (uint32_t i = 0; i < universe; ++i)
        if (!used[i]) pool.push_back(i);
    uint32_t need = target - static_cast<uint32_t>(list.size());
    if (need > pool.size()) throw ParameterError("grow_list: complement exhausted");
    for (uint32_t i = 0; i < need; ++i) {
        uint32_t j = i + static_cast<uint32_t>(rng.index(pool.size() - i));
        std::swap(pool[i], pool[j]);
        list.push_back(pool[i]);
    }
}

// Resizes the heads-per-group count of a group-major head list, keeping
// the selected groups; grown slots sample unused heads within each group.
inline void resize_heads_per_group(std::vector<uint32_t>& head_idx,
                                   const std::vector<uint32_t>& group_idx,
                                   uint32_t new_per_group, const SupernetConfig& su,
                                   Rng& rng) {
    const uint32_t hpg = su.heads_per_group();
    const uint32_t q = static_cast<uint32_t>(group_idx.size());
    const uint32_t old_per_group = static_cast<uint32_t>(head_idx.size()) / q;
    std::vector<uint32_t> next;
    next.reserve(static_cast<size_t>(q) * new_per_group);
    for (uint32_t j = 0; j < q; ++j) {
        const uint32_t g = group_idx[j];
        std::vector<uint32_t> offs;
        for (uint32_t t = 0; t < old_per_group; ++t)
            offs.push_back(head_idx[j * old_per_group + t] - g * hpg);
        if (new_per_group <= old_per_group)
            offs.resize(new_per_group);
        else
            grow_list(offs, hpg, new_per_group, rng);
        for (uint32_t o : offs) next.push_back(g * hpg + o);
    }
    head_idx = std::move(next);
}

// One freshly sampled layer entry (values + index sets) appended to cfg.
inline void append_sampled_layer(SubnetworkConfig& c, uint32_t heads, uint32_t groups,
                                 uint32_t hs, uint32_t d, bool fine,
                                 const SupernetConfig& su, Rng& rng) {
    c.heads.push_back(heads);
    c.query_groups.push_back(groups);
    c.head_dims.push_back(hs);
    c.mlp_dims.push_back(d);
    if (fine) {
        std::vector<uint32_t> hi, gi;
        sample_heads(heads, groups, su, rng, hi, gi);
        c.head_indices.push_back(std::move(hi));
        c.group_indices.push_back(std::move(gi));
        c.head_dim_indices.push_back(sample_distinct(su.head_dim, hs, rng));
        c.mlp_indices.push_back(sample_distinct(su.mlp_dim, d, rng));
    }
}

inline void truncate_layers(SubnetworkConfig& c, uint32_t l) {
    c.heads.resize(l);
    c.head_dims.resize(l);
    c.query_groups.resize(l);
    c.mlp_dims.resize(l);
    if (c.has_index_sets()) {
        c.layer_indices.resize(l);
        c.head_indices.resize(l);
        c.group_indices.resize(l);
        c.head_dim_indices.resize(l);
        c.mlp_indices.resize(l);
    }
    c.layer_count = l;
}

}  // namespace detail

// Resamples exactly one dimension of {layers, embed, heads, groups,
// head_dim, mlp}; the group dimension participates only in grouped-query
// spaces. Layer-wise spaces mutate one layer of a per-layer attribute;
// uniform spaces keep every layer in step. Fine-grained growth samples new
// indices, shrinkage prunes the most recently selected ones.
inline SubnetworkConfig mutate(const SubnetworkConfig& cfg, const SearchSpace& sp,
                               const SupernetConfig& su, Rng& rng) {
    const bool fine = sp.fine_grained();
    const bool lw = sp.layer_wise();
    const bool gqa = !sp.group_choices.empty();
    const uint32_t hpg = su.heads_per_group();
    SubnetworkConfig c = cfg;

    enum Dim { DimL, DimE, DimH, DimG, DimHS, DimD };
    std::vector<Dim> dims{DimL, DimE, DimH, DimHS, DimD};
    if (gqa) dims.insert(dims.begin() + 3, DimG);
    Dim dim = dims[rng.index(dims.size())];

    // Target layers: one sampled layer for per-layer attributes in
    // layer-wise spaces, every layer in uniform spaces.
    auto target_layers = [&]() {
        std::vector<uint32_t> t;
        if (lw)
            t.push_back(static_cast<uint32_t>(rng.index(c.layer_count)));
        else
            for (uint32_t i = 0; i < c.layer_count; ++i) t.push_back(i);
        return t;
    };

    switch (dim) {
        case DimL: {
            uint32_t l2 = detail::pick(sp.layer_choices, rng);
            if (l2 < c.layer_count) {
                detail::truncate_layers(c, l2);
            } else if (l2 > c.layer_count) {
                if (fine) detail::grow_list(c.layer_indices, su.layer_count, l2, rng);
                for (uint32_t i = c.layer_count; i < l2; ++i) {
                    if (lw) {
                        AttnPair p = detail::pick(attn_pairs(sp, su), rng);
                        detail::append_sampled_layer(c, p.heads, p.groups,
                                                     detail::pick(sp.head_dim_choices, rng),
                                                     detail::pick(sp.mlp_choices, rng), fine,
                                                     su, rng);
                    } else {
                        detail::append_sampled_layer(c, c.heads[0], c.query_groups[0],
                                                     c.head_dims[0], c.mlp_dims[0], fine, su,
                                                     rng);
                    }
                }
                c.layer_count = l2;
            }
            break;
        }
        case DimE: {
            uint32_t e2 = detail::pick(sp.embed_choices, rng);
            if (fine) {
                if (e2 < c.embed_dim)
                    c.embed_indices.resize(e2);
                else if (e2 > c.embed_dim)
                    detail::grow_list(c.embed_indices, su.embed_dim, e2, rng);
            }
            c.embed_dim = e2;
            break;
        }
        case DimH: {
            auto targets = target_layers();
            const uint32_t q = c.query_groups[targets[0]];
            std::vector<uint32_t> valid;
            for (uint32_t h : sp.head_choices) {
                if (gqa) {
                    if (h % q == 0 && h / q <= hpg) valid.push_back(h);
                } else {
                    valid.push_back(h);
                }
            }
            uint32_t h2 = detail::pick(valid, rng);
            for (uint32_t i : targets) {
                uint32_t old_h = c.heads[i];
                c.heads[i] = h2;
                if (!gqa) c.query_groups[i] = h2;  // standard attention: one group per head
                if (!fine || h2 == old_h) continue;
                if (gqa) {
                    detail::resize_heads_per_group(c.head_indices[i], c.group_indices[i],
                                                   h2 / q, su, rng);
                } else {
                    // hpg == 1: head ids and group ids coincide.
                    if (h2 < old_h) {
                        c.group_indices[i].resize(h2);
                    } else {
                        detail::grow_list(c.group_indices[i], su.query_groups, h2, rng);
                    }
                    c.head_indices[i] = c.group_indices[i];
                }
            }
            break;
        }
        case DimG: {
            auto targets = target_layers();
            const uint32_t h = c.heads[targets[0]];
            std::vector<uint32_t> valid;
            for (uint32_t q : sp.group_choices)
                if (h % q == 0 && h / q <= hpg) valid.push_back(q);
            uint32_t q2 = detail::pick(valid, rng);
            for (uint32_t i : targets) {
                if (fine && q2 != c.query_groups[i]) {
                    // Changing the group count redistributes the same head
                    // budget over newly sampled groups.
                    detail::sample_heads(c.heads[i], q2, su, rng, c.head_indices[i],
                                         c.group_indices[i]);
                }
                c.query_groups[i] = q2;
            }
            break;
        }
        case DimHS: {
            uint32_t s2 = detail::pick(sp.head_dim_choices, rng);
            for (uint32_t i : target_layers()) {
                if (fine) {
                    if (s2 < c.head_dims[i])
                        c.head_dim_indices[i].resize(s2);
                    else if (s2 > c.head_dims[i])
                        detail::grow_list(c.head_dim_indices[i], su.head_dim, s2, rng);
                }
                c.head_dims[i] = s2;
            }
            break;
        }
        case DimD: {
            uint32_t d2 = detail::pick(sp.mlp_choices, rng);
            for (uint32_t i : target_layers()) {
                if (fine) {
                    if (d2 < c.mlp_dims[i])
                        c.mlp_indices[i].resize(d2);
                    else if (d2 > c.mlp_dims[i])
                        detail::grow_list(c.mlp_indices[i], su.mlp_dim, d2, rng);
                }
                c.mlp_dims[i] = d2;
            }
            break;
        }
    }
    return c;
}

// ----------------------------- crossover -----------------------------

// Each dimension is inherited independently from one parent (coin order:
// embed, heads, groups, head_dim, mlp); layer-wise lists travel as whole
// units and fine-grained index sets travel with their dimension value. If
// independent inheritance picks a structurally impossible (heads, groups)
// combination, the groups fall back to the heads' parent.
inline SubnetworkConfig crossover(const SubnetworkConfig& p1, const SubnetworkConfig& p2,
                                  const SearchSpace& sp, const SupernetConfig& su, Rng& rng) {
    if (p1.layer_count != p2.layer_count)
        throw ParameterError("crossover requires parents with equal layer counts");
    const bool fine = sp.fine_grained();
    const bool gqa = !sp.group_choices.empty();
    const uint32_t hpg = su.heads_per_group();
    SubnetworkConfig c = p1;  // layer count and layer set come from the first parent

    const bool e_from2 = rng.coin(0.5);
    const bool h_from2 = rng.coin(0.5);
    const bool g_from2 = gqa ? rng.coin(0.5) : h_from2;
    const bool hs_from2 = rng.coin(0.5);
    const bool d_from2 = rng.coin(0.5);

    const SubnetworkConfig& esrc = e_from2 ? p2 : p1;
    const SubnetworkConfig& hsrc = h_from2 ? p2 : p1;
    const SubnetworkConfig& gsrc = g_from2 ? p2 : p1;
    const SubnetworkConfig& ssrc = hs_from2 ? p2 : p1;
    const SubnetworkConfig& dsrc = d_from2 ? p2 : p1;

    c.embed_dim = esrc.embed_dim;
    c.heads = hsrc.heads;
    c.query_groups = gsrc.query_groups;
    c.head_dims = ssrc.head_dims;
    c.mlp_dims = dsrc.mlp_dims;
    if (fine) {
        c.embed_indices = esrc.embed_indices;
        c.head_indices = hsrc.head_indices;
        c.group_indices = gsrc.group_indices;
        c.head_dim_indices = ssrc.head_dim_indices;
        c.mlp_indices = dsrc.mlp_indices;
    }

    bool compatible = true;
    for (uint32_t i = 0; i < c.layer_count && compatible; ++i) {
        uint32_t h = c.heads[i], q = c.query_groups[i];
        if (h % q != 0 || h / q > hpg) compatible = false;
        if (compatible && fine) {
            if (c.group_indices[i].size() != q) {
                compatible = false;
            } else {
                uint32_t per_group = h / q;
                for (uint32_t j = 0; j < q && compatible; ++j)
                    for (uint32_t t = 0; t < per_group; ++t)
                        if (c.head_indices[i][j * per_group + t] / hpg !=
                            c.group_indices[i][j]) {
                            compatible = false;
                            break;
                        }
            }
        }
    }
    if (!compatible) {
        c.query_groups = hsrc.query_groups;
        if (fine) c.group_indices = hsrc.group_indices;
    }
    return c;
}

// ----------------------------- bin constraint -----------------------------

// Repair loop: mutate until the parameter count lands inside the bin. A
// config already inside is returned unchanged. Throws a rejection failure
// carrying the attempt count once the budget is exhausted.
inline SubnetworkConfig constrain(SubnetworkConfig cfg, const ParamBin& bin,
                                  const SearchSpace& sp, const SupernetConfig& su, Rng& rng,
                                  uint32_t max_attempts) {
    validate_bin(bin);
    for (uint32_t attempt = 0; attempt <= max_attempts; ++attempt) {
        uint64_t p = count_params(su, cfg);
        if (p >= bin.lower && p <= bin.upper) return cfg;
        if (attempt == max_attempts) break;
        cfg = mutate(cfg, sp, su, rng);
    }
    throw RejectionError("no in-bin config within " + std::to_string(max_attempts) +
                             " attempts for bin [" + std::to_string(bin.lower) + "," +
                             std::to_string(bin.upper) + "]",
                         max_attempts);
}

inline SubnetworkConfig sample_in_bin(const SearchSpace& sp, const SupernetConfig& su,
                                      const ParamBin& bin, Rng& rng, uint32_t max_attempts) {
    return constrain(sample(sp, su, rng), bin, sp, su, rng, max_attempts);
}

// ----------------------------- fitness -----------------------------

using FitnessFn = std::function<double(const SubnetworkConfig&)>;

// Perplexity of the activated sub-network on a fixed validation batch set.
// Candidates are evaluated through extraction, which yields exactly the
// masked supernet's outputs and keeps parallel evaluation race-free.
inline FitnessFn make_perplexity_fitness(const Supernet& net, const TokenizedCorpus& corpus,
                                         const EvalPlan& plan) {
    auto batches = std::make_shared<const std::vector<Batch>>(make_eval_batches(corpus, plan));
    const Supernet* n = &net;
    return [n, batches](const SubnetworkConfig& cfg) {
        GptModel m = n->extract(cfg);
        double p = evaluate_perplexity(m, *batches);
        if (!std::isfinite(p)) throw FitnessError("non-finite perplexity");
        return p;
    };
}

// ----------------------------- search loop -----------------------------

struct EpochRecord {
    uint32_t bin_index = 0;
    uint32_t epoch = 0;
    uint64_t candidate_id = 0;
    uint64_t params = 0;
    double fitness = 0.0;
};

struct BinOutcome {
    ParamBin bin;
    bool feasible = true;
    uint32_t epochs_run = 0;
    std::string message;
    std::optional<Candidate> best;
};

struct SearchResult {
    std::vector<BinOutcome> bins;
    std::vector<EpochRecord> history;
};

using EpochHook =
    std::function<void(uint32_t bin_index, uint32_t epoch, const std::vector<Candidate>&)>;

namespace detail {

inline bool candidate_less(const Candidate& a, const Candidate& b) {
    if (a.fitness != b.fitness) return a.fitness < b.fitness;
    if (a.params != b.params) return a.params < b.params;
    return a.id < b.id;
}

struct FitnessCache {
    std::map<std::string, double> values;
    std::map<std::string, uint64_t> ids;
    uint64_t next_id = 0;

    uint64_t id_for(const std::string& key) {
        auto it = ids.find(key);
        if (it != ids.end()) return it->second;
        return ids.emplace(key, next_id++).first->second;
    }
};

// Evaluates every not-yet-cached candidate. With several workers the
// evaluations run concurrently, but results are keyed by config so the
// outcome is identical to the serial order.
inline void evaluate_all(std::vector<Candidate>& pop, FitnessCache& cache,
                         const FitnessFn& fit, size_t workers) {
    std::vector<std::pair<std::string, const SubnetworkConfig*>> todo;
    for (auto& cand : pop) {
        std::string key = canonical_key(cand.cfg);
        if (cache.values.find(key) == cache.values.end()) {
            bool queued = false;
            for (const auto& [k, ptr] : todo)
                if (k == key) {
                    queued = true;
                    break;
                }
            if (!queued) todo.emplace_back(std::move(key), &cand.cfg);
        }
    }
    std::vector<double> results(todo.size());
    auto eval_one = [&fit](const SubnetworkConfig& cfg) {
        try {
            return fit(cfg);
        } catch (const FitnessError&) {
            return std::numeric_limits<double>::infinity();
        }
    };
    if (workers <= 1 || todo.size() <= 1) {
        for (size_t i = 0; i < todo.size(); ++i) results[i] = eval_one(*todo[i].second);
    } else {
        std::atomic<size_t> next{0};
        std::exception_ptr failure;
        std::mutex failure_mu;
        auto worker = [&]() {
            while (true) {
                size_t i = next.fetch_add(1);
                if (i >= todo.size()) break;
                try {
                    results[i] = eval_one(*todo[i].second);
                } catch (...) {
                    std::lock_guard<std::mutex> lock(failure_mu);
                    if (!failure) failure = std::current_exception();
                }
            }
        };
        std::vector<std::thread> pool;
        size_t n = std::min(workers, todo.size());
        for (size_t i = 0; i < n; ++i) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
        if (failure) std::rethrow_exception(failure);
    }
    for (size_t i = 0; i < todo.size(); ++i) cache.values[todo[i].first] = results[i];
    for (auto& cand : pop) cand.fitness = cache.values.at(canonical_key(cand.cfg));
}

}  // namespace detail

// Bin-constrained evolutionary search. Per bin and epoch: evaluate the
// population, keep the top-k elites, emit offspring slots (mutants of
// random elites with the mutation probability, crossovers of elite pairs
// with the crossover probability, fresh samples otherwise), add random
// samples, constrain everything to the bin, and keep the best N. Epoch 0
// in the history is the initial population; epoch t the population after
// t variation rounds. A rejection failure after initialization ends the
// bin early with the best found so far; one during initialization marks
// the bin infeasible. Other bins always proceed.
inline SearchResult run_search(const SearchSpace& sp, const SupernetConfig& su,
                               const std::vector<ParamBin>& bins, const EvoParams& evo,
                               const FitnessFn& fit, size_t workers = 1,
                               const EpochHook& hook = {}) {
    validate_space(sp, su);
    validate_evo_params(evo);
    for (const auto& b : bins) validate_bin(b);

    SearchResult res;
    Rng master(evo.seed);
    for (uint32_t bi = 0; bi < bins.size(); ++bi) {
        const ParamBin& bin = bins[bi];
        Rng rng = master.fork(bi);
        BinOutcome outcome;
        outcome.bin = bin;
        detail::FitnessCache cache;

        auto admit = [&](SubnetworkConfig cfg) {
            Candidate cand;
            cand.params = count_params(su, cfg);
            if (cand.params < bin.lower || cand.params > bin.upper)
                throw std::logic_error("internal error: out-of-bin candidate admitted");
            cand.id = cache.id_for(canonical_key(cfg));
            cand.cfg = std::move(cfg);
            return cand;
        };
        auto record = [&](uint32_t epoch, const std::vector<Candidate>& pop) {
            for (const auto& cand : pop)
                res.history.push_back({bi, epoch, cand.id, cand.params, cand.fitness});
            if (hook) hook(bi, epoch, pop);
        };

        std::vector<Candidate> pop;
        try {
            for (uint32_t i = 0; i < evo.population; ++i)
                pop.push_back(admit(sample_in_bin(sp, su, bin, rng, evo.max_attempts)));
        } catch (const RejectionError& e) {
            outcome.feasible = false;
            outcome.message = e.what();
            res.bins.push_back(std::move(outcome));
            continue;
        }

        try {
            detail::evaluate_all(pop, cache, fit, workers);
            std::sort(pop.begin(), pop.end(), detail::candidate_less);
            record(0, pop);
            for (uint32_t epoch = 1; epoch <= evo.epochs; ++epoch) {
                const size_t k = evo.elites;
                std::vector<Candidate> next(pop.begin(), pop.begin() + std::min(k, pop.size()));
                auto add_offspring = [&](SubnetworkConfig cfg) {
                    next.push_back(
                        admit(constrain(std::move(cfg), bin, sp, su, rng, evo.max_attempts)));
                };
                for (uint32_t j = 0; j < evo.offspring; ++j) {
                    if (rng.coin(evo.mutation_prob))
                        add_offspring(mutate(next[rng.index(k)].cfg, sp, su, rng));
                    else
                        add_offspring(sample(sp, su, rng));
                }
                for (uint32_t j = 0; j < evo.offspring; ++j) {
                    if (rng.coin(evo.crossover_prob)) {
                        const Candidate* a = nullptr;
                        const Candidate* b = nullptr;
                        for (uint32_t attempt = 0; attempt < evo.max_attempts; ++attempt) {
                            const Candidate& ca = next[rng.index(k)];
                            const Candidate& cb = next[rng.index(k)];
                            if (ca.cfg.layer_count == cb.cfg.layer_count) {
                                a = &ca;
                                b = &cb;
                                break;
                            }
                        }
                        if (a)
                            add_offspring(crossover(a->cfg, b->cfg, sp, su, rng));
                        else
                            add_offspring(sample(sp, su, rng));
                    } else {
                        add_offspring(sample(sp, su, rng));
                    }
                }
                for (uint32_t j = 0; j < evo.random_samples; ++j)
                    add_offspring(sample(sp, su, rng));

                detail::evaluate_all(next, cache, fit, workers);
                std::sort(next.begin(), next.end(), detail::candidate_less);
                if (next.size() > evo.population) next.resize(evo.population);
                pop = std::move(next);
                record(epoch, pop);
                outcome.epochs_run = epoch;
            }
        } catch (const RejectionError& e) {
            outcome.message = std::string("stopped early: ") + e.what();
        }
        if (!pop.empty()) outcome.best = pop.front();
        res.bins.push_back(std::move(outcome));
    }
    return res;
}

}  // namespace snf
