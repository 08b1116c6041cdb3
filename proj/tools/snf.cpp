// SPDX-License-Identifier: Apache-2.0
#include <CLI11.hpp>
#include <cstdlib>
#include <filesystem>
#include <iostream>

#include "snf/importance.hpp"
#include "snf/manifest.hpp"
#include "snf/train.hpp"

namespace fs = std::filesystem;
using namespace snf;

namespace {

Json load_json_file(const std::string& path) {
    auto bytes = read_file_bytes(path);
    try {
        return Json::parse(bytes.begin(), bytes.end());
    } catch (const Json::exception& ex) {
        throw ValidationError("cannot parse " + path + ": " + ex.what());
    }
}

Supernet load_supernet(const std::string& path) {
    GptModel m = load_model(path);
    auto cfg = homogeneous_supernet(m.dims());
    if (!cfg)
        throw ValidationError(path + " holds a heterogeneous model, not a supernet");
    return Supernet(*cfg, std::move(m));
}

std::vector<ParamBin> bins_from_json(const Json& j) {
    if (!j.is_array() || j.empty())
        throw ValidationError("bins file must hold a non-empty array");
    std::vector<ParamBin> bins;
    for (const auto& item : j) {
        ParamBin b;
        try {
            b.lower = item.at("lower").get<uint64_t>();
            b.upper = item.at("upper").get<uint64_t>();
        } catch (const Json::exception& ex) {
            throw ValidationError(std::string("bad bin entry: ") + ex.what());
        }
        validate_bin(b);
        bins.push_back(b);
    }
    return bins;
}

Json to_json(const std::vector<ParamBin>& bins) {
    Json out = Json::array();
    for (const auto& b : bins) out.push_back(Json{{"lower", b.lower}, {"upper", b.upper}});
    return out;
}

std::string format_g(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.10g", v);
    return buf;
}

size_t default_workers() {
    const char* env = std::getenv("SNF_WORKERS");
    if (!env) return 1;
    char* end = nullptr;
    unsigned long v = std::strtoul(env, &end, 10);
    if (end == env || v == 0) return 1;
    return static_cast<size_t>(v);
}

// ----------------------------- commands -----------------------------

struct InitArgs {
    std::string config, out;
    uint64_t seed = 42;
};

int cmd_init(const InitArgs& a) {
    SupernetConfig cfg = supernet_from_json(load_json_file(a.config));
    Supernet net = Supernet::random_init(cfg, a.seed);
    save_model(a.out, net.network());
    std::cout << "wrote " << a.out << " params " << net.network().param_count() << "\n";
    return 0;
}

struct IngestArgs {
    std::string input, out;
    double val_fraction = 0.1;
};

int cmd_ingest(const IngestArgs& a) {
    auto bytes = read_file_bytes(a.input);
    TokenizedCorpus c = tokenize_bytes(bytes, a.val_fraction);
    save_token_cache(a.out, c);
    std::cout << "wrote " << a.out << " tokens " << c.tokens.size() << " train "
              << (c.train_end - c.train_begin) << " val " << (c.val_end - c.val_begin)
              << "\n";
    return 0;
}

struct SearchArgs {
    std::string model, corpus, space, bins, evo, importance, metric = "ppl", out;
    uint64_t seed = 0;
    bool seed_set = false;
    size_t workers = 1;
    EvalPlan eval;
    uint32_t imp_batches = 8, imp_batch_size = 8, imp_seq_len = 64;
    uint64_t imp_seed = 123;
    std::vector<std::string> argv;
};

int cmd_search(const SearchArgs& a) {
    RunManifest man;
    man.command = "search";
    man.argv = a.argv;
    man.started_at = utc_timestamp();

    Supernet net = load_supernet(a.model);
    TokenizedCorpus corpus = load_corpus_file(a.corpus);
    SearchSpace space = space_from_json(load_json_file(a.space));
    validate_space(space, net.config());
    std::vector<ParamBin> bins = bins_from_json(load_json_file(a.bins));
    EvoParams evo;
    if (!a.evo.empty()) evo = evo_params_from_json(load_json_file(a.evo));
    if (a.seed_set) evo.seed = a.seed;
    validate_evo_params(evo);

    FitnessFn fit;
    ImportanceTables tables;
    if (a.metric == "ppl") {
        fit = make_perplexity_fitness(net, corpus, a.eval);
    } else if (a.metric == "importance") {
        if (!a.importance.empty())
            tables = load_importance(a.importance);
        else
            tables = compute_importance(net, corpus, a.imp_batches, a.imp_batch_size,
                                        a.imp_seq_len, a.imp_seed);
        if (to_json(tables.super) != to_json(net.config()))
            throw ValidationError("importance tables were built for a different supernet");
        fit = make_importance_fitness(tables);
    } else {
        throw ValidationError("unknown metric: " + a.metric);
    }

    ensure_dir(a.out);
    std::ofstream history(a.out + "/history.csv", std::ios::trunc);
    if (!history) throw IoError("cannot write " + a.out + "/history.csv");
    history << "epoch,bin,candidate,params,fitness\n";
    EpochHook hook = [&history](uint32_t bin, uint32_t epoch,
                                const std::vector<Candidate>& pop) {
        for (const auto& c : pop)
            history << epoch << ',' << bin << ',' << c.id << ',' << c.params << ','
                    << format_g(c.fitness) << "\n";
        history.flush();
    };

    SearchResult res = run_search(space, net.config(), bins, evo, fit, a.workers, hook);

    Json state = Json::array();
    bool any_infeasible = false;
    for (size_t i = 0; i < res.bins.size(); ++i) {
        const BinOutcome& o = res.bins[i];
        Json entry{{"lower", o.bin.lower}, {"upper", o.bin.upper},
                   {"feasible", o.feasible}, {"epochs_run", o.epochs_run}};
        if (!o.message.empty()) entry["message"] = o.message;
        if (o.best) {
            entry["best"] = Json{{"params", o.best->params}, {"fitness", o.best->fitness}};
            Json best{{"config", to_json(o.best->cfg)},
                      {"params", o.best->params},
                      {"fitness", o.best->fitness}};
            write_file_atomic(a.out + "/best_bin" + std::to_string(i) + ".json",
                              best.dump(2) + "\n");
            man.artifacts.push_back(a.out + "/best_bin" + std::to_string(i) + ".json");
            std::cout << "bin " << i << " [" << o.bin.lower << "," << o.bin.upper
                      << "]: fitness " << format_g(o.best->fitness) << " params "
                      << o.best->params << "\n";
        } else {
            std::cout << "bin " << i << " [" << o.bin.lower << "," << o.bin.upper
                      << "]: infeasible (" << o.message << ")\n";
        }
        if (!o.feasible) any_infeasible = true;
        state.push_back(std::move(entry));
    }
    write_file_atomic(a.out + "/state.json", state.dump(2) + "\n");
    write_file_atomic(a.out + "/space.json", to_json(space).dump(2) + "\n");
    write_file_atomic(a.out + "/bins.json", to_json(bins).dump(2) + "\n");
    write_file_atomic(a.out + "/evo.json", to_json(evo).dump(2) + "\n");

    man.seed = evo.seed;
    man.config = Json{{"space", to_json(space)},
                      {"bins", to_json(bins)},
                      {"evo", to_json(evo)},
                      {"metric", a.metric},
                      {"workers", a.workers}};
    man.inputs = {{a.model, content_hash(a.model)},
                  {a.corpus, content_hash(a.corpus)},
                  {a.space, content_hash(a.space)},
                  {a.bins, content_hash(a.bins)}};
    if (!a.evo.empty()) man.inputs.emplace_back(a.evo, content_hash(a.evo));
    if (!a.importance.empty()) man.inputs.emplace_back(a.importance, content_hash(a.importance));
    man.artifacts.push_back(a.out + "/history.csv");
    man.artifacts.push_back(a.out + "/state.json");
    man.finished_at = utc_timestamp();
    save_manifest(a.out, man);
    return any_infeasible ? 3 : 0;
}

struct ExtractArgs {
    std::string model, config, out;
};

int cmd_extract(const ExtractArgs& a) {
    Supernet net = load_supernet(a.model);
    Json j = load_json_file(a.config);
    // Accept a search result (best_binN.json) as well as a bare config.
    if (j.is_object() && j.contains("config") && !j.contains("layer_count")) j = j.at("config");
    SubnetworkConfig cfg = subnetwork_from_json(j);
    validate_subnetwork(net.config(), cfg);
    GptModel m = net.extract(cfg);
    save_model(a.out, m);
    std::cout << "wrote " << a.out << " params " << m.param_count() << "\n";
    return 0;
}

struct ImportanceArgs {
    std::string model, corpus, out, source = "activation";
    uint32_t batches = 8, batch_size = 8, seq_len = 64;
    uint64_t seed = 123;
};

int cmd_importance(const ImportanceArgs& a) {
    Supernet net = load_supernet(a.model);
    ImportanceTables t;
    if (a.source == "activation") {
        if (a.corpus.empty())
            throw ValidationError("activation importance requires --corpus");
        TokenizedCorpus corpus = load_corpus_file(a.corpus);
        t = compute_importance(net, corpus, a.batches, a.batch_size, a.seq_len, a.seed);
    } else if (a.source == "weight_magnitude") {
        t = weight_magnitude_importance(net);
    } else {
        throw ValidationError("unknown importance source: " + a.source);
    }
    save_importance(a.out, t);
    std::cout << "wrote " << a.out << "\n";
    return 0;
}

struct TrainArgs {
    std::string model, config, corpus, train, out;
    std::string teacher, distill;  // distill only
    uint64_t init_seed = 42;
    uint64_t total_tokens = 0;
    uint64_t seed = 0;
    bool seed_set = false;
    bool resume = false;
    bool distilling = false;
    std::vector<std::string> argv;
};

// Keeps only the header and rows at or before `step`; returns the kept text.
std::string truncate_metrics(const std::string& path, uint64_t step) {
    auto bytes = read_file_bytes(path);
    std::string text(bytes.begin(), bytes.end());
    std::string kept;
    size_t pos = 0;
    bool first = true;
    while (pos < text.size()) {
        size_t nl = text.find('\n', pos);
        if (nl == std::string::npos) nl = text.size();
        std::string line = text.substr(pos, nl - pos);
        pos = nl + 1;
        if (line.empty()) continue;
        if (first) {
            kept += line + "\n";
            first = false;
            continue;
        }
        uint64_t row_step = std::strtoull(line.c_str(), nullptr, 10);
        if (row_step <= step) kept += line + "\n";
    }
    return kept;
}

int cmd_train(const TrainArgs& a) {
    RunManifest man;
    man.command = a.distilling ? "distill" : "pretrain";
    man.argv = a.argv;
    man.started_at = utc_timestamp();

    TrainSpec ts;
    if (!a.train.empty()) ts = train_spec_from_json(load_json_file(a.train));
    if (a.total_tokens != 0) ts.total_tokens = a.total_tokens;
    if (a.seed_set) ts.seed = a.seed;
    validate_train_spec(ts);

    DistillSpec ds;
    std::optional<GptModel> teacher;
    if (a.distilling) {
        if (a.teacher.empty()) throw ValidationError("distill requires --teacher");
        if (!a.distill.empty()) ds = distill_spec_from_json(load_json_file(a.distill));
        teacher.emplace(load_model(a.teacher));
    }

    ensure_dir(a.out);
    const std::string metrics_path = a.out + "/metrics.csv";
    const std::string ckpt_root = a.out + "/checkpoints";
    const std::string latest_path = ckpt_root + "/LATEST";

    // Each checkpoint is a complete step-named set; LATEST is swung to it
    // only once the set is fully on disk, so a kill at any instant leaves a
    // loadable checkpoint behind.
    TrainState st;
    bool resuming = a.resume && fs::exists(latest_path);
    std::string resume_dir;
    if (resuming) {
        auto bytes = read_file_bytes(latest_path);
        std::string name(bytes.begin(), bytes.end());
        while (!name.empty() && (name.back() == '\n' || name.back() == '\r')) name.pop_back();
        resume_dir = ckpt_root + "/" + name;
    }
    GptModel model = [&]() {
        if (resuming) return load_model(resume_dir + "/model.snfw");
        if (!a.model.empty()) return load_model(a.model);
        if (a.config.empty())
            throw ValidationError("provide --model or --config to initialize the model");
        SupernetConfig cfg = supernet_from_json(load_json_file(a.config));
        return GptModel::random_init(dims_of(cfg), a.init_seed);
    }();
    AdamW opt(model.parameters(), ts);
    std::ofstream csv;
    if (resuming) {
        st = train_state_from_json(load_json_file(resume_dir + "/progress.json"));
        opt.load_state(load_archive(resume_dir + "/opt.snfw"));
        std::string kept = truncate_metrics(metrics_path, st.step);
        write_file_atomic(metrics_path, kept);
        csv.open(metrics_path, std::ios::app);
    } else {
        csv.open(metrics_path, std::ios::trunc);
        csv << metric_csv_header() << "\n";
    }
    if (!csv) throw IoError("cannot write " + metrics_path);

    TrainHooks hooks;
    hooks.on_row = [&csv](const MetricRow& r) {
        csv << metric_csv_row(r) << "\n";
        csv.flush();
    };
    hooks.on_checkpoint = [&](const TrainState& s) {
        const std::string name = "step" + std::to_string(s.step);
        const std::string dir = ckpt_root + "/" + name;
        ensure_dir(dir);
        save_model(dir + "/model.snfw", model);
        save_archive(dir + "/opt.snfw", opt.state());
        write_file_atomic(dir + "/progress.json", to_json(s).dump(2) + "\n");
        write_file_atomic(latest_path, name + "\n");
        for (const auto& entry : fs::directory_iterator(ckpt_root)) {
            if (!entry.is_directory()) continue;
            if (entry.path().filename() != name) fs::remove_all(entry.path());
        }
    };

    TokenizedCorpus corpus = load_corpus_file(a.corpus);
    std::vector<MetricRow> rows =
        train_model(model, teacher ? &*teacher : nullptr, corpus, ts,
                    a.distilling ? &ds : nullptr, opt, st, hooks);
    save_model(a.out + "/ckpt_final.snfw", model);

    if (!rows.empty()) {
        const MetricRow& last = rows.back();
        std::cout << "step " << last.step << " loss " << format_g(last.train_loss);
        if (last.val_ppl) std::cout << " val_ppl " << format_g(*last.val_ppl);
        std::cout << "\n";
    }

    man.seed = ts.seed;
    man.config = Json{{"train", to_json(ts)}};
    if (a.distilling) man.config["distill"] = to_json(ds);
    man.inputs = {{a.corpus, content_hash(a.corpus)}};
    if (!a.model.empty() && !resuming) man.inputs.emplace_back(a.model, content_hash(a.model));
    if (!a.config.empty()) man.inputs.emplace_back(a.config, content_hash(a.config));
    if (!a.train.empty()) man.inputs.emplace_back(a.train, content_hash(a.train));
    if (!a.teacher.empty()) man.inputs.emplace_back(a.teacher, content_hash(a.teacher));
    if (!a.distill.empty()) man.inputs.emplace_back(a.distill, content_hash(a.distill));
    man.artifacts = {metrics_path, a.out + "/ckpt_final.snfw", ckpt_root};
    man.finished_at = utc_timestamp();
    save_manifest(a.out, man);
    return 0;
}

struct EvalArgs {
    std::string model, corpus;
    EvalPlan plan;
};

int cmd_eval(const EvalArgs& a) {
    GptModel m = load_model(a.model);
    TokenizedCorpus corpus = load_corpus_file(a.corpus);
    double ppl = evaluate_perplexity(m, corpus, a.plan);
    std::cout << "val_ppl " << format_g(ppl) << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"supernet-based small language model toolkit"};
    app.require_subcommand(1);
    std::vector<std::string> raw_argv(argv, argv + argc);

    InitArgs init_args;
    auto* init = app.add_subcommand("init", "create a randomly initialized supernet");
    init->add_option("--config", init_args.config, "supernet config JSON")->required();
    init->add_option("--seed", init_args.seed, "init seed");
    init->add_option("--out", init_args.out, "output checkpoint path")->required();

    IngestArgs ingest_args;
    auto* ingest = app.add_subcommand("ingest", "tokenize a raw byte corpus");
    ingest->add_option("--input", ingest_args.input, "raw input file")->required();
    ingest->add_option("--out", ingest_args.out, "token cache path")->required();
    ingest->add_option("--val-fraction", ingest_args.val_fraction, "validation tail fraction");

    SearchArgs search_args;
    search_args.workers = default_workers();
    auto* search = app.add_subcommand("search", "evolutionary sub-network search");
    search->add_option("--model", search_args.model, "supernet checkpoint")->required();
    search->add_option("--corpus", search_args.corpus, "corpus file")->required();
    search->add_option("--space", search_args.space, "search space JSON")->required();
    search->add_option("--bins", search_args.bins, "parameter bins JSON")->required();
    search->add_option("--evo", search_args.evo, "evolution params JSON");
    search->add_option("--metric", search_args.metric, "fitness metric: ppl or importance");
    search->add_option("--importance", search_args.importance,
                       "precomputed importance tables (metric=importance)");
    search->add_option("--seed", search_args.seed, "search seed override");
    search->add_option("--workers", search_args.workers, "parallel fitness workers");
    search->add_option("--out", search_args.out, "output directory")->required();
    search->add_option("--eval-batches", search_args.eval.batches, "fitness eval batches");
    search->add_option("--eval-batch-size", search_args.eval.batch_size,
                       "fitness eval batch size");
    search->add_option("--eval-seq-len", search_args.eval.seq_len, "fitness eval seq len");
    search->add_option("--eval-seed", search_args.eval.seed, "fitness eval batch seed");
    search->add_option("--imp-batches", search_args.imp_batches, "importance batches");
    search->add_option("--imp-batch-size", search_args.imp_batch_size,
                       "importance batch size");
    search->add_option("--imp-seq-len", search_args.imp_seq_len, "importance seq len");
    search->add_option("--imp-seed", search_args.imp_seed, "importance batch seed");

    ExtractArgs extract_args;
    auto* extract = app.add_subcommand("extract", "materialize a sub-network");
    extract->add_option("--model", extract_args.model, "supernet checkpoint")->required();
    extract->add_option("--config", extract_args.config, "sub-network config JSON")
        ->required();
    extract->add_option("--out", extract_args.out, "output checkpoint path")->required();

    ImportanceArgs imp_args;
    auto* importance = app.add_subcommand("importance", "compute unit importance tables");
    importance->add_option("--model", imp_args.model, "supernet checkpoint")->required();
    importance->add_option("--corpus", imp_args.corpus, "corpus file (activation source)");
    importance->add_option("--source", imp_args.source,
                           "activation or weight_magnitude");
    importance->add_option("--batches", imp_args.batches, "batches to accumulate");
    importance->add_option("--batch-size", imp_args.batch_size, "batch size");
    importance->add_option("--seq-len", imp_args.seq_len, "sequence length");
    importance->add_option("--seed", imp_args.seed, "batch sampling seed");
    importance->add_option("--out", imp_args.out, "output tables path")->required();

    TrainArgs pretrain_args;
    auto* pretrain = app.add_subcommand("pretrain", "train a model on next-byte prediction");
    TrainArgs distill_args;
    distill_args.distilling = true;
    auto* distill = app.add_subcommand("distill", "train a student against a teacher");
    for (auto [cmd, args] : {std::pair{pretrain, &pretrain_args},
                             std::pair{distill, &distill_args}}) {
        cmd->add_option("--model", args->model, "initial model checkpoint");
        cmd->add_option("--config", args->config, "supernet config JSON for random init");
        cmd->add_option("--init-seed", args->init_seed, "random init seed");
        cmd->add_option("--corpus", args->corpus, "corpus file")->required();
        cmd->add_option("--train", args->train, "training spec JSON");
        cmd->add_option("--total-tokens", args->total_tokens, "token budget override");
        cmd->add_option("--seed", args->seed, "data order seed override");
        cmd->add_flag("--resume", args->resume, "resume from the output directory");
        cmd->add_option("--out", args->out, "output directory")->required();
    }
    distill->add_option("--teacher", distill_args.teacher, "teacher checkpoint");
    distill->add_option("--distill", distill_args.distill, "distillation spec JSON");

    EvalArgs eval_args;
    auto* eval = app.add_subcommand("eval", "validation perplexity of a checkpoint");
    eval->add_option("--model", eval_args.model, "model checkpoint")->required();
    eval->add_option("--corpus", eval_args.corpus, "corpus file")->required();
    eval->add_option("--batches", eval_args.plan.batches, "eval batches");
    eval->add_option("--batch-size", eval_args.plan.batch_size, "eval batch size");
    eval->add_option("--seq-len", eval_args.plan.seq_len, "eval sequence length");
    eval->add_option("--seed", eval_args.plan.seed, "eval batch seed");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*init) return cmd_init(init_args);
        if (*ingest) return cmd_ingest(ingest_args);
        if (*search) {
            search_args.seed_set = search->count("--seed") > 0;
            search_args.argv = raw_argv;
            return cmd_search(search_args);
        }
        if (*extract) return cmd_extract(extract_args);
        if (*importance) return cmd_importance(imp_args);
        if (*pretrain) {
            pretrain_args.seed_set = pretrain->count("--seed") > 0;
            pretrain_args.argv = raw_argv;
            return cmd_train(pretrain_args);
        }
        if (*distill) {
            distill_args.seed_set = distill->count("--seed") > 0;
            distill_args.argv = raw_argv;
            return cmd_train(distill_args);
        }
        if (*eval) return cmd_eval(eval_args);
        std::cerr << "no command\n";
        return 1;
    } catch (const DivergenceError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 4;
    } catch (const InfeasibleBinError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const RejectionError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const ValidationError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const IngestionError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
