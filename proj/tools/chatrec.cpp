// chatrec command-line entry point.

#include "chatrec/coldstart.hpp"
#include "chatrec/dataset.hpp"
#include "chatrec/dialogue.hpp"
#include "chatrec/eval.hpp"
#include "chatrec/llm.hpp"
#include "chatrec/prompt.hpp"
#include "chatrec/recsys.hpp"
#include "chatrec/service.hpp"

#include <CLI11.hpp>
#include <httplib.h>

#include <chrono>
#include <csignal>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>

using namespace chatrec;
using nlohmann::json;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string default_data_dir() {
    if (const char* v = std::getenv("CHATREC_DATA_DIR")) return v;
    return "data/ml-100k";
}

struct DataOptions {
    std::string data_dir = default_data_dir();
    std::string split = "holdout:0.2";
    double holdout = -1.0;
    std::int64_t seed = -1;
    std::int64_t split_seed = -1;
    std::size_t sample_users = 200;

    void add(CLI::App* app, bool with_sampling = true) {
        app->add_option("--data-dir", data_dir, "MovieLens-100K directory")->capture_default_str();
        app->add_option("--split", split, "holdout:F | random-holdout:F | leave-out:N")->capture_default_str();
        app->add_option("--holdout", holdout, "shorthand for --split holdout:F");
        app->add_option("--seed", seed, "seed for user sampling (and the split unless --split-seed)")->required();
        app->add_option("--split-seed", split_seed, "seed for tie-breaking and random holdout");
        if (with_sampling) {
            app->add_option("--sample-users", sample_users, "users to evaluate, 0 for all")->capture_default_str();
        }
    }
    SplitPolicy policy() const { return holdout >= 0.0 ? SplitPolicy::holdout(holdout) : SplitPolicy::parse(split); }
    std::uint64_t sampling_seed() const { return static_cast<std::uint64_t>(seed); }
    std::uint64_t splitting_seed() const { return static_cast<std::uint64_t>(split_seed >= 0 ? split_seed : seed); }
};

struct ModelOptions {
    MfHyperParams mf;
    KnnParams knn;
    std::string similarity = "adjusted_cosine";

    void add(CLI::App* app) {
        app->add_option("--factors", mf.factors)->capture_default_str();
        app->add_option("--epochs", mf.epochs)->capture_default_str();
        app->add_option("--lr", mf.learning_rate)->capture_default_str();
        app->add_option("--reg", mf.regularization)->capture_default_str();
        app->add_option("--model-seed", mf.seed)->capture_default_str();
        app->add_option("--knn-k", knn.k)->capture_default_str();
        app->add_option("--shrinkage", knn.shrinkage)->capture_default_str();
        app->add_option("--similarity", similarity, "cosine | adjusted_cosine")->capture_default_str();
    }
    KnnParams knn_params() const {
        KnnParams p = knn;
        p.kind = similarity_kind_from_string(similarity);
        return p;
    }
};

/// mf | itemknn | model:<file> | external:<file>
std::unique_ptr<CandidateSource> make_candidates(const std::string& spec, const std::vector<RatingEvent>& train,
                                                 const ModelOptions& m) {
    if (spec == "mf") return std::make_unique<MfModel>(MfModel::train(train, m.mf));
    if (spec == "itemknn") return std::make_unique<ItemKnnModel>(ItemKnnModel::train(train, m.knn_params()));
    if (spec.rfind("model:", 0) == 0) return load_model(spec.substr(6));
    if (spec.rfind("external:", 0) == 0) return std::make_unique<ExternalScores>(ExternalScores::load(spec.substr(9)));
    throw std::invalid_argument("unknown candidate source '" + spec + "' (mf, itemknn, model:<file>, external:<file>)");
}

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    for (auto& part : split(s, ',')) {
        auto t = trim(part);
        if (!t.empty()) out.push_back(t);
    }
    return out;
}

void print_report(const MetricReport& r) {
    std::printf("%s  model=%s provider=%s candidates=%s variant=%s temperature=%g repeats=%d\n", r.experiment.c_str(),
                r.model_id.c_str(), r.provider_id.c_str(), r.candidate_source.c_str(), to_string(r.variant).c_str(),
                r.temperature, r.repeats);
    for (const auto& [name, value] : r.means) {
        std::printf("  %-10s %.6f", name.c_str(), value);
        if (auto b = r.baseline.find(name); b != r.baseline.end()) {
            std::printf("   baseline %.6f   delta %+.2f%%", b->second, r.delta_pct.count(name) ? r.delta_pct.at(name) : 0.0);
        }
        std::printf("\n");
    }
    std::printf("  users evaluated %zu, skipped %zu, degraded %zu", r.users_evaluated, r.users_skipped, r.degraded);
    if (r.experiment == "rating") std::printf(", pairs %zu, excluded %zu", r.pairs_total, r.pairs_excluded);
    std::printf("\n");
    if (!r.valid) std::printf("  INVALID: %s\n", r.invalid_reason.c_str());
}

void write_json(const std::string& path, const json& j) {
    std::ofstream out(path);
    if (!out) throw Error("cannot write " + path);
    out << j.dump(2) << '\n';
}

httplib::Server* g_server = nullptr;

void handle_signal(int) {
    if (g_server) g_server->stop();
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Conversational movie recommender: candidate generation, LLM reranking and evaluation"};
    app.require_subcommand(1);

    // ingest ---------------------------------------------------------------
    DataOptions ingest_data;
    std::string ingest_out;
    auto* ingest = app.add_subcommand("ingest", "Load MovieLens-100K, sample users and split train/test");
    ingest_data.add(ingest);
    ingest->add_option("--out", ingest_out, "write the split manifest (JSON) here");
    ingest->callback([&] {
        const auto t0 = Clock::now();
        Dataset ds = load_movielens(ingest_data.data_dir);
        const double load_s = seconds_since(t0);
        std::printf("users %zu\nitems %zu\nratings %zu\ndensity %.4f%%\nload_seconds %.3f\n", ds.n_users(), ds.n_items(),
                    ds.events.size(), 100.0 * density(ds.events.size(), ds.n_users(), ds.n_items()), load_s);
        auto sampled = ingest_data.sample_users == 0
                           ? std::vector<UserId>{}
                           : sample_users(ds.users, ingest_data.sample_users, ingest_data.sampling_seed());
        DatasetSplit split = split_train_test(ds.events, ingest_data.policy(), ingest_data.splitting_seed());
        std::printf("split %s\ntrain %zu\ntest %zu\nsampled_users %zu\n", split.policy.describe().c_str(),
                    split.train.size(), split.test.size(), sampled.size());
        for (const auto& w : split.warnings) std::fprintf(stderr, "warning: %s\n", w.c_str());
        if (!ingest_out.empty()) write_json(ingest_out, split_manifest(split, sampled));
    });

    // train ----------------------------------------------------------------
    DataOptions train_data;
    ModelOptions train_model;
    std::string train_kind = "mf", train_out;
    bool train_full = false;
    auto* train = app.add_subcommand("train", "Train MF or Item-KNN and report held-out RMSE/MAE");
    train_data.add(train, false);
    train_model.add(train);
    train->add_option("--model", train_kind, "mf | itemknn")->check(CLI::IsMember({"mf", "itemknn"}))->capture_default_str();
    train->add_option("--out", train_out, "model file to write");
    train->add_flag("--full", train_full, "train on every rating (no held-out evaluation)");
    train->callback([&] {
        const auto t0 = Clock::now();
        Dataset ds = load_movielens(train_data.data_dir);
        std::vector<RatingEvent> events = ds.events, test;
        if (!train_full) {
            DatasetSplit split = split_train_test(ds.events, train_data.policy(), train_data.splitting_seed());
            events = std::move(split.train);
            test = std::move(split.test);
        }
        std::unique_ptr<Recommender> model;
        if (train_kind == "mf") {
            model = std::make_unique<MfModel>(MfModel::train(events, train_model.mf));
        } else {
            model = std::make_unique<ItemKnnModel>(ItemKnnModel::train(events, train_model.knn_params()));
        }
        std::printf("model %s\ntrain_events %zu\ntrain_seconds %.3f\n", model->name().c_str(), events.size(),
                    seconds_since(t0));
        if (!test.empty()) {
            std::vector<double> pred, truth;
            for (const auto& ev : test) {
                pred.push_back(model->predict_rating(ev.user, ev.item));
                truth.push_back(ev.rating);
            }
            std::printf("test_events %zu\ntest_rmse %.6f\ntest_mae %.6f\n", test.size(), rmse(pred, truth), mae(pred, truth));
        }
        if (!train_out.empty()) save_model(train_out, *model);
    });

    // prompt preview -------------------------------------------------------
    auto* prompt = app.add_subcommand("prompt", "Prompt tools");
    prompt->require_subcommand(1);
    DataOptions preview_data;
    ModelOptions preview_model;
    UserId preview_user = 0;
    std::string preview_variant = "standard", preview_candidates = "mf", preview_kind = "topk", preview_templates;
    std::int64_t preview_item = -1;
    double preview_temperature = 0.9;
    auto* preview = prompt->add_subcommand("preview", "Render the prompt a user would receive");
    preview_data.add(preview, false);
    preview_model.add(preview);
    preview->add_option("--user", preview_user)->required();
    preview->add_option("--kind", preview_kind, "topk | rating | summary")->capture_default_str();
    preview->add_option("--variant", preview_variant, "standard | w_random | w_top1")->capture_default_str();
    preview->add_option("--candidates", preview_candidates)->capture_default_str();
    preview->add_option("--item", preview_item, "target item for --kind rating");
    preview->add_option("--temperature", preview_temperature)->capture_default_str();
    preview->add_option("--templates", preview_templates, "directory overriding built-in templates");
    preview->callback([&] {
        Dataset ds = load_movielens(preview_data.data_dir);
        DatasetSplit split = split_train_test(ds.events, preview_data.policy(), preview_data.splitting_seed());
        PromptForge forge(ds.catalog, preview_templates.empty() ? TemplateSet::builtin() : TemplateSet::load_dir(preview_templates));
        const UserProfile& profile = ds.users.at(preview_user);
        auto summary = summarize_history(preview_user, split.train, ds.catalog);
        PromptBundle b;
        if (preview_kind == "topk") {
            auto source = make_candidates(preview_candidates, split.train, preview_model);
            auto hist = training_history(split.train);
            auto cands = source->top_n_candidates(preview_user, 20, hist[preview_user]);
            TopkOptions opts;
            opts.temperature = preview_temperature;
            opts.required_candidates = 0;
            b = forge.build_topk_prompt(profile, summary, cands, prompt_variant_from_string(preview_variant),
                                        preview_data.sampling_seed(), opts);
        } else if (preview_kind == "rating") {
            if (preview_item < 0) throw CLI::ValidationError("--item", "required for --kind rating");
            b = forge.build_rating_prompt(profile, summary, static_cast<ItemId>(preview_item), preview_temperature);
        } else if (preview_kind == "summary") {
            b = forge.build_preference_summary_prompt(profile, summary, preview_temperature);
        } else {
            throw CLI::ValidationError("--kind", "expected topk, rating or summary");
        }
        std::printf("[template] %s\n[variant] %s\n[temperature] %g\n[expected] %s\n[system]\n%s\n[user]\n%s\n",
                    b.template_name.c_str(), to_string(b.variant).c_str(), b.temperature,
                    to_string(b.expected_format).c_str(), b.system_text.c_str(), b.user_text.c_str());
        if (!b.candidate_order.empty()) {
            std::printf("[candidate_order]");
            for (ItemId id : b.candidate_order) std::printf(" %d", id);
            std::printf("\n");
        }
    });

    // llm probe ------------------------------------------------------------
    auto* llm = app.add_subcommand("llm", "Language model provider tools");
    llm->require_subcommand(1);
    std::string probe_provider = "stub", probe_text = "Reply with the single word OK.";
    auto* probe = llm->add_subcommand("probe", "Send one short request and print the answer");
    probe->add_option("--provider", probe_provider, "stub | stub:<script> | echo | http[:model]")->capture_default_str();
    probe->add_option("--text", probe_text)->capture_default_str();
    probe->callback([&] {
        auto provider = make_provider(probe_provider);
        CompletionRequest req;
        req.model_id = std::getenv("CHATREC_MODEL") ? std::getenv("CHATREC_MODEL") : "gpt-3.5-turbo";
        req.temperature = 0.0;
        req.messages = {{Role::user, probe_text}};
        const auto t0 = Clock::now();
        Completion c = provider->complete(req);
        std::printf("provider %s\nrequest_hash %s\nlatency_ms %.1f\nresponse %s\n", provider->id().c_str(),
                    req.hash().c_str(), seconds_since(t0) * 1000.0, c.text.c_str());
    });

    // eval -----------------------------------------------------------------
    auto* eval = app.add_subcommand("eval", "Offline experiments");
    eval->require_subcommand(1);
    struct EvalOptions {
        DataOptions data;
        ModelOptions model;
        ExperimentConfig exp;
        std::string candidates = "mf", provider = "echo", variant = "standard", out, report_dir, run_log,
                    baseline = "mf";
    };
    EvalOptions topk_opts, rating_opts;
    auto add_eval_options = [](CLI::App* cmd, EvalOptions& o) {
        o.data.add(cmd);
        o.model.add(cmd);
        cmd->add_option("--provider", o.provider, "echo | stub:<script> | http[:model]")->capture_default_str();
        cmd->add_option("--model-id", o.exp.model_id, "model name sent to the provider")->capture_default_str();
        cmd->add_option("--temperature", o.exp.temperature)->capture_default_str();
        cmd->add_option("--repeats", o.exp.repeats, "0 = 1 at temperature 0, else 5")->capture_default_str();
        cmd->add_option("--max-retries", o.exp.max_retries)->capture_default_str();
        cmd->add_option("--relevance-threshold", o.exp.relevance_threshold)->capture_default_str();
        cmd->add_option("--prompt-seed", o.exp.seed, "seed for shuffled candidate order")->capture_default_str();
        cmd->add_option("--workers", o.exp.workers, "concurrent users")->capture_default_str();
        cmd->add_option("--out", o.out, "write the report JSON here");
        cmd->add_option("--report-dir", o.report_dir, "also save the report into this directory");
        cmd->add_option("--run-log", o.run_log, "append every provider call to this JSON-lines file");
    };
    auto* eval_topk = eval->add_subcommand("topk", "Top-5 reranking of recommender candidates");
    add_eval_options(eval_topk, topk_opts);
    eval_topk->add_option("--candidates", topk_opts.candidates, "mf | itemknn | model:<file> | external:<file>")->capture_default_str();
    eval_topk->add_option("--variant", topk_opts.variant, "standard | w_random | w_top1")->capture_default_str();
    eval_topk->add_option("--candidate-count", topk_opts.exp.candidate_count)->capture_default_str();
    eval_topk->add_option("--k", topk_opts.exp.k)->capture_default_str();

    auto* eval_rating = eval->add_subcommand("rating", "Zero-shot rating prediction on held-out pairs");
    add_eval_options(eval_rating, rating_opts);
    eval_rating->add_option("--baseline", rating_opts.baseline, "mf | itemknn | model:<file> | none")->capture_default_str();
    eval_rating->add_option("--max-exclusion-rate", rating_opts.exp.max_exclusion_rate)->capture_default_str();

    auto finish_report = [](const MetricReport& r, const EvalOptions& o) {
        print_report(r);
        if (!o.out.empty()) write_json(o.out, r.to_json());
        if (!o.report_dir.empty()) std::printf("saved %s\n", save_report(r, o.report_dir).string().c_str());
    };

    eval_topk->callback([&] {
        auto& o = topk_opts;
        o.exp.variant = prompt_variant_from_string(o.variant);
        Dataset ds = load_movielens(o.data.data_dir);
        EvalData data = prepare_eval_data(ds, o.data.policy(), o.data.splitting_seed(), o.data.sample_users,
                                          o.data.sampling_seed());
        auto source = make_candidates(o.candidates, data.train, o.model);
        auto provider = make_provider(o.provider);
        std::unique_ptr<RunLog> log = o.run_log.empty() ? nullptr : std::make_unique<RunLog>(o.run_log);
        finish_report(run_topk_experiment(data, *source, *provider, o.exp, log.get()), o);
    });

    eval_rating->callback([&] {
        auto& o = rating_opts;
        Dataset ds = load_movielens(o.data.data_dir);
        EvalData data = prepare_eval_data(ds, o.data.policy(), o.data.splitting_seed(), o.data.sample_users,
                                          o.data.sampling_seed());
        std::unique_ptr<CandidateSource> base;
        const RatingPredictor* predictor = nullptr;
        if (o.baseline != "none") {
            base = make_candidates(o.baseline, data.train, o.model);
            predictor = dynamic_cast<const RatingPredictor*>(base.get());
            if (!predictor) throw CLI::ValidationError("--baseline", "source cannot predict ratings");
        }
        auto provider = make_provider(o.provider);
        std::unique_ptr<RunLog> log = o.run_log.empty() ? nullptr : std::make_unique<RunLog>(o.run_log);
        finish_report(run_rating_experiment(data, *provider, o.exp, predictor, base ? base->name() : "", log.get()), o);
    });

    // ablate ---------------------------------------------------------------
    EvalOptions ablate_opts;
    std::string ablate_variants = "standard,w_random,w_top1", ablate_temps = "0,0.3,0.6,0.9", ablate_csv = "ablation.csv",
                ablate_cells;
    auto* ablate = app.add_subcommand("ablate", "Prompt variant x temperature grid");
    add_eval_options(ablate, ablate_opts);
    ablate->add_option("--candidates", ablate_opts.candidates)->capture_default_str();
    ablate->add_option("--variants", ablate_variants)->capture_default_str();
    ablate->add_option("--temperatures", ablate_temps)->capture_default_str();
    ablate->add_option("--csv", ablate_csv, "grid summary, one row per cell")->capture_default_str();
    ablate->add_option("--cells-dir", ablate_cells, "per-cell CSV files with one row per repeat");
    ablate->callback([&] {
        auto& o = ablate_opts;
        std::vector<PromptVariant> variants;
        for (const auto& v : split_list(ablate_variants)) variants.push_back(prompt_variant_from_string(v));
        std::vector<double> temps;
        for (const auto& t : split_list(ablate_temps)) temps.push_back(std::stod(t));
        Dataset ds = load_movielens(o.data.data_dir);
        EvalData data = prepare_eval_data(ds, o.data.policy(), o.data.splitting_seed(), o.data.sample_users,
                                          o.data.sampling_seed());
        auto source = make_candidates(o.candidates, data.train, o.model);
        auto provider = make_provider(o.provider);
        std::unique_ptr<RunLog> log = o.run_log.empty() ? nullptr : std::make_unique<RunLog>(o.run_log);
        auto reports = run_ablation(data, *source, *provider, variants, temps, o.exp, log.get());
        for (const auto& r : reports) {
            print_report(r);
            if (!o.report_dir.empty()) save_report(r, o.report_dir);
        }
        write_ablation_csv(reports, ablate_csv);
        if (!ablate_cells.empty()) write_ablation_cells(reports, ablate_cells);
        if (!o.out.empty()) {
            json all = json::array();
            for (const auto& r : reports) all.push_back(r.to_json());
            write_json(o.out, all);
        }
        std::printf("wrote %s (%zu cells)\n", ablate_csv.c_str(), reports.size());
    });

    // coldstart ------------------------------------------------------------
    auto* coldstart = app.add_subcommand("coldstart", "New-item document cache");
    coldstart->require_subcommand(1);
    std::string cs_docs, cs_cache = "coldstart-cache", cs_provider = "stub", cs_text;
    std::size_t cs_k = 10;
    auto* cs_ingest = coldstart->add_subcommand("ingest", "Embed documents into the cache");
    cs_ingest->add_option("--docs", cs_docs, "JSON-lines documents")->required();
    cs_ingest->add_option("--cache-dir", cs_cache)->capture_default_str();
    cs_ingest->add_option("--provider", cs_provider, "embedding provider")->capture_default_str();
    cs_ingest->callback([&] {
        auto provider = make_provider(cs_provider);
        EmbeddingCache cache = std::filesystem::exists(std::filesystem::path(cs_cache) / "manifest.json")
                                   ? EmbeddingCache::load(cs_cache)
                                   : EmbeddingCache(provider->id());
        IngestReport rep = cache.ingest(load_docs(cs_docs), *provider);
        cache.save(cs_cache);
        std::printf("added %zu\nupdated %zu\nskipped %zu\nfailed %zu\ncache_size %zu\n", rep.added, rep.updated,
                    rep.skipped, rep.failures.size(), cache.size());
        for (const auto& [id, err] : rep.failures) std::fprintf(stderr, "error: %s: %s\n", id.c_str(), err.c_str());
    });
    auto* cs_query = coldstart->add_subcommand("query", "Retrieve the documents closest to a request");
    cs_query->add_option("--text", cs_text)->required();
    cs_query->add_option("--k", cs_k)->capture_default_str();
    cs_query->add_option("--cache-dir", cs_cache)->capture_default_str();
    cs_query->add_option("--provider", cs_provider)->capture_default_str();
    cs_query->callback([&] {
        auto provider = make_provider(cs_provider);
        EmbeddingCache cache = EmbeddingCache::load(cs_cache);
        for (const auto& r : cache.retrieve(cs_text, cs_k, *provider)) {
            std::printf("%.6f\t%s\t%s\n", r.similarity, r.doc_id.c_str(), cache.doc(r.doc_id).display_title().c_str());
        }
    });

    // serve ----------------------------------------------------------------
    std::string serve_config;
    int serve_port = -1;
    auto* serve = app.add_subcommand("serve", "Run the HTTP chat service");
    serve->add_option("--config", serve_config, "JSON config file");
    serve->add_option("--port", serve_port, "overrides the config port");
    serve->callback([&] {
        ServeConfig cfg = serve_config.empty() ? ServeConfig{} : ServeConfig::load(serve_config);
        cfg.apply_env();
        if (serve_port >= 0) cfg.port = serve_port;
        Dataset ds = load_movielens(cfg.data_dir);
        std::unique_ptr<CandidateSource> source;
        if (!cfg.model.empty()) {
            source = load_model(cfg.model);
        } else {
            source = make_candidates(cfg.candidates, ds.events, ModelOptions{});
        }
        auto provider = make_provider(cfg.provider);
        std::unique_ptr<EmbeddingCache> cache;
        if (!cfg.coldstart_dir.empty() && std::filesystem::exists(cfg.coldstart_dir / "manifest.json")) {
            cache = std::make_unique<EmbeddingCache>(EmbeddingCache::load(cfg.coldstart_dir));
        } else {
            cache = std::make_unique<EmbeddingCache>(provider->id());
        }
        std::unique_ptr<RunLog> log = cfg.run_log.empty() ? nullptr : std::make_unique<RunLog>(cfg.run_log);
        DialogueConfig dialogue = DialogueConfig::from_json(cfg.dialogue);
        ServiceOptions opts{cfg.reports_dir, cfg.coldstart_dir, cfg.cors_origin};
        ChatService service(ds.catalog, ds.users, ds.events, *source, {{"default", provider.get()}}, "default", dialogue,
                            opts, cache.get(), log.get());
        httplib::Server server;
        mount_routes(server, service);
        g_server = &server;
        std::signal(SIGINT, handle_signal);
        std::signal(SIGTERM, handle_signal);
        std::printf("listening on http://%s:%d (provider %s, candidates %s)\n", cfg.host.c_str(), cfg.port,
                    provider->id().c_str(), source->name().c_str());
        std::fflush(stdout);
        if (!server.listen(cfg.host, cfg.port)) throw Error("cannot listen on " + cfg.host + ":" + std::to_string(cfg.port));
        g_server = nullptr;
        if (!cfg.snapshot.empty()) write_json(cfg.snapshot.string(), service.snapshot());
    });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
