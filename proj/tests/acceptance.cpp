// Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any fails.

#include "chatrec/coldstart.hpp"
#include "chatrec/eval.hpp"
#include "chatrec/parse.hpp"
#include "chatrec/recsys.hpp"

#include <httplib.h>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <functional>
#include <random>
#include <sstream>
#include <thread>
#include <unistd.h>

using namespace chatrec;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

struct Criterion {
    std::string name;
    std::function<Outcome()> run;
};

fs::path fixtures() { return CHATREC_FIXTURES_DIR; }

fs::path data_dir() {
    if (const char* env = std::getenv("CHATREC_DATA_DIR")) return env;
    return CHATREC_TEST_DATA_DIR;
}

const Dataset& movielens() {
    static const Dataset ds = load_movielens(data_dir());
    return ds;
}

const Dataset& micro() {
    static const Dataset ds = load_movielens(fixtures() / "micro");
    return ds;
}

const ExternalScores& micro_scores() {
    static const ExternalScores s = ExternalScores::load(fixtures() / "micro" / "scores.csv");
    return s;
}

const EvalData& micro_data() {
    static const EvalData d = prepare_eval_data(micro(), SplitPolicy::parse("holdout:0.2"), 1, 0, 1);
    return d;
}

ExperimentConfig micro_config() {
    ExperimentConfig c;
    c.temperature = 0.0;
    c.seed = 1;
    return c;
}

fs::path scratch_dir() {
    static int n = 0;
    auto p = fs::temp_directory_path() / ("chatrec_acceptance_" + std::to_string(::getpid()) + "_" + std::to_string(n++));
    fs::create_directories(p);
    return p;
}

std::string read_file(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

std::string num(double x, int digits = 4) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", digits, x);
    return buf;
}

bool close(double a, double b, double tol) { return std::abs(a - b) <= tol; }

// ---------------------------------------------------------------------------

Outcome dataset_fidelity() {
    const auto t0 = std::chrono::steady_clock::now();
    const Dataset ds = load_movielens(data_dir());
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const double dens = density(ds.events.size(), ds.users.size(), ds.catalog.size()) * 100.0;
    const bool ok = ds.users.size() == 943 && ds.catalog.size() == 1682 && ds.events.size() == 100000 &&
                    close(dens, 6.304, 0.001) && secs < 5.0;
    return {ok, std::to_string(ds.users.size()) + " users, " + std::to_string(ds.catalog.size()) + " items, " +
                    std::to_string(ds.events.size()) + " ratings, density " + num(dens, 4) + "%, " + num(secs, 2) +
                    " s"};
}

Outcome baseline_bands() {
    const auto t0 = std::chrono::steady_clock::now();
    const auto split = split_train_test(movielens().events, SplitPolicy::parse("random-holdout:0.2"), 42);
    const auto mf = MfModel::train(split.train, MfHyperParams{});
    const auto knn = ItemKnnModel::train(split.train, KnnParams{});
    std::vector<double> truth, pm, pk;
    for (const auto& e : split.test) {
        truth.push_back(e.rating);
        pm.push_back(mf.predict_rating(e.user, e.item));
        pk.push_back(knn.predict_rating(e.user, e.item));
    }
    const double knn_rmse = rmse(pk, truth), knn_mae = mae(pk, truth);
    const double mf_rmse = rmse(pm, truth), mf_mae = mae(pm, truth);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool ok = knn_rmse >= 0.88 && knn_rmse <= 0.98 && knn_mae >= 0.69 && knn_mae <= 0.78 && mf_rmse >= 0.90 &&
                    mf_rmse <= 1.02 && mf_mae >= 0.71 && mf_mae <= 0.81 && secs < 300.0;
    return {ok, "itemknn RMSE " + num(knn_rmse) + " MAE " + num(knn_mae) + ", mf RMSE " + num(mf_rmse) + " MAE " +
                    num(mf_mae) + " (random-holdout:0.2, seed 42), " + num(secs, 1) + " s"};
}

Outcome metric_oracle() {
    std::mt19937_64 gen(99);
    std::size_t bad = 0;
    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t k = 1 + gen() % 10;
        std::vector<ItemId> pool(50);
        for (std::size_t i = 0; i < pool.size(); ++i) pool[i] = static_cast<ItemId>(i + 1);
        std::shuffle(pool.begin(), pool.end(), gen);
        const std::vector<ItemId> rec(pool.begin(), pool.begin() + static_cast<long>(k));
        std::set<ItemId> rel;
        const std::size_t nrel = 1 + gen() % 15;
        for (std::size_t i = 0; i < nrel; ++i) rel.insert(static_cast<ItemId>(1 + gen() % 50));

        std::size_t hits = 0;
        double dcg = 0.0, idcg = 0.0;
        for (std::size_t i = 0; i < k; ++i) {
            if (rel.count(rec[i])) {
                ++hits;
                dcg += 1.0 / std::log2(static_cast<double>(i) + 2.0);
            }
        }
        for (std::size_t i = 0; i < std::min(k, rel.size()); ++i) idcg += 1.0 / std::log2(static_cast<double>(i) + 2.0);
        const double p = static_cast<double>(hits) / static_cast<double>(k);
        const double r = static_cast<double>(hits) / static_cast<double>(rel.size());
        bad += !close(precision_at_k(rec, rel, k), p, 1e-9);
        bad += !close(*recall_at_k(rec, rel, k), r, 1e-9);
        bad += !close(*ndcg_at_k(rec, rel, k), dcg / idcg, 1e-9);

        std::uniform_real_distribution<double> u(1.0, 5.0);
        std::vector<double> a(k), b(k);
        double sq = 0.0, ab = 0.0;
        for (std::size_t i = 0; i < k; ++i) {
            a[i] = u(gen);
            b[i] = u(gen);
            sq += (a[i] - b[i]) * (a[i] - b[i]);
            ab += std::abs(a[i] - b[i]);
        }
        bad += !close(rmse(a, b), std::sqrt(sq / static_cast<double>(k)), 1e-12);
        bad += !close(mae(a, b), ab / static_cast<double>(k), 1e-12);
    }
    return {bad == 0, "1000 instances, " + std::to_string(bad) + " mismatches"};
}

Outcome parser_corpus() {
    const TitleIndex index = TitleIndex::from_catalog(movielens().catalog);
    std::ifstream in(fixtures() / "parser_corpus.jsonl");
    std::string line;
    std::size_t cases = 0, wrong = 0;
    std::set<std::string> classes;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const json c = json::parse(line);
        ++cases;
        classes.insert(c.at("class").get<std::string>());
        const auto got = parse_ranked_list(c.at("text").get<std::string>(), c.at("expected_n").get<std::size_t>(), index);
        const auto& expect = c.at("expect");
        if (expect.contains("ids")) {
            wrong += !(got.ok() && got.value().ids == expect.at("ids").get<std::vector<int>>());
        } else {
            wrong += !(!got.ok() && to_string(got.error().kind) == expect.at("error").get<std::string>());
        }
    }
    bool all_classes = true;
    for (const char* cls : {"well_formed", "misplaced_article", "wrong_count", "lost_id"}) all_classes &= classes.count(cls) > 0;

    const bool articles = normalize_title("The Shawshank Redemption (1994)") == "Shawshank Redemption, The (1994)" &&
                          normalize_title("A Fish Called Wanda (1988)") == "Fish Called Wanda, A (1988)";
    std::size_t not_idempotent = 0;
    for (const auto& item : movielens().catalog.items()) {
        const auto once = normalize_title(item.title);
        not_idempotent += normalize_title(once) != once;
    }
    const bool ok = cases > 0 && wrong == 0 && all_classes && articles && not_idempotent == 0 &&
                    movielens().catalog.size() == 1682;
    return {ok, std::to_string(cases) + " cases, " + std::to_string(wrong) + " wrong; article examples " +
                    (articles ? "ok" : "wrong") + "; " + std::to_string(not_idempotent) +
                    " non-idempotent titles of " + std::to_string(movielens().catalog.size())};
}

Outcome stub_pipeline() {
    const auto dir = scratch_dir();
    const auto m = fixtures() / "micro";
    const std::string cmd = std::string("\"") + CHATREC_CLI + "\" eval topk --data-dir \"" + m.string() +
                            "\" --sample-users 0 --seed 1 --candidates \"external:" + (m / "scores.csv").string() +
                            "\" --provider \"stub:" + (m / "script.jsonl").string() + "\" --temperature 0 --out \"" +
                            (dir / "r.json").string() + "\" > \"" + (dir / "out.txt").string() + "\" 2>&1";
    const int rc = std::system(cmd.c_str());
    bool scripted = false;
    std::string means = "cli exit " + std::to_string(rc);
    if (rc == 0) {
        const json j = json::parse(read_file(dir / "r.json")).at("means");
        // hand-computed from the script: see tests/oracles/micro_fixture.py
        scripted = j.at("precision").get<double>() == 0.2 && j.at("recall").get<double>() == 7.0 / 9.0 &&
                   close(j.at("ndcg").get<double>(), 0.6616984345289096, 1e-15);
        means = "scripted P " + num(j.at("precision").get<double>()) + " R " + num(j.at("recall").get<double>()) +
                " NDCG " + num(j.at("ndcg").get<double>());
    }
    fs::remove_all(dir);

    EchoProvider echo;
    auto cfg = micro_config();
    const auto standard = run_topk_experiment(micro_data(), micro_scores(), echo, cfg);
    cfg.variant = PromptVariant::w_random;
    const auto shuffled = run_topk_experiment(micro_data(), micro_scores(), echo, cfg);
    bool echo_equal = true, random_equal = true;
    for (const char* k : {"precision", "recall", "ndcg"}) {
        echo_equal &= standard.means.at(k) == standard.baseline.at(k);
        random_equal &= shuffled.means.at(k) == standard.means.at(k);
    }
    return {scripted && echo_equal && random_equal,
            means + "; echo == baseline: " + (echo_equal ? "yes" : "no") + "; w_random unchanged: " +
                (random_equal ? "yes" : "no")};
}

Outcome retry_semantics() {
    const TitleIndex index({{1, "Toy Story (1995)"}, {2, "Fargo (1996)"}, {3, "Heat (1995)"}});
    const std::string good = "The current list is:\n1.Fargo (1996)\n2.Heat (1995)\n3.Toy Story (1995)";
    const std::string bad = "The current list is:\na:Fargo (1996)\nb:Heat (1995)\nc:Toy Story (1995)";
    auto parser = [&](std::string_view t) { return parse_ranked_list(t, 3, index); };
    CompletionRequest req;
    req.model_id = "m";
    req.temperature = 0.0;
    req.messages = {{Role::system, "sys"}, {Role::user, "list three"}};
    const int max_retries = 3;

    const auto dir = scratch_dir();
    bool second_ok = false, exhausted = false;
    {
        auto provider = ScriptedProvider::sequence({bad, good});
        RunLog log(dir / "retry.jsonl");
        const auto r = complete_with_retry<RankedList>(provider, req, parser, max_retries, &log);
        second_ok = r.attempts == 2 && r.value.ids == std::vector<int>{2, 3, 1};
    }
    {
        auto provider = ScriptedProvider::sequence(std::vector<std::string>(max_retries + 1, bad));
        RunLog log(dir / "exhaust.jsonl");
        try {
            complete_with_retry<RankedList>(provider, req, parser, max_retries, &log);
        } catch (const RetryExhaustedError& e) {
            exhausted = e.attempts() == static_cast<std::size_t>(max_retries + 1);
        }
    }
    auto lines = [&](const fs::path& p) {
        std::vector<json> out;
        std::ifstream in(p);
        std::string l;
        while (std::getline(in, l)) {
            if (!l.empty()) out.push_back(json::parse(l));
        }
        return out;
    };
    const auto a = lines(dir / "retry.jsonl"), b = lines(dir / "exhaust.jsonl");
    bool transcripts = a.size() == 2 && a[0].at("response") == bad && a[1].at("response") == good &&
                       a[0].at("parse_outcome") == "lost_id" && a[1].at("parse_outcome") == "ok" &&
                       b.size() == static_cast<std::size_t>(max_retries + 1);
    for (const auto& e : a) transcripts &= e.contains("messages") && e.at("messages").size() == 2;
    for (const auto& e : b) transcripts &= e.at("response") == bad;
    fs::remove_all(dir);
    return {second_ok && exhausted && transcripts,
            std::string("[malformed, well-formed] ") + (second_ok ? "succeeds on attempt 2" : "wrong") +
                "; malformed x" + std::to_string(max_retries + 1) + " " + (exhausted ? "exhausts" : "wrong") +
                "; run log " + (transcripts ? "complete" : "incomplete")};
}

Outcome coldstart_retrieval() {
    Rng rng(2023);
    EmbeddingCache cache("synthetic");
    std::vector<std::pair<std::string, std::vector<double>>> rows;
    for (int i = 0; i < 1000; ++i) {
        std::vector<double> v(16);
        if (i % 10 == 9) {
            v = rows[rng.below(static_cast<std::uint64_t>(i))].second;
        } else {
            do {
                for (auto& x : v) x = static_cast<double>(rng.below(5)) - 2.0;
            } while (std::all_of(v.begin(), v.end(), [](double x) { return x == 0.0; }));
        }
        char id[16];
        std::snprintf(id, sizeof id, "doc-%04d", i);
        cache.put({id, std::string("Doc ") + id, 1999, "synthetic vector", "synthetic"}, v);
        rows.emplace_back(id, v);
    }
    auto unit = [](std::vector<double> v) {
        double s = 0.0;
        for (double x : v) s += x * x;
        for (double& x : v) x /= std::sqrt(s);
        return v;
    };
    std::size_t mismatches = 0, ties = 0;
    for (int q = 0; q < 100; ++q) {
        const auto query = rows[rng.below(rows.size())].second;
        const auto uq = unit(query);
        std::vector<Retrieved> all;
        for (const auto& [id, v] : rows) {
            const auto uv = unit(v);
            double dot = 0.0;
            for (std::size_t i = 0; i < uv.size(); ++i) dot += uq[i] * uv[i];
            all.push_back({id, dot});
        }
        std::sort(all.begin(), all.end(), [](const Retrieved& a, const Retrieved& b) {
            return a.similarity != b.similarity ? a.similarity > b.similarity : a.doc_id < b.doc_id;
        });
        const auto got = cache.retrieve_vector(query, 10);
        if (got.size() != 10) {
            ++mismatches;
            continue;
        }
        for (std::size_t i = 0; i < 10; ++i) {
            mismatches += got[i].doc_id != all[i].doc_id || !close(got[i].similarity, all[i].similarity, 1e-12);
            if (i > 0 && got[i].similarity == got[i - 1].similarity) ++ties;
        }
    }

    const auto dir = scratch_dir();
    cache.save(dir);
    const auto back = EmbeddingCache::load(dir);
    bool identical = back.size() == cache.size() && back.model_id() == cache.model_id();
    for (const auto& id : cache.doc_ids()) {
        const auto a = cache.vector(id), b = back.vector(id);
        identical &= a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
    }
    fs::remove_all(dir);
    return {mismatches == 0 && ties > 0 && identical,
            "100 queries over 1000 vectors, " + std::to_string(mismatches) + " mismatches, " + std::to_string(ties) +
                " tied positions; reload " + (identical ? "bit-identical" : "differs")};
}

Outcome ablation_protocol() {
    EchoProvider echo;
    const std::vector<PromptVariant> variants{PromptVariant::standard, PromptVariant::w_random, PromptVariant::w_top1};
    const std::vector<double> temps{0.0, 0.9};
    const auto reports = run_ablation(micro_data(), micro_scores(), echo, variants, temps, micro_config());
    bool repeats_ok = reports.size() == 6;
    for (const auto& r : reports) {
        repeats_ok &= r.repeats == (r.temperature == 0.0 ? 1 : 5) &&
                      r.per_repeat.at("ndcg").size() == static_cast<std::size_t>(r.repeats);
    }
    const auto dir = scratch_dir();
    write_ablation_csv(reports, dir / "ablation.csv");
    std::ifstream in(dir / "ablation.csv");
    std::string line;
    std::size_t rows = 0;
    std::getline(in, line);
    const bool header = line == "variant,temperature,repeats,precision,recall,ndcg,degraded";
    while (std::getline(in, line)) rows += !line.empty();
    fs::remove_all(dir);
    return {repeats_ok && header && rows == 6,
            std::to_string(reports.size()) + " cells, repeats " + (repeats_ok ? "1 at T=0 and 5 otherwise" : "wrong") +
                ", " + std::to_string(rows) + " CSV rows"};
}

Outcome reference_and_live_mode() {
    EchoProvider echo;
    const json j = run_topk_experiment(micro_data(), micro_scores(), echo, micro_config()).to_json();
    const auto& rows = j.at("reference").at("rows");
    bool has_rows = j.at("reference").contains("note") && !rows.empty();
    bool ndcg_row = false;
    for (const auto& r : rows) {
        ndcg_row |= r.at("model") == "text-davinci-003" && r.at("experiment") == "topk" &&
                    r.at("metrics").at("ndcg").get<double>() == 0.3802;
    }
    bool rmse_row = false;
    for (const auto& r : reference_rows()) {
        rmse_row |= r.experiment == "rating" && r.model == "text-davinci-003" && r.metrics.at("rmse") == 0.785;
    }

    // The live mode talks to any chat-completion endpoint; a local one stands in for the hosted API.
    httplib::Server server;
    std::string seen_auth;
    server.Post("/v1/chat/completions", [&](const httplib::Request& req, httplib::Response& res) {
        seen_auth = req.get_header_value("Authorization");
        const json body = json::parse(req.body);
        json out = {{"choices", {{{"message", {{"role", "assistant"}, {"content", "4"}}}}}},
                    {"model", body.at("model")},
                    {"usage", {{"prompt_tokens", 10}, {"completion_tokens", 1}}}};
        res.set_content(out.dump(), "application/json");
    });
    const int port = server.bind_to_any_port("127.0.0.1");
    std::thread th([&] { server.listen_after_bind(); });
    server.wait_until_ready();
    ::setenv("CHATREC_API_BASE", ("http://127.0.0.1:" + std::to_string(port) + "/v1").c_str(), 1);
    ::setenv("CHATREC_API_KEY", "test-key", 1);
    bool live = false;
    std::string id;
    try {
        auto provider = make_provider("http:local-model");
        id = provider->id();
        CompletionRequest req;
        req.model_id = "local-model";
        req.temperature = 0.0;
        req.messages = {{Role::user, "rate it"}};
        live = provider->complete(req).text == "4" && seen_auth == "Bearer test-key" && id == "http:local-model";
    } catch (const std::exception&) {
        live = false;
    }
    ::unsetenv("CHATREC_API_BASE");
    ::unsetenv("CHATREC_API_KEY");
    server.stop();
    th.join();
    return {has_rows && ndcg_row && rmse_row && live,
            std::to_string(rows.size()) + " reference rows in top-k reports (NDCG 0.3802 " +
                (ndcg_row ? "present" : "missing") + ", RMSE 0.785 " + (rmse_row ? "present" : "missing") +
                "); live provider " + (live ? "round trip ok" : "failed")};
}

}  // namespace

int main() {
    const std::vector<Criterion> criteria = {
        {"dataset fidelity", dataset_fidelity},
        {"baseline reproduction", baseline_bands},
        {"metric oracle equivalence", metric_oracle},
        {"parser corpus", parser_corpus},
        {"end-to-end stub pipeline", stub_pipeline},
        {"retry semantics", retry_semantics},
        {"cold-start retrieval", coldstart_retrieval},
        {"ablation protocol", ablation_protocol},
        {"reference rows and live mode", reference_and_live_mode},
    };
    int failed = 0;
    for (const auto& c : criteria) {
        Outcome o;
        try {
            o = c.run();
        } catch (const std::exception& e) {
            o = {false, std::string("error: ") + e.what()};
        }
        failed += !o.pass;
        std::printf("%s  %-30s %s\n", o.pass ? "PASS" : "FAIL", c.name.c_str(), o.detail.c_str());
        std::fflush(stdout);
    }
    std::printf("%zu/%zu criteria passed\n", criteria.size() - static_cast<std::size_t>(failed), criteria.size());
    return failed ? 1 : 0;
}
