#include "chatrec/eval.hpp"

#include "chatrec/parse.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <exception>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <thread>

namespace chatrec {

using nlohmann::json;

namespace {

std::size_t hits_in_top_k(const std::vector<ItemId>& recommended, const std::set<ItemId>& relevant, std::size_t k) {
    std::set<ItemId> counted;
    const std::size_t n = std::min(k, recommended.size());
    for (std::size_t i = 0; i < n; ++i) {
        if (relevant.count(recommended[i])) counted.insert(recommended[i]);
    }
    return counted.size();
}

}  // namespace

double precision_at_k(const std::vector<ItemId>& recommended, const std::set<ItemId>& relevant, std::size_t k) {
    if (k == 0) throw std::invalid_argument("k must be at least 1");
    if (recommended.empty()) throw std::invalid_argument("empty recommendation list");
    return static_cast<double>(hits_in_top_k(recommended, relevant, k)) / static_cast<double>(k);
}

std::optional<double> recall_at_k(const std::vector<ItemId>& recommended, const std::set<ItemId>& relevant,
                                  std::size_t k) {
    if (k == 0) throw std::invalid_argument("k must be at least 1");
    if (relevant.empty()) return std::nullopt;
    return static_cast<double>(hits_in_top_k(recommended, relevant, k)) / static_cast<double>(relevant.size());
}

std::optional<double> ndcg_at_k(const std::vector<ItemId>& recommended, const std::set<ItemId>& relevant,
                                std::size_t k) {
    if (k == 0) throw std::invalid_argument("k must be at least 1");
    if (relevant.empty()) return std::nullopt;
    double dcg = 0.0;
    std::set<ItemId> seen;
    const std::size_t n = std::min(k, recommended.size());
    for (std::size_t i = 0; i < n; ++i) {
        if (relevant.count(recommended[i]) && seen.insert(recommended[i]).second) {
            dcg += 1.0 / std::log2(static_cast<double>(i + 2));
        }
    }
    double idcg = 0.0;
    const std::size_t ideal = std::min(k, relevant.size());
    for (std::size_t i = 0; i < ideal; ++i) idcg += 1.0 / std::log2(static_cast<double>(i + 2));
    return dcg / idcg;
}

namespace {

void check_pairs(const std::vector<double>& p, const std::vector<double>& t) {
    if (p.empty()) throw std::invalid_argument("no predictions");
    if (p.size() != t.size()) {
        throw std::invalid_argument("prediction/truth length mismatch: " + std::to_string(p.size()) + " vs " +
                                    std::to_string(t.size()));
    }
}

}  // namespace

double rmse(const std::vector<double>& predicted, const std::vector<double>& truth) {
    check_pairs(predicted, truth);
    double s = 0.0;
    for (std::size_t i = 0; i < predicted.size(); ++i) s += (predicted[i] - truth[i]) * (predicted[i] - truth[i]);
    return std::sqrt(s / static_cast<double>(predicted.size()));
}

double mae(const std::vector<double>& predicted, const std::vector<double>& truth) {
    check_pairs(predicted, truth);
    double s = 0.0;
    for (std::size_t i = 0; i < predicted.size(); ++i) s += std::abs(predicted[i] - truth[i]);
    return s / static_cast<double>(predicted.size());
}

const std::vector<ReferenceRow>& reference_rows() {
    static const std::vector<ReferenceRow> rows = {
        {"topk", "LightFM", {{"precision", 0.2830}, {"recall", 0.1410}, {"ndcg", 0.2846}}},
        {"topk", "LightGCN", {{"precision", 0.3030}, {"recall", 0.1455}, {"ndcg", 0.3425}}},
        {"topk", "gpt-3.5-turbo", {{"precision", 0.3103}, {"recall", 0.1279}, {"ndcg", 0.3696}}},
        {"topk", "text-davinci-003", {{"precision", 0.3240}, {"recall", 0.1404}, {"ndcg", 0.3802}}},
        {"topk", "text-davinci-002", {{"precision", 0.3031}, {"recall", 0.1240}, {"ndcg", 0.3629}}},
        {"rating", "MF", {{"rmse", 0.988}, {"mae", 0.771}}},
        {"rating", "Item-KNN", {{"rmse", 0.933}, {"mae", 0.734}}},
        {"rating", "gpt-3.5-turbo", {{"rmse", 0.969}, {"mae", 0.756}}},
        {"rating", "text-davinci-003", {{"rmse", 0.785}, {"mae", 0.593}}},
        {"rating", "text-davinci-002", {{"rmse", 0.8309}, {"mae", 0.6215}}},
        {"ablation", "text-davinci-003 standard t=0.9", {{"ndcg", 0.3802}}},
        {"ablation", "text-davinci-003 w_random t=0.9", {{"ndcg", 0.3653}}},
        {"ablation", "text-davinci-003 w_top1 t=0.9", {{"ndcg", 0.3055}}},
    };
    return rows;
}

namespace {

std::string utc_now() {
    std::time_t t = std::time(nullptr);
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

std::vector<ReferenceRow> references_for(const std::string& experiment) {
    std::vector<ReferenceRow> out;
    for (const auto& r : reference_rows()) {
        if (r.experiment == experiment || (experiment == "topk" && r.experiment == "ablation")) out.push_back(r);
    }
    return out;
}

}  // namespace

json MetricReport::to_json() const {
    json refs = json::array();
    for (const auto& r : reference) {
        refs.push_back({{"experiment", r.experiment}, {"model", r.model}, {"metrics", r.metrics}});
    }
    json j = {{"schema_version", kSchemaVersion},
              {"experiment", experiment},
              {"model_id", model_id},
              {"provider_id", provider_id},
              {"candidate_source", candidate_source},
              {"variant", chatrec::to_string(variant)},
              {"temperature", temperature},
              {"repeats", repeats},
              {"means", means},
              {"per_repeat", per_repeat},
              {"baseline", baseline},
              {"delta_pct", delta_pct},
              {"users_evaluated", users_evaluated},
              {"users_skipped", users_skipped},
              {"degraded", degraded},
              {"valid", valid},
              {"config", config},
              {"timestamp", timestamp},
              {"reference",
               {{"note", "published results for hosted models; comparison only, not reproducible offline"},
                {"rows", refs}}}};
    if (experiment == "rating") {
        j["pairs_total"] = pairs_total;
        j["pairs_excluded"] = pairs_excluded;
    }
    if (!valid) j["invalid_reason"] = invalid_reason;
    return j;
}

MetricReport MetricReport::from_json(const json& j) {
    if (j.value("schema_version", 0) != kSchemaVersion) throw Error("unsupported metric report schema");
    MetricReport r;
    r.experiment = j.at("experiment").get<std::string>();
    r.model_id = j.value("model_id", "");
    r.provider_id = j.value("provider_id", "");
    r.candidate_source = j.value("candidate_source", "");
    r.variant = prompt_variant_from_string(j.value("variant", "standard"));
    r.temperature = j.value("temperature", 0.0);
    r.repeats = j.value("repeats", 1);
    r.means = j.value("means", r.means);
    r.per_repeat = j.value("per_repeat", r.per_repeat);
    r.baseline = j.value("baseline", r.baseline);
    r.delta_pct = j.value("delta_pct", r.delta_pct);
    r.users_evaluated = j.value("users_evaluated", std::size_t{0});
    r.users_skipped = j.value("users_skipped", std::size_t{0});
    r.degraded = j.value("degraded", std::size_t{0});
    r.pairs_total = j.value("pairs_total", std::size_t{0});
    r.pairs_excluded = j.value("pairs_excluded", std::size_t{0});
    r.valid = j.value("valid", true);
    r.invalid_reason = j.value("invalid_reason", "");
    r.config = j.value("config", json::object());
    r.timestamp = j.value("timestamp", "");
    if (j.contains("reference")) {
        for (const auto& row : j.at("reference").value("rows", json::array())) {
            r.reference.push_back({row.at("experiment").get<std::string>(), row.at("model").get<std::string>(),
                                   row.at("metrics").get<std::map<std::string, double>>()});
        }
    }
    return r;
}

EvalData prepare_eval_data(const Dataset& data, const SplitPolicy& policy, std::uint64_t split_seed,
                           std::size_t sample_users, std::uint64_t sample_seed) {
    EvalData out;
    out.catalog = &data.catalog;
    out.users = &data.users;
    DatasetSplit split = split_train_test(data.events, policy, split_seed);
    out.eval_users = sample_users == 0 ? std::vector<UserId>{} : chatrec::sample_users(data.users, sample_users, sample_seed);
    if (sample_users == 0) {
        for (const auto& [id, _] : data.users) out.eval_users.push_back(id);
    }
    out.snapshot = split_manifest(split, out.eval_users);
    out.snapshot["sample_seed"] = sample_seed;
    out.train = std::move(split.train);
    out.test = std::move(split.test);
    return out;
}

int ExperimentConfig::effective_repeats() const {
    if (repeats < 0) throw std::invalid_argument("repeats must be >= 0");
    if (repeats > 0) return repeats;
    return temperature == 0.0 ? 1 : 5;
}

json ExperimentConfig::to_json() const {
    return {{"model_id", model_id},
            {"variant", chatrec::to_string(variant)},
            {"temperature", temperature},
            {"repeats", effective_repeats()},
            {"max_retries", max_retries},
            {"candidate_count", candidate_count},
            {"k", k},
            {"relevance", {{"kind", "binary"}, {"threshold", relevance_threshold}, {"discount", "log2(i+1)"}}},
            {"seed", seed},
            {"history_cap", history_cap},
            {"max_exclusion_rate", max_exclusion_rate},
            {"workers", workers}};
}

std::set<ItemId> relevant_items(const std::vector<RatingEvent>& test, UserId user, double threshold) {
    std::set<ItemId> out;
    for (const auto& ev : test) {
        if (ev.user == user && ev.rating >= threshold) out.insert(ev.item);
    }
    return out;
}

namespace {

/// Runs fn(i) for i in [0, n) on up to `workers` threads; rethrows the first failure.
template <class Fn>
void parallel_for(std::size_t n, std::size_t workers, Fn&& fn) {
    workers = std::max<std::size_t>(1, std::min(workers, n));
    if (workers == 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::exception_ptr> errors(workers);
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&, w] {
            try {
                for (std::size_t i = w; i < n; i += workers) fn(i);
            } catch (...) {
                errors[w] = std::current_exception();
            }
        });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }
}

double mean_of(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

void fill_deltas(MetricReport& r) {
    for (const auto& [name, base] : r.baseline) {
        auto it = r.means.find(name);
        if (it == r.means.end() || base == 0.0) continue;
        const bool lower_is_better = name == "rmse" || name == "mae";
        const double change = lower_is_better ? (base - it->second) / base : (it->second - base) / base;
        r.delta_pct[name] = 100.0 * change;
    }
}

std::map<UserId, std::vector<RatingEvent>> by_user(const std::vector<RatingEvent>& events) {
    std::map<UserId, std::vector<RatingEvent>> out;
    for (const auto& ev : events) out[ev.user].push_back(ev);
    return out;
}

}  // namespace

MetricReport run_topk_experiment(const EvalData& data, const CandidateSource& candidates, Provider& provider,
                                 const ExperimentConfig& config, RunLog* log) {
    if (!data.catalog || !data.users) throw std::invalid_argument("evaluation data has no catalog or user table");
    const int repeats = config.effective_repeats();
    PromptForge forge(*data.catalog);
    const auto train_by_user = by_user(data.train);
    const auto seen = training_history(data.train);

    struct UserCase {
        UserId user;
        std::set<ItemId> relevant;
        CandidateSet candidates;
    };
    std::vector<UserCase> cases;
    MetricReport report;
    for (UserId u : data.eval_users) {
        auto rel = relevant_items(data.test, u, config.relevance_threshold);
        if (rel.empty()) {
            ++report.users_skipped;
            continue;
        }
        auto s = seen.find(u);
        cases.push_back({u, std::move(rel),
                         candidates.top_n_candidates(u, config.candidate_count, s == seen.end() ? ItemSet{} : s->second)});
    }

    // Recommender's own top-k, independent of the model.
    std::vector<double> bp, br, bn;
    for (const auto& c : cases) {
        std::vector<ItemId> top = c.candidates.ids();
        if (top.size() > config.k) top.resize(config.k);
        if (top.empty()) continue;
        bp.push_back(precision_at_k(top, c.relevant, config.k));
        br.push_back(*recall_at_k(top, c.relevant, config.k));
        bn.push_back(*ndcg_at_k(top, c.relevant, config.k));
    }
    report.baseline = {{"precision", mean_of(bp)}, {"recall", mean_of(br)}, {"ndcg", mean_of(bn)}};

    for (int rep = 0; rep < repeats; ++rep) {
        std::vector<std::vector<ItemId>> lists(cases.size());
        std::vector<char> degraded(cases.size(), 0);
        parallel_for(cases.size(), config.workers, [&](std::size_t i) {
            const auto& c = cases[i];
            std::vector<ItemId> fallback = c.candidates.ids();
            if (fallback.size() > config.k) fallback.resize(config.k);
            if (c.candidates.size() < config.k) {
                lists[i] = fallback;
                degraded[i] = 1;
                return;
            }
            auto tb = train_by_user.find(c.user);
            const auto summary = summarize_history(c.user, tb == train_by_user.end() ? std::vector<RatingEvent>{} : tb->second,
                                                   *data.catalog, config.history_cap);
            TopkOptions opts;
            opts.count = config.k;
            opts.required_candidates = 0;
            opts.temperature = config.temperature;
            const std::uint64_t seed =
                mix_seed(mix_seed(config.seed, static_cast<std::uint64_t>(c.user)), static_cast<std::uint64_t>(rep));
            const auto bundle =
                forge.build_topk_prompt(data.users->at(c.user), summary, c.candidates, config.variant, seed, opts);
            CompletionRequest req = make_request(bundle, config.model_id, {}, data.catalog);
            req.annotations["user"] = c.user;
            req.annotations["repeat"] = rep;
            const TitleIndex index = TitleIndex::from_items(*data.catalog, c.candidates.ids());
            try {
                auto parsed = complete_with_retry<RankedList>(
                    provider, req, [&](std::string_view t) { return parse_ranked_list(t, config.k, index); },
                    config.max_retries, log);
                lists[i] = parsed.value.ids;
            } catch (const RetryExhaustedError& e) {
                lists[i] = fallback;
                degraded[i] = 1;
                if (log) log->note({{"event", "degraded_fallback"}, {"user", c.user}, {"repeat", rep}, {"detail", e.what()}});
            }
        });
        std::vector<double> p, r, n;
        for (std::size_t i = 0; i < cases.size(); ++i) {
            if (lists[i].empty()) continue;
            report.degraded += static_cast<std::size_t>(degraded[i]);
            p.push_back(precision_at_k(lists[i], cases[i].relevant, config.k));
            r.push_back(*recall_at_k(lists[i], cases[i].relevant, config.k));
            n.push_back(*ndcg_at_k(lists[i], cases[i].relevant, config.k));
        }
        report.per_repeat["precision"].push_back(mean_of(p));
        report.per_repeat["recall"].push_back(mean_of(r));
        report.per_repeat["ndcg"].push_back(mean_of(n));
    }

    for (const auto& [name, values] : report.per_repeat) report.means[name] = mean_of(values);
    report.experiment = "topk";
    report.model_id = config.model_id;
    report.provider_id = provider.id();
    report.candidate_source = candidates.name();
    report.variant = config.variant;
    report.temperature = config.temperature;
    report.repeats = repeats;
    report.users_evaluated = cases.size();
    report.config = {{"experiment", config.to_json()}, {"data", data.snapshot}};
    report.timestamp = utc_now();
    report.reference = references_for("topk");
    fill_deltas(report);
    return report;
}

MetricReport run_rating_experiment(const EvalData& data, Provider& provider, const ExperimentConfig& config,
                                   const RatingPredictor* baseline, const std::string& baseline_name, RunLog* log) {
    if (!data.catalog || !data.users) throw std::invalid_argument("evaluation data has no catalog or user table");
    const int repeats = config.effective_repeats();
    PromptForge forge(*data.catalog);
    const auto train_by_user = by_user(data.train);
    const auto test_by_user = by_user(data.test);

    struct Pair {
        UserId user;
        ItemId item;
        double truth;
        std::size_t summary;  // index into summaries
    };
    std::vector<InteractionSummary> summaries;
    std::vector<Pair> pairs;
    MetricReport report;
    for (UserId u : data.eval_users) {
        auto t = test_by_user.find(u);
        if (t == test_by_user.end()) {
            ++report.users_skipped;
            continue;
        }
        auto tb = train_by_user.find(u);
        summaries.push_back(summarize_history(u, tb == train_by_user.end() ? std::vector<RatingEvent>{} : tb->second,
                                              *data.catalog, config.history_cap));
        ++report.users_evaluated;
        for (const auto& ev : t->second) pairs.push_back({u, ev.item, static_cast<double>(ev.rating), summaries.size() - 1});
    }
    if (pairs.empty()) throw std::invalid_argument("no held-out pairs to predict");

    if (baseline) {
        std::vector<double> pred, truth;
        for (const auto& p : pairs) {
            pred.push_back(baseline->predict_rating(p.user, p.item));
            truth.push_back(p.truth);
        }
        report.baseline = {{"rmse", rmse(pred, truth)}, {"mae", mae(pred, truth)}};
    }

    std::size_t worst_excluded = 0;
    for (int rep = 0; rep < repeats; ++rep) {
        std::vector<std::optional<double>> answers(pairs.size());
        parallel_for(pairs.size(), config.workers, [&](std::size_t i) {
            const auto& p = pairs[i];
            const auto bundle = forge.build_rating_prompt(data.users->at(p.user), summaries[p.summary], p.item,
                                                          config.temperature);
            CompletionRequest req = make_request(bundle, config.model_id);
            req.annotations["user"] = p.user;
            req.annotations["item"] = p.item;
            req.annotations["repeat"] = rep;
            try {
                answers[i] = complete_with_retry<double>(provider, req, parse_rating, config.max_retries, log).value;
            } catch (const RetryExhaustedError& e) {
                if (log) {
                    log->note({{"event", "rating_excluded"}, {"user", p.user}, {"item", p.item}, {"repeat", rep},
                               {"detail", e.what()}});
                }
            }
        });
        std::vector<double> pred, truth;
        std::size_t excluded = 0;
        for (std::size_t i = 0; i < pairs.size(); ++i) {
            if (!answers[i]) {
                ++excluded;
                continue;
            }
            pred.push_back(*answers[i]);
            truth.push_back(pairs[i].truth);
        }
        worst_excluded = std::max(worst_excluded, excluded);
        report.pairs_excluded += excluded;
        if (pred.empty()) {
            report.valid = false;
            report.invalid_reason = "no rating answer could be parsed";
            continue;
        }
        report.per_repeat["rmse"].push_back(rmse(pred, truth));
        report.per_repeat["mae"].push_back(mae(pred, truth));
    }
    report.pairs_total = pairs.size() * static_cast<std::size_t>(repeats);
    const double rate = static_cast<double>(worst_excluded) / static_cast<double>(pairs.size());
    if (report.valid && rate > config.max_exclusion_rate) {
        report.valid = false;
        std::ostringstream why;
        why << "excluded " << worst_excluded << " of " << pairs.size() << " pairs in a repeat (limit "
            << config.max_exclusion_rate * 100.0 << "%)";
        report.invalid_reason = why.str();
    }

    for (const auto& [name, values] : report.per_repeat) report.means[name] = mean_of(values);
    report.experiment = "rating";
    report.model_id = config.model_id;
    report.provider_id = provider.id();
    report.candidate_source = baseline_name;
    report.variant = PromptVariant::standard;
    report.temperature = config.temperature;
    report.repeats = repeats;
    report.config = {{"experiment", config.to_json()}, {"data", data.snapshot}};
    report.timestamp = utc_now();
    report.reference = references_for("rating");
    fill_deltas(report);
    return report;
}

std::vector<MetricReport> run_ablation(const EvalData& data, const CandidateSource& candidates, Provider& provider,
                                       const std::vector<PromptVariant>& variants,
                                       const std::vector<double>& temperatures, const ExperimentConfig& base,
                                       RunLog* log) {
    if (variants.empty() || temperatures.empty()) throw std::invalid_argument("ablation grid is empty");
    std::vector<MetricReport> out;
    for (PromptVariant v : variants) {
        for (double t : temperatures) {
            ExperimentConfig cfg = base;
            cfg.variant = v;
            cfg.temperature = t;
            cfg.repeats = 0;
            out.push_back(run_topk_experiment(data, candidates, provider, cfg, log));
        }
    }
    return out;
}

namespace {

std::string fmt(double x) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.10g", x);
    return buf;
}

std::ofstream open_out(const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw Error("cannot write " + path.string());
    return out;
}

}  // namespace

void write_ablation_csv(const std::vector<MetricReport>& reports, const std::filesystem::path& path) {
    auto out = open_out(path);
    out << "variant,temperature,repeats,precision,recall,ndcg,degraded\n";
    for (const auto& r : reports) {
        out << to_string(r.variant) << ',' << fmt(r.temperature) << ',' << r.repeats << ','
            << fmt(r.means.at("precision")) << ',' << fmt(r.means.at("recall")) << ',' << fmt(r.means.at("ndcg"))
            << ',' << r.degraded << '\n';
    }
}

void write_ablation_cells(const std::vector<MetricReport>& reports, const std::filesystem::path& dir) {
    for (const auto& r : reports) {
        auto out = open_out(dir / (to_string(r.variant) + "_t" + fmt(r.temperature) + ".csv"));
        out << "repeat,precision,recall,ndcg\n";
        for (int i = 0; i < r.repeats; ++i) {
            const auto at = static_cast<std::size_t>(i);
            out << i + 1 << ',' << fmt(r.per_repeat.at("precision").at(at)) << ','
                << fmt(r.per_repeat.at("recall").at(at)) << ',' << fmt(r.per_repeat.at("ndcg").at(at)) << '\n';
        }
    }
}

std::filesystem::path save_report(const MetricReport& report, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    const json j = report.to_json();
    std::string stamp = report.timestamp;
    std::replace(stamp.begin(), stamp.end(), ':', '-');
    const std::string name = report.experiment + "_" + to_string(report.variant) + "_t" + fmt(report.temperature) +
                             "_" + stamp + "_" + to_hex(fnv1a64(j.dump())).substr(0, 8) + ".json";
    const auto path = dir / name;
    open_out(path) << j.dump(2) << '\n';
    return path;
}

std::vector<std::pair<std::filesystem::path, MetricReport>> list_reports(const std::filesystem::path& dir) {
    std::vector<std::pair<std::filesystem::path, MetricReport>> out;
    if (!std::filesystem::is_directory(dir)) return out;
    std::vector<std::filesystem::path> files;
    for (const auto& e : std::filesystem::directory_iterator(dir)) {
        if (e.is_regular_file() && e.path().extension() == ".json") files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
        try {
            std::ifstream in(f);
            out.emplace_back(f, MetricReport::from_json(json::parse(in)));
        } catch (const std::exception&) {
            // not a report
        }
    }
    return out;
}

}  // namespace chatrec
