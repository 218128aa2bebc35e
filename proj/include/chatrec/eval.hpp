#pragma once

#include "chatrec/dataset.hpp"
#include "chatrec/llm.hpp"
#include "chatrec/prompt.hpp"
#include "chatrec/recsys.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace chatrec {

// Ranking metrics use binary relevance and a log2(i + 1) discount over
// 1-based positions. Recall and NDCG return nullopt when nothing is relevant.

double precision_at_k(const std::vector<ItemId>& recommended, const std::set<ItemId>& relevant, std::size_t k);
std::optional<double> recall_at_k(const std::vector<ItemId>& recommended, const std::set<ItemId>& relevant,
                                  std::size_t k);
std::optional<double> ndcg_at_k(const std::vector<ItemId>& recommended, const std::set<ItemId>& relevant,
                                std::size_t k);
double rmse(const std::vector<double>& predicted, const std::vector<double>& truth);
double mae(const std::vector<double>& predicted, const std::vector<double>& truth);

/// Published numbers for hosted models, kept for comparison only.
struct ReferenceRow {
    std::string experiment;  // "topk", "rating" or "ablation"
    std::string model;
    std::map<std::string, double> metrics;
};

const std::vector<ReferenceRow>& reference_rows();

struct MetricReport {
    static constexpr int kSchemaVersion = 1;

    std::string experiment;  // "topk" or "rating"
    std::string model_id;
    std::string provider_id;
    std::string candidate_source;
    PromptVariant variant = PromptVariant::standard;
    double temperature = 0.0;
    int repeats = 1;
    std::map<std::string, double> means;
    std::map<std::string, std::vector<double>> per_repeat;
    /// Same metrics for the candidate source alone, and the relative change in percent.
    std::map<std::string, double> baseline;
    std::map<std::string, double> delta_pct;
    std::size_t users_evaluated = 0;
    std::size_t users_skipped = 0;   // no relevant test items (top-k) or no test pairs (rating)
    std::size_t degraded = 0;        // user passes answered by the fallback list
    std::size_t pairs_total = 0;     // rating experiment
    std::size_t pairs_excluded = 0;  // rating answers that never parsed
    bool valid = true;
    std::string invalid_reason;
    nlohmann::json config = nlohmann::json::object();
    std::string timestamp;
    std::vector<ReferenceRow> reference;

    nlohmann::json to_json() const;
    static MetricReport from_json(const nlohmann::json& j);
};

/// Split and sampled users an experiment runs over.
struct EvalData {
    const Catalog* catalog = nullptr;
    const UserTable* users = nullptr;
    std::vector<RatingEvent> train;
    std::vector<RatingEvent> test;
    std::vector<UserId> eval_users;
    nlohmann::json snapshot = nlohmann::json::object();
};

/// Splits every user's events, then keeps `sample_users` users (0 keeps all) for evaluation.
EvalData prepare_eval_data(const Dataset& data, const SplitPolicy& policy, std::uint64_t split_seed,
                           std::size_t sample_users, std::uint64_t sample_seed);

struct ExperimentConfig {
    std::string model_id = "gpt-3.5-turbo";
    PromptVariant variant = PromptVariant::standard;
    double temperature = 0.9;
    /// 0 picks 1 at temperature 0 and 5 otherwise.
    int repeats = 0;
    int max_retries = 3;
    std::size_t candidate_count = 20;
    std::size_t k = 5;
    double relevance_threshold = 4.0;
    std::uint64_t seed = 42;
    std::size_t history_cap = 20;
    /// Rating experiment: reports with more unparsed answers than this are invalid.
    double max_exclusion_rate = 0.05;
    std::size_t workers = 1;

    int effective_repeats() const;
    nlohmann::json to_json() const;
};

std::set<ItemId> relevant_items(const std::vector<RatingEvent>& test, UserId user, double threshold);

MetricReport run_topk_experiment(const EvalData& data, const CandidateSource& candidates, Provider& provider,
                                 const ExperimentConfig& config, RunLog* log = nullptr);

/// `baseline` is optional; when given its predictions on the same pairs fill report.baseline.
MetricReport run_rating_experiment(const EvalData& data, Provider& provider, const ExperimentConfig& config,
                                   const RatingPredictor* baseline = nullptr, const std::string& baseline_name = {},
                                   RunLog* log = nullptr);

/// One top-k run per (variant, temperature), variants outermost.
std::vector<MetricReport> run_ablation(const EvalData& data, const CandidateSource& candidates, Provider& provider,
                                       const std::vector<PromptVariant>& variants,
                                       const std::vector<double>& temperatures, const ExperimentConfig& base,
                                       RunLog* log = nullptr);

/// One row per grid cell: variant, temperature, repeats and metric means.
void write_ablation_csv(const std::vector<MetricReport>& reports, const std::filesystem::path& path);
/// Per-cell CSV files with one row per repeat, named <variant>_t<temperature>.csv.
void write_ablation_cells(const std::vector<MetricReport>& reports, const std::filesystem::path& dir);

/// Writes the report as JSON under dir and returns the file path.
std::filesystem::path save_report(const MetricReport& report, const std::filesystem::path& dir);
/// Reports found in dir, sorted by file name.
std::vector<std::pair<std::filesystem::path, MetricReport>> list_reports(const std::filesystem::path& dir);

}  // namespace chatrec
