#pragma once

#include "chatrec/dataset.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <map>
#include <memory>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

namespace chatrec {

using ItemSet = std::set<ItemId>;

struct CandidateEntry {
    ItemId item = 0;
    double score = 0.0;

    friend bool operator==(const CandidateEntry&, const CandidateEntry&) = default;
};

/// Top-N list from a recommender: score descending, ties by ascending item id,
/// no duplicates, nothing from the user's training history.
struct CandidateSet {
    UserId user = 0;
    std::vector<CandidateEntry> entries;
    std::string source;

    std::vector<ItemId> ids() const;
    std::size_t size() const { return entries.size(); }
    bool empty() const { return entries.empty(); }
    bool contains(ItemId item) const;
};

/// Per-user set of items seen in training.
std::map<UserId, ItemSet> training_history(const std::vector<RatingEvent>& train);

/// Sorts (item, score) pairs into a CandidateSet: drops excluded items and
/// repeated ids (first occurrence wins), orders by score then id, keeps n.
CandidateSet rank_candidates(UserId user, std::vector<CandidateEntry> scored, std::size_t n,
                             const ItemSet& exclude, std::string source);

/// Read-only candidate generator. Implementations are immutable after
/// construction, so concurrent queries are safe.
class CandidateSource {
public:
    virtual ~CandidateSource() = default;
    virtual std::string name() const = 0;
    virtual CandidateSet top_n_candidates(UserId user, std::size_t n, const ItemSet& exclude) const = 0;
};

class RatingPredictor {
public:
    virtual ~RatingPredictor() = default;
    /// Always within [1, 5].
    virtual double predict_rating(UserId user, ItemId item) const = 0;
};

/// Shared behaviour for models that score every item they were trained on.
/// Unknown users get a popularity ranking with "+popularity-fallback" in the source tag.
class Recommender : public CandidateSource, public RatingPredictor {
public:
    virtual bool knows_user(UserId user) const = 0;
    /// Score used to rank items for top-N lists (not necessarily a rating).
    virtual double ranking_score(UserId user, ItemId item) const = 0;
    /// Items the model can rank, ascending.
    const std::vector<ItemId>& item_universe() const { return universe_; }

    CandidateSet top_n_candidates(UserId user, std::size_t n, const ItemSet& exclude) const override;
    CandidateSet popularity_candidates(UserId user, std::size_t n, const ItemSet& exclude) const;

    virtual nlohmann::json to_json() const = 0;

protected:
    void set_universe(const std::vector<RatingEvent>& train);
    void universe_from_json(const nlohmann::json& j);
    nlohmann::json universe_to_json() const;

    std::vector<ItemId> universe_;
    std::unordered_map<ItemId, std::size_t> popularity_;
};

double clip_rating(double value);

// ---------------------------------------------------------------------------
// Matrix factorization

struct MfHyperParams {
    int factors = 32;
    double learning_rate = 0.005;
    double regularization = 0.02;
    int epochs = 50;
    double init_range = 0.05;
    std::uint64_t seed = 42;
};

class DivergenceError : public Error {
public:
    DivergenceError(int epoch, double loss);
    int epoch() const noexcept { return epoch_; }

private:
    int epoch_;
};

/// Biased matrix factorization trained by stochastic gradient descent on the
/// regularized squared error. User factors start uniform in
/// [-init_range, init_range]; item factors and all biases start at zero, so an
/// untrained model predicts the global mean exactly.
class MfModel final : public Recommender {
public:
    static MfModel train(const std::vector<RatingEvent>& train, const MfHyperParams& hyper);
    static MfModel from_json(const nlohmann::json& j);

    std::string name() const override { return "mf"; }
    bool knows_user(UserId user) const override { return user_index_.count(user) > 0; }
    double predict_rating(UserId user, ItemId item) const override;
    /// Unclipped global_mean + b_u + b_i + p_u . q_i
    double raw_score(UserId user, ItemId item) const;
    double ranking_score(UserId user, ItemId item) const override { return raw_score(user, item); }

    const MfHyperParams& hyper() const { return hyper_; }
    double global_mean() const { return global_mean_; }
    /// Objective before the first epoch, then after every epoch.
    const std::vector<double>& loss_history() const { return loss_history_; }
    double training_rmse(const std::vector<RatingEvent>& events) const;

    nlohmann::json to_json() const override;

private:
    MfModel() = default;
    double objective(const std::vector<RatingEvent>& train) const;
    const double* user_row(std::size_t u) const { return user_factors_.data() + u * hyper_.factors; }
    const double* item_row(std::size_t i) const { return item_factors_.data() + i * hyper_.factors; }

    MfHyperParams hyper_;
    double global_mean_ = 0.0;
    std::unordered_map<UserId, std::size_t> user_index_;
    std::unordered_map<ItemId, std::size_t> item_index_;
    std::vector<UserId> user_ids_;
    std::vector<ItemId> item_ids_;
    std::vector<double> user_factors_;
    std::vector<double> item_factors_;
    std::vector<double> user_bias_;
    std::vector<double> item_bias_;
    std::vector<double> loss_history_;
};

// ---------------------------------------------------------------------------
// Item-based nearest neighbours

enum class SimilarityKind { cosine, adjusted_cosine };

std::string to_string(SimilarityKind kind);
SimilarityKind similarity_kind_from_string(const std::string& s);

struct KnnParams {
    int k = 40;
    SimilarityKind kind = SimilarityKind::adjusted_cosine;
    double shrinkage = 10.0;  // added to the similarity denominator
};

struct Neighbor {
    ItemId item = 0;
    double similarity = 0.0;
};

/// Similarity over the users who rated both items:
///   sum(x_i * x_j) / (sqrt(sum x_i^2) * sqrt(sum x_j^2) + shrinkage)
/// where x is the raw rating (cosine) or the rating minus the user's mean
/// (adjusted cosine). Pairs with no co-raters or a non-positive value are not stored.
/// Item-KNN. Similarities are stored for every co-rated pair with a positive
/// value; neighbors(item) is that row cut to the k most similar items (ties by
/// ascending id). A rating for (u, i) is the similarity-weighted average of u's
/// ratings on the k items u rated that are most similar to i, falling back to
/// the item mean and then the global mean.
class ItemKnnModel final : public Recommender {
public:
    static ItemKnnModel train(const std::vector<RatingEvent>& train, const KnnParams& params);
    /// Model files keep the training ratings; similarities are recomputed on load.
    static ItemKnnModel from_json(const nlohmann::json& j);

    std::string name() const override { return "itemknn"; }
    bool knows_user(UserId user) const override { return user_ratings_.count(user) > 0; }
    double predict_rating(UserId user, ItemId item) const override;
    /// Sum over the user's rated items j of r_uj * sim(j, item), counting only
    /// pairs where item is among j's k neighbours.
    double ranking_score(UserId user, ItemId item) const override;

    /// At most k entries, similarity descending.
    const std::vector<Neighbor>& neighbors(ItemId item) const;
    /// Stored similarity of the pair, or 0 when absent. Symmetric.
    double similarity(ItemId a, ItemId b) const;
    /// Neighbours actually used for predicting (user, item).
    std::vector<Neighbor> prediction_neighbors(UserId user, ItemId item) const;
    double item_mean(ItemId item) const;
    const KnnParams& params() const { return params_; }
    double global_mean() const { return global_mean_; }

    nlohmann::json to_json() const override;

private:
    ItemKnnModel() = default;
    void fit(const std::vector<RatingEvent>& train);

    KnnParams params_;
    double global_mean_ = 0.0;
    std::vector<RatingEvent> train_;
    std::unordered_map<ItemId, double> item_means_;
    std::unordered_map<UserId, std::vector<std::pair<ItemId, int>>> user_ratings_;
    std::unordered_map<ItemId, std::vector<Neighbor>> rows_;  // full, ascending item id
    std::unordered_map<ItemId, std::vector<Neighbor>> neighborhoods_;
    std::unordered_map<std::uint64_t, double> neighborhood_lookup_;
};

// ---------------------------------------------------------------------------
// Scores produced by other tools

/// Candidate source backed by a `user_id,item_id,score` CSV (header optional).
class ExternalScores final : public CandidateSource {
public:
    static ExternalScores load(const std::filesystem::path& path);
    static ExternalScores parse(std::istream& in, const std::string& label);

    std::string name() const override { return "external:" + label_; }
    CandidateSet top_n_candidates(UserId user, std::size_t n, const ItemSet& exclude) const override;
    bool has_user(UserId user) const { return scores_.count(user) > 0; }

private:
    std::string label_;
    std::map<UserId, std::vector<CandidateEntry>> scores_;
};

void write_candidates_csv(std::ostream& out, const std::vector<CandidateSet>& sets);

// ---------------------------------------------------------------------------
// Model files

void save_model(const std::filesystem::path& path, const Recommender& model);
std::unique_ptr<Recommender> load_model(const std::filesystem::path& path);

}  // namespace chatrec
