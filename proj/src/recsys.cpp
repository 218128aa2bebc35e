#include "chatrec/recsys.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

namespace chatrec {

namespace {

bool candidate_before(const CandidateEntry& a, const CandidateEntry& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.item < b.item;
}

std::uint64_t pair_key(ItemId a, ItemId b) {
    return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(a)) << 32) |
           static_cast<std::uint32_t>(b);
}

double mean_rating(const std::vector<RatingEvent>& events) {
    if (events.empty()) return 0.0;
    double sum = 0.0;
    for (const auto& ev : events) sum += ev.rating;
    return sum / static_cast<double>(events.size());
}

}  // namespace

std::vector<ItemId> CandidateSet::ids() const {
    std::vector<ItemId> out;
    out.reserve(entries.size());
    for (const auto& e : entries) out.push_back(e.item);
    return out;
}

bool CandidateSet::contains(ItemId item) const {
    return std::any_of(entries.begin(), entries.end(), [item](const auto& e) { return e.item == item; });
}

std::map<UserId, ItemSet> training_history(const std::vector<RatingEvent>& train) {
    std::map<UserId, ItemSet> out;
    for (const auto& ev : train) out[ev.user].insert(ev.item);
    return out;
}

CandidateSet rank_candidates(UserId user, std::vector<CandidateEntry> scored, std::size_t n,
                             const ItemSet& exclude, std::string source) {
    if (n == 0) throw std::invalid_argument("top-n requires n >= 1");
    std::set<ItemId> seen;
    std::vector<CandidateEntry> kept;
    kept.reserve(scored.size());
    for (const auto& e : scored) {
        if (exclude.count(e.item) || !seen.insert(e.item).second) continue;
        kept.push_back(e);
    }
    const std::size_t keep = std::min(n, kept.size());
    std::partial_sort(kept.begin(), kept.begin() + static_cast<std::ptrdiff_t>(keep), kept.end(),
                      candidate_before);
    kept.resize(keep);
    return CandidateSet{user, std::move(kept), std::move(source)};
}

double clip_rating(double value) { return std::clamp(value, 1.0, 5.0); }

// ---------------------------------------------------------------------------

CandidateSet Recommender::top_n_candidates(UserId user, std::size_t n, const ItemSet& exclude) const {
    if (!knows_user(user)) return popularity_candidates(user, n, exclude);
    std::vector<CandidateEntry> scored;
    scored.reserve(universe_.size());
    for (ItemId item : universe_) {
        if (!exclude.count(item)) scored.push_back({item, ranking_score(user, item)});
    }
    return rank_candidates(user, std::move(scored), n, exclude, name());
}

CandidateSet Recommender::popularity_candidates(UserId user, std::size_t n, const ItemSet& exclude) const {
    std::vector<CandidateEntry> scored;
    scored.reserve(universe_.size());
    for (ItemId item : universe_) {
        auto it = popularity_.find(item);
        scored.push_back({item, it == popularity_.end() ? 0.0 : static_cast<double>(it->second)});
    }
    return rank_candidates(user, std::move(scored), n, exclude, name() + "+popularity-fallback");
}

void Recommender::set_universe(const std::vector<RatingEvent>& train) {
    popularity_.clear();
    for (const auto& ev : train) ++popularity_[ev.item];
    universe_.clear();
    for (const auto& [item, _] : popularity_) universe_.push_back(item);
    std::sort(universe_.begin(), universe_.end());
}

nlohmann::json Recommender::universe_to_json() const {
    nlohmann::json pop = nlohmann::json::array();
    for (ItemId item : universe_) pop.push_back({item, popularity_.at(item)});
    return pop;
}

void Recommender::universe_from_json(const nlohmann::json& j) {
    universe_.clear();
    popularity_.clear();
    for (const auto& row : j) {
        ItemId item = row.at(0).get<ItemId>();
        universe_.push_back(item);
        popularity_[item] = row.at(1).get<std::size_t>();
    }
    std::sort(universe_.begin(), universe_.end());
}

// ---------------------------------------------------------------------------

DivergenceError::DivergenceError(int epoch, double loss)
    : Error("matrix factorization diverged at epoch " + std::to_string(epoch) + " (loss " +
            std::to_string(loss) + ")"),
      epoch_(epoch) {}

MfModel MfModel::train(const std::vector<RatingEvent>& train, const MfHyperParams& hyper) {
    if (train.empty()) throw std::invalid_argument("train_mf: empty training set");
    if (hyper.factors < 1) throw std::invalid_argument("train_mf: factors must be >= 1");
    if (hyper.epochs < 0) throw std::invalid_argument("train_mf: epochs must be >= 0");

    MfModel m;
    m.hyper_ = hyper;
    m.global_mean_ = mean_rating(train);
    m.set_universe(train);

    std::set<UserId> users;
    for (const auto& ev : train) users.insert(ev.user);
    m.user_ids_.assign(users.begin(), users.end());
    m.item_ids_ = m.universe_;
    for (std::size_t i = 0; i < m.user_ids_.size(); ++i) m.user_index_[m.user_ids_[i]] = i;
    for (std::size_t i = 0; i < m.item_ids_.size(); ++i) m.item_index_[m.item_ids_[i]] = i;

    const auto d = static_cast<std::size_t>(hyper.factors);
    Rng rng(hyper.seed);
    m.user_factors_.resize(m.user_ids_.size() * d);
    for (auto& v : m.user_factors_) v = (2.0 * rng.unit() - 1.0) * hyper.init_range;
    m.item_factors_.assign(m.item_ids_.size() * d, 0.0);
    m.user_bias_.assign(m.user_ids_.size(), 0.0);
    m.item_bias_.assign(m.item_ids_.size(), 0.0);

    struct Obs {
        std::size_t u, i;
        double r;
    };
    std::vector<Obs> obs;
    obs.reserve(train.size());
    for (const auto& ev : train) obs.push_back({m.user_index_[ev.user], m.item_index_[ev.item], double(ev.rating)});

    m.loss_history_.push_back(m.objective(train));
    std::vector<std::size_t> order(obs.size());
    const double lr = hyper.learning_rate;
    const double reg = hyper.regularization;
    for (int epoch = 1; epoch <= hyper.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        Rng epoch_rng(mix_seed(hyper.seed, static_cast<std::uint64_t>(epoch)));
        epoch_rng.shuffle(order);
        for (std::size_t idx : order) {
            const Obs& o = obs[idx];
            double* p = m.user_factors_.data() + o.u * d;
            double* q = m.item_factors_.data() + o.i * d;
            double dot = 0.0;
            for (std::size_t f = 0; f < d; ++f) dot += p[f] * q[f];
            const double err = o.r - (m.global_mean_ + m.user_bias_[o.u] + m.item_bias_[o.i] + dot);
            m.user_bias_[o.u] += lr * (err - reg * m.user_bias_[o.u]);
            m.item_bias_[o.i] += lr * (err - reg * m.item_bias_[o.i]);
            for (std::size_t f = 0; f < d; ++f) {
                const double pf = p[f];
                p[f] += lr * (err * q[f] - reg * pf);
                q[f] += lr * (err * pf - reg * q[f]);
            }
        }
        const double loss = m.objective(train);
        if (!std::isfinite(loss)) throw DivergenceError(epoch, loss);
        m.loss_history_.push_back(loss);
    }
    return m;
}

double MfModel::objective(const std::vector<RatingEvent>& train) const {
    const auto d = static_cast<std::size_t>(hyper_.factors);
    double loss = 0.0;
    for (const auto& ev : train) {
        const std::size_t u = user_index_.at(ev.user);
        const std::size_t i = item_index_.at(ev.item);
        const double* p = user_row(u);
        const double* q = item_row(i);
        double dot = 0.0, norm = 0.0;
        for (std::size_t f = 0; f < d; ++f) {
            dot += p[f] * q[f];
            norm += p[f] * p[f] + q[f] * q[f];
        }
        const double err = ev.rating - (global_mean_ + user_bias_[u] + item_bias_[i] + dot);
        loss += err * err +
                hyper_.regularization * (norm + user_bias_[u] * user_bias_[u] + item_bias_[i] * item_bias_[i]);
    }
    return loss;
}

double MfModel::raw_score(UserId user, ItemId item) const {
    auto uit = user_index_.find(user);
    auto iit = item_index_.find(item);
    if (uit == user_index_.end() || iit == item_index_.end()) return global_mean_;
    const double* p = user_row(uit->second);
    const double* q = item_row(iit->second);
    double dot = 0.0;
    for (int f = 0; f < hyper_.factors; ++f) dot += p[f] * q[f];
    return global_mean_ + user_bias_[uit->second] + item_bias_[iit->second] + dot;
}

double MfModel::predict_rating(UserId user, ItemId item) const { return clip_rating(raw_score(user, item)); }

double MfModel::training_rmse(const std::vector<RatingEvent>& events) const {
    if (events.empty()) return 0.0;
    double sum = 0.0;
    for (const auto& ev : events) {
        const double e = predict_rating(ev.user, ev.item) - ev.rating;
        sum += e * e;
    }
    return std::sqrt(sum / static_cast<double>(events.size()));
}

nlohmann::json MfModel::to_json() const {
    return {
        {"format", "chatrec-model"},
        {"version", 1},
        {"kind", "mf"},
        {"hyper",
         {{"factors", hyper_.factors},
          {"learning_rate", hyper_.learning_rate},
          {"regularization", hyper_.regularization},
          {"epochs", hyper_.epochs},
          {"init_range", hyper_.init_range},
          {"seed", hyper_.seed}}},
        {"global_mean", global_mean_},
        {"users", user_ids_},
        {"items", item_ids_},
        {"user_bias", user_bias_},
        {"item_bias", item_bias_},
        {"user_factors", user_factors_},
        {"item_factors", item_factors_},
        {"loss_history", loss_history_},
        {"popularity", universe_to_json()},
    };
}

MfModel MfModel::from_json(const nlohmann::json& j) {
    if (j.at("kind") != "mf" || j.at("version") != 1) throw Error("not a version-1 mf model");
    MfModel m;
    const auto& h = j.at("hyper");
    m.hyper_.factors = h.at("factors");
    m.hyper_.learning_rate = h.at("learning_rate");
    m.hyper_.regularization = h.at("regularization");
    m.hyper_.epochs = h.at("epochs");
    m.hyper_.init_range = h.at("init_range");
    m.hyper_.seed = h.at("seed");
    m.global_mean_ = j.at("global_mean");
    m.user_ids_ = j.at("users").get<std::vector<UserId>>();
    m.item_ids_ = j.at("items").get<std::vector<ItemId>>();
    m.user_bias_ = j.at("user_bias").get<std::vector<double>>();
    m.item_bias_ = j.at("item_bias").get<std::vector<double>>();
    m.user_factors_ = j.at("user_factors").get<std::vector<double>>();
    m.item_factors_ = j.at("item_factors").get<std::vector<double>>();
    m.loss_history_ = j.at("loss_history").get<std::vector<double>>();
    const auto d = static_cast<std::size_t>(m.hyper_.factors);
    if (m.user_factors_.size() != m.user_ids_.size() * d || m.item_factors_.size() != m.item_ids_.size() * d ||
        m.user_bias_.size() != m.user_ids_.size() || m.item_bias_.size() != m.item_ids_.size()) {
        throw Error("mf model file has inconsistent dimensions");
    }
    for (std::size_t i = 0; i < m.user_ids_.size(); ++i) m.user_index_[m.user_ids_[i]] = i;
    for (std::size_t i = 0; i < m.item_ids_.size(); ++i) m.item_index_[m.item_ids_[i]] = i;
    m.universe_from_json(j.at("popularity"));
    return m;
}

// ---------------------------------------------------------------------------

std::string to_string(SimilarityKind kind) {
    return kind == SimilarityKind::cosine ? "cosine" : "adjusted-cosine";
}

SimilarityKind similarity_kind_from_string(const std::string& s) {
    if (s == "cosine") return SimilarityKind::cosine;
    if (s == "adjusted-cosine" || s == "adjusted_cosine") return SimilarityKind::adjusted_cosine;
    throw std::invalid_argument("unknown similarity kind '" + s + "'");
}

ItemKnnModel ItemKnnModel::train(const std::vector<RatingEvent>& train, const KnnParams& params) {
    if (params.k < 1) throw std::invalid_argument("train_item_knn: k must be >= 1");
    if (params.shrinkage < 0.0) throw std::invalid_argument("train_item_knn: negative shrinkage");
    ItemKnnModel m;
    m.params_ = params;
    m.fit(train);
    return m;
}

void ItemKnnModel::fit(const std::vector<RatingEvent>& train) {
    train_ = train;
    global_mean_ = mean_rating(train);
    set_universe(train);

    std::map<UserId, std::map<ItemId, int>> ratings;
    for (const auto& ev : train) ratings[ev.user][ev.item] = ev.rating;
    std::unordered_map<ItemId, std::pair<double, std::size_t>> item_sums;
    for (const auto& [user, rs] : ratings) {
        auto& out = user_ratings_[user];
        for (const auto& [item, r] : rs) {
            out.emplace_back(item, r);
            item_sums[item].first += r;
            ++item_sums[item].second;
        }
    }
    for (const auto& [item, s] : item_sums) item_means_[item] = s.first / double(s.second);

    const std::size_t n_items = universe_.size();
    std::unordered_map<ItemId, std::size_t> dense;
    for (std::size_t i = 0; i < n_items; ++i) dense[universe_[i]] = i;

    // centred (or raw) ratings by user and by item, both in ascending id order
    const bool adjusted = params_.kind == SimilarityKind::adjusted_cosine;
    std::vector<std::vector<std::pair<std::size_t, double>>> by_item(n_items);
    std::vector<std::vector<std::pair<std::size_t, double>>> by_user;
    by_user.reserve(ratings.size());
    for (const auto& [user, rs] : ratings) {
        double mu = 0.0;
        if (adjusted) {
            for (const auto& [item, r] : rs) mu += r;
            mu /= double(rs.size());
        }
        auto& row = by_user.emplace_back();
        for (const auto& [item, r] : rs) {
            row.emplace_back(dense[item], r - mu);
            by_item[dense[item]].emplace_back(by_user.size() - 1, r - mu);
        }
    }

    // each pair is accumulated once (a < b) and mirrored, so sim(a,b) == sim(b,a) bitwise
    std::vector<std::vector<Neighbor>> rows(n_items);
    std::vector<double> num(n_items), sq_a(n_items), sq_b(n_items);
    std::vector<char> mark(n_items, 0);
    std::vector<std::size_t> touched;
    for (std::size_t a = 0; a < n_items; ++a) {
        touched.clear();
        for (const auto& [u, xa] : by_item[a]) {
            for (const auto& [b, xb] : by_user[u]) {
                if (b <= a) continue;
                if (!mark[b]) {
                    mark[b] = 1;
                    touched.push_back(b);
                    num[b] = sq_a[b] = sq_b[b] = 0.0;
                }
                num[b] += xa * xb;
                sq_a[b] += xa * xa;
                sq_b[b] += xb * xb;
            }
        }
        for (std::size_t b : touched) {
            mark[b] = 0;
            const double den = std::sqrt(sq_a[b]) * std::sqrt(sq_b[b]) + params_.shrinkage;
            const double sim = den > 0.0 ? num[b] / den : 0.0;
            if (sim > 0.0) {
                rows[a].push_back({universe_[b], sim});
                rows[b].push_back({universe_[a], sim});
            }
        }
    }

    const auto k = static_cast<std::size_t>(params_.k);
    for (std::size_t a = 0; a < n_items; ++a) {
        if (rows[a].empty()) continue;
        auto& full = rows[a];
        std::sort(full.begin(), full.end(), [](const Neighbor& x, const Neighbor& y) { return x.item < y.item; });
        std::vector<Neighbor> top = full;
        std::sort(top.begin(), top.end(), [](const Neighbor& x, const Neighbor& y) {
            if (x.similarity != y.similarity) return x.similarity > y.similarity;
            return x.item < y.item;
        });
        if (top.size() > k) top.resize(k);
        for (const auto& nb : top) neighborhood_lookup_[pair_key(universe_[a], nb.item)] = nb.similarity;
        neighborhoods_[universe_[a]] = std::move(top);
        rows_[universe_[a]] = std::move(full);
    }
}

const std::vector<Neighbor>& ItemKnnModel::neighbors(ItemId item) const {
    static const std::vector<Neighbor> empty;
    auto it = neighborhoods_.find(item);
    return it == neighborhoods_.end() ? empty : it->second;
}

double ItemKnnModel::similarity(ItemId a, ItemId b) const {
    auto it = rows_.find(a);
    if (it == rows_.end()) return 0.0;
    const auto& row = it->second;
    auto pos = std::lower_bound(row.begin(), row.end(), b,
                                [](const Neighbor& nb, ItemId id) { return nb.item < id; });
    return pos != row.end() && pos->item == b ? pos->similarity : 0.0;
}

double ItemKnnModel::item_mean(ItemId item) const {
    auto it = item_means_.find(item);
    return it == item_means_.end() ? global_mean_ : it->second;
}

std::vector<Neighbor> ItemKnnModel::prediction_neighbors(UserId user, ItemId item) const {
    std::vector<Neighbor> out;
    auto uit = user_ratings_.find(user);
    auto rit = rows_.find(item);
    if (uit == user_ratings_.end() || rit == rows_.end()) return out;
    // both lists ascending by item id: merge-join
    const auto& row = rit->second;
    auto r = row.begin();
    for (const auto& [rated, rating] : uit->second) {
        while (r != row.end() && r->item < rated) ++r;
        if (r == row.end()) break;
        if (r->item == rated) out.push_back(*r);
    }
    std::sort(out.begin(), out.end(), [](const Neighbor& x, const Neighbor& y) {
        if (x.similarity != y.similarity) return x.similarity > y.similarity;
        return x.item < y.item;
    });
    if (out.size() > static_cast<std::size_t>(params_.k)) out.resize(static_cast<std::size_t>(params_.k));
    return out;
}

double ItemKnnModel::predict_rating(UserId user, ItemId item) const {
    const auto nbs = prediction_neighbors(user, item);
    if (!nbs.empty()) {
        const auto& rated = user_ratings_.at(user);
        double num = 0.0, den = 0.0;
        for (const auto& nb : nbs) {
            auto r = std::lower_bound(rated.begin(), rated.end(), nb.item,
                                      [](const auto& p, ItemId id) { return p.first < id; });
            num += nb.similarity * r->second;
            den += nb.similarity;
        }
        return clip_rating(num / den);
    }
    return clip_rating(item_mean(item));
}

double ItemKnnModel::ranking_score(UserId user, ItemId item) const {
    auto uit = user_ratings_.find(user);
    if (uit == user_ratings_.end()) return 0.0;
    double score = 0.0;
    for (const auto& [rated, r] : uit->second) {
        auto it = neighborhood_lookup_.find(pair_key(rated, item));
        if (it != neighborhood_lookup_.end()) score += it->second * r;
    }
    return score;
}

nlohmann::json ItemKnnModel::to_json() const {
    nlohmann::json ratings = nlohmann::json::array();
    for (const auto& ev : train_) ratings.push_back({ev.user, ev.item, ev.rating, ev.timestamp});
    return {
        {"format", "chatrec-model"},
        {"version", 1},
        {"kind", "itemknn"},
        {"params", {{"k", params_.k}, {"similarity", to_string(params_.kind)}, {"shrinkage", params_.shrinkage}}},
        {"ratings", ratings},
    };
}

ItemKnnModel ItemKnnModel::from_json(const nlohmann::json& j) {
    if (j.at("kind") != "itemknn" || j.at("version") != 1) throw Error("not a version-1 itemknn model");
    KnnParams params;
    const auto& p = j.at("params");
    params.k = p.at("k");
    params.kind = similarity_kind_from_string(p.at("similarity"));
    params.shrinkage = p.at("shrinkage");
    std::vector<RatingEvent> events;
    for (const auto& r : j.at("ratings")) {
        events.push_back({r.at(0).get<UserId>(), r.at(1).get<ItemId>(), r.at(2).get<int>(), r.at(3).get<std::int64_t>()});
    }
    return train(events, params);
}

// ---------------------------------------------------------------------------

ExternalScores ExternalScores::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open " + path.string());
    return parse(in, path.string());
}

ExternalScores ExternalScores::parse(std::istream& in, const std::string& label) {
    ExternalScores s;
    s.label_ = label;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (trim(line).empty()) continue;
        auto fields = split(line, ',');
        if (fields.size() != 3) throw ParseFileError(label, lineno, "expected user_id,item_id,score");
        if (lineno == 1 && trim(fields[0]) == "user_id") continue;
        try {
            std::size_t used = 0;
            const UserId user = std::stoi(trim(fields[0]));
            const ItemId item = std::stoi(trim(fields[1]));
            const std::string score_text = trim(fields[2]);
            const double score = std::stod(score_text, &used);
            if (used != score_text.size()) throw std::invalid_argument("trailing");
            s.scores_[user].push_back({item, score});
        } catch (const std::logic_error&) {
            throw ParseFileError(label, lineno, "malformed row '" + line + "'");
        }
    }
    return s;
}

CandidateSet ExternalScores::top_n_candidates(UserId user, std::size_t n, const ItemSet& exclude) const {
    auto it = scores_.find(user);
    if (it == scores_.end()) {
        throw Error("external scores " + label_ + " have no rows for user " + std::to_string(user));
    }
    return rank_candidates(user, it->second, n, exclude, name());
}

void write_candidates_csv(std::ostream& out, const std::vector<CandidateSet>& sets) {
    out << "user_id,item_id,score\n";
    char buf[64];
    for (const auto& set : sets) {
        for (const auto& e : set.entries) {
            std::snprintf(buf, sizeof buf, "%.17g", e.score);
            out << set.user << ',' << e.item << ',' << buf << '\n';
        }
    }
}

// ---------------------------------------------------------------------------

void save_model(const std::filesystem::path& path, const Recommender& model) {
    std::ofstream out(path);
    if (!out) throw Error("cannot write " + path.string());
    out << model.to_json().dump() << '\n';
}

std::unique_ptr<Recommender> load_model(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open " + path.string());
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw Error("model file " + path.string() + ": " + e.what());
    }
    if (j.value("format", "") != "chatrec-model") throw Error(path.string() + " is not a chatrec model file");
    const std::string kind = j.at("kind");
    if (kind == "mf") return std::make_unique<MfModel>(MfModel::from_json(j));
    if (kind == "itemknn") return std::make_unique<ItemKnnModel>(ItemKnnModel::from_json(j));
    throw Error("unknown model kind '" + kind + "'");
}

}  // namespace chatrec
