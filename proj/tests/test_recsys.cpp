#include "doctest.h"
#include "support.hpp"

#include "chatrec/recsys.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <random>
#include <sstream>

using namespace chatrec;

namespace {

std::vector<RatingEvent> toy_matrix() {
    // [[2, 4], [1, 2]]
    return {{1, 1, 2, 1}, {1, 2, 4, 2}, {2, 1, 1, 3}, {2, 2, 2, 4}};
}

// Full-batch gradient descent on the same biased factor model, written
// separately from the library trainer.
struct ReferenceMf {
    double mu = 0;
    std::map<int, double> bu, bi, p, q;

    ReferenceMf(const std::vector<RatingEvent>& data, int epochs, double lr, double reg) {
        for (const auto& e : data) mu += e.rating;
        mu /= double(data.size());
        for (const auto& e : data) {
            bu[e.user] = 0;
            bi[e.item] = 0;
            p[e.user] = 0.1 * e.user;
            q[e.item] = 0.1;
        }
        for (int t = 0; t < epochs * 4; ++t) {
            std::map<int, double> gbu, gbi, gp, gq;
            for (const auto& e : data) {
                double err = e.rating - predict(e.user, e.item);
                gbu[e.user] += err;
                gbi[e.item] += err;
                gp[e.user] += err * q[e.item];
                gq[e.item] += err * p[e.user];
            }
            for (auto& [u, v] : bu) v += lr * (gbu[u] - reg * v);
            for (auto& [i, v] : bi) v += lr * (gbi[i] - reg * v);
            std::map<int, double> np = p, nq = q;
            for (auto& [u, v] : np) v += lr * (gp[u] - reg * p[u]);
            for (auto& [i, v] : nq) v += lr * (gq[i] - reg * q[i]);
            p = np;
            q = nq;
        }
    }
    double predict(int u, int i) { return mu + bu[u] + bi[i] + p[u] * q[i]; }
};

MfHyperParams toy_hyper(int epochs) {
    MfHyperParams h;
    h.factors = 1;
    h.learning_rate = 0.05;
    h.regularization = 0.001;
    h.epochs = epochs;
    h.init_range = 0.5;
    h.seed = 3;
    return h;
}

std::vector<RatingEvent> random_ratings(int users, int items, int per_user, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<RatingEvent> out;
    for (int u = 1; u <= users; ++u) {
        std::vector<int> ids(items);
        std::iota(ids.begin(), ids.end(), 1);
        rng.shuffle(ids);
        for (int n = 0; n < per_user; ++n) {
            out.push_back({u, ids[n], 1 + int(rng.below(5)), 1000 + n});
        }
    }
    return out;
}

// Adjusted cosine computed pair by pair from the definition.
double brute_similarity(const std::vector<RatingEvent>& data, ItemId a, ItemId b, bool adjusted, double shrink) {
    std::map<UserId, std::map<ItemId, double>> by_user;
    for (const auto& e : data) by_user[e.user][e.item] = e.rating;
    double num = 0, sa = 0, sb = 0;
    bool any = false;
    for (const auto& [u, rs] : by_user) {
        if (!rs.count(a) || !rs.count(b)) continue;
        double mean = 0;
        for (const auto& [_, r] : rs) mean += r;
        mean /= double(rs.size());
        double xa = rs.at(a) - (adjusted ? mean : 0.0);
        double xb = rs.at(b) - (adjusted ? mean : 0.0);
        num += xa * xb;
        sa += xa * xa;
        sb += xb * xb;
        any = true;
    }
    if (!any) return 0.0;
    double den = std::sqrt(sa) * std::sqrt(sb) + shrink;
    double s = den > 0 ? num / den : 0.0;
    return s > 0 ? s : 0.0;
}

}  // namespace

TEST_CASE("rating clipping") {
    CHECK(clip_rating(5.7) == 5.0);
    CHECK(clip_rating(0.2) == 1.0);
    CHECK(clip_rating(3.53) == 3.53);
}

TEST_CASE("MF fits the toy matrix like an independent reference trainer") {
    auto data = toy_matrix();
    auto model = MfModel::train(data, toy_hyper(500));
    ReferenceMf ref(data, 500, 0.05, 0.001);
    double ref_sq = 0;
    for (const auto& e : data) ref_sq += std::pow(ref.predict(e.user, e.item) - e.rating, 2);
    CHECK(std::sqrt(ref_sq / 4) < 0.1);
    CHECK(model.training_rmse(data) < 0.1);
    for (const auto& e : data) {
        CHECK(std::abs(model.predict_rating(e.user, e.item) - ref.predict(e.user, e.item)) < 0.1);
    }
    CHECK(std::abs(model.predict_rating(1, 2) - 4.0) < 0.1);
    CHECK(model.loss_history().back() < model.loss_history().front());
    CHECK(model.loss_history().size() == 501);
}

TEST_CASE("zero-epoch MF predicts the global mean") {
    auto data = toy_matrix();
    auto model = MfModel::train(data, toy_hyper(0));
    for (int u = 1; u <= 2; ++u) {
        for (int i = 1; i <= 2; ++i) CHECK(model.predict_rating(u, i) == 2.25);
    }
    CHECK(model.predict_rating(99, 1) == 2.25);
    CHECK(model.predict_rating(1, 99) == 2.25);
}

TEST_CASE("MF training is deterministic and reports divergence") {
    auto data = random_ratings(20, 30, 10, 5);
    MfHyperParams h;
    h.epochs = 5;
    CHECK(MfModel::train(data, h).to_json() == MfModel::train(data, h).to_json());
    h.learning_rate = 50.0;
    h.epochs = 50;
    try {
        MfModel::train(data, h);
        FAIL("expected divergence");
    } catch (const DivergenceError& e) {
        CHECK(e.epoch() >= 1);
    }
    CHECK_THROWS(MfModel::train({}, MfHyperParams{}));
}

TEST_CASE("predictions always within [1, 5]") {
    auto data = random_ratings(30, 40, 15, 9);
    MfHyperParams h;
    h.epochs = 20;
    h.learning_rate = 0.05;
    auto mf = MfModel::train(data, h);
    auto knn = ItemKnnModel::train(data, {});
    for (int u = 1; u <= 31; ++u) {
        for (int i = 1; i <= 41; ++i) {
            double a = mf.predict_rating(u, i), b = knn.predict_rating(u, i);
            CHECK((a >= 1.0 && a <= 5.0));
            CHECK((b >= 1.0 && b <= 5.0));
        }
    }
}

TEST_CASE("cosine of identical rating vectors is 1, no co-raters gives 0") {
    std::vector<RatingEvent> data = {{1, 1, 4, 0}, {1, 2, 4, 0}, {2, 1, 2, 0}, {2, 2, 2, 0}, {3, 3, 5, 0}};
    auto m = ItemKnnModel::train(data, {40, SimilarityKind::cosine, 0.0});
    CHECK(m.similarity(1, 2) == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(m.similarity(1, 3) == 0.0);
    CHECK(m.neighbors(3).empty());
}

TEST_CASE("item-KNN similarities match a brute-force pairwise oracle") {
    // three users, four items
    std::vector<RatingEvent> toy = {{1, 1, 5, 0}, {1, 2, 3, 0}, {1, 3, 4, 0}, {2, 1, 3, 0}, {2, 2, 1, 0},
                                    {2, 4, 4, 0}, {3, 1, 4, 0}, {3, 3, 5, 0}, {3, 4, 2, 0}};
    auto random = random_ratings(40, 25, 12, 17);
    for (const auto* data : {&toy, &random}) {
        for (double shrink : {0.0, 10.0}) {
            for (auto kind : {SimilarityKind::adjusted_cosine, SimilarityKind::cosine}) {
                auto m = ItemKnnModel::train(*data, {1000, kind, shrink});
                for (int a = 1; a <= 25; ++a) {
                    for (int b = 1; b <= 25; ++b) {
                        if (a == b) continue;
                        double want = brute_similarity(*data, a, b, kind == SimilarityKind::adjusted_cosine, shrink);
                        CHECK(m.similarity(a, b) == doctest::Approx(want).epsilon(1e-12));
                        CHECK(m.similarity(a, b) == m.similarity(b, a));
                    }
                }
            }
        }
    }
}

TEST_CASE("item-KNN neighbourhoods keep at most k, exclude the item itself") {
    auto data = random_ratings(40, 25, 12, 21);
    auto m = ItemKnnModel::train(data, {3, SimilarityKind::adjusted_cosine, 10.0});
    for (int i = 1; i <= 25; ++i) {
        const auto& nb = m.neighbors(i);
        CHECK(nb.size() <= 3);
        for (std::size_t j = 0; j < nb.size(); ++j) {
            CHECK(nb[j].item != i);
            if (j > 0) CHECK(nb[j - 1].similarity >= nb[j].similarity);
        }
    }
}

TEST_CASE("item-KNN prediction: degenerate average and item-mean fallback") {
    std::vector<RatingEvent> data = {{1, 1, 4, 0}, {1, 2, 4, 0}, {2, 1, 4, 0}, {2, 2, 4, 0}, {3, 1, 4, 0},
                                     {4, 3, 3, 0}, {5, 3, 3, 0}, {6, 3, 4, 0}, {7, 3, 3, 0}, {8, 3, 3, 0}};
    auto m = ItemKnnModel::train(data, {40, SimilarityKind::cosine, 0.0});
    auto nbs = m.prediction_neighbors(3, 2);
    REQUIRE(nbs.size() == 1);
    CHECK(nbs[0].similarity == doctest::Approx(1.0));
    CHECK(m.predict_rating(3, 2) == doctest::Approx(4.0).epsilon(1e-15));
    CHECK(m.prediction_neighbors(3, 3).empty());
    CHECK(m.predict_rating(3, 3) == doctest::Approx(3.2).epsilon(1e-15));
}

TEST_CASE("top-N candidates equal a full-scan argsort for 50 users") {
    auto data = random_ratings(60, 80, 20, 33);
    MfHyperParams h;
    h.epochs = 10;
    h.learning_rate = 0.02;
    auto mf = MfModel::train(data, h);
    auto knn = ItemKnnModel::train(data, {});
    auto history = training_history(data);
    for (const Recommender* model : {static_cast<const Recommender*>(&mf), static_cast<const Recommender*>(&knn)}) {
        for (UserId u = 1; u <= 50; ++u) {
            std::vector<std::pair<double, ItemId>> all;
            for (ItemId i : model->item_universe()) {
                if (!history[u].count(i)) all.push_back({-model->ranking_score(u, i), i});
            }
            std::sort(all.begin(), all.end());
            auto got = model->top_n_candidates(u, 20, history[u]);
            REQUIRE(got.size() == 20);
            for (std::size_t r = 0; r < 20; ++r) {
                CHECK(got.entries[r].item == all[r].second);
                CHECK(got.entries[r].score == -all[r].first);
                CHECK_FALSE(history[u].count(got.entries[r].item));
            }
            auto longer = model->top_n_candidates(u, 35, history[u]);
            CHECK(std::equal(got.entries.begin(), got.entries.end(), longer.entries.begin()));
        }
    }
}

TEST_CASE("top-N stops when the catalog runs out") {
    std::vector<RatingEvent> data = {{1, 1, 5, 0}, {2, 2, 4, 0}, {2, 3, 3, 0}, {2, 4, 2, 0}};
    auto mf = MfModel::train(data, MfHyperParams{});
    auto set = mf.top_n_candidates(1, 20, {1});
    CHECK(set.size() == 3);
    CHECK(set.source == "mf");
}

TEST_CASE("unknown users get a flagged popularity ranking") {
    std::vector<RatingEvent> data = {{1, 1, 5, 0}, {2, 1, 4, 0}, {2, 3, 3, 0}, {3, 2, 2, 0}, {3, 1, 2, 0}};
    auto mf = MfModel::train(data, MfHyperParams{});
    auto set = mf.top_n_candidates(99, 20, {});
    CHECK(set.source == "mf+popularity-fallback");
    CHECK(set.ids() == std::vector<ItemId>{1, 2, 3});
}

TEST_CASE("rank_candidates orders by score then id and drops duplicates") {
    auto set = rank_candidates(1, {{5, 1.0}, {3, 2.0}, {4, 1.0}, {3, 0.5}, {9, 9.0}}, 10, {9}, "x");
    CHECK(set.ids() == std::vector<ItemId>{3, 4, 5});
    CHECK(set.entries[0].score == 2.0);
}

TEST_CASE("external scores behave as a read-only candidate source") {
    std::ostringstream csv;
    csv << "user_id,item_id,score\n";
    for (int i = 1; i <= 20; ++i) csv << "7," << i << ',' << (i % 4) * 0.25 << '\n';
    std::istringstream in(csv.str());
    auto ext = ExternalScores::parse(in, "lightgcn");
    CHECK(ext.name() == "external:lightgcn");
    auto set = ext.top_n_candidates(7, 20, {});
    REQUIRE(set.size() == 20);
    CHECK(set.ids() == std::vector<ItemId>{3, 7, 11, 15, 19, 2, 6, 10, 14, 18, 1, 5, 9, 13, 17, 4, 8, 12, 16, 20});
    try {
        ext.top_n_candidates(8, 5, {});
        FAIL("expected an error for user 8");
    } catch (const Error& e) {
        CHECK(std::string(e.what()).find("user 8") != std::string::npos);
    }
    std::istringstream bad("1,2\n");
    CHECK_THROWS_AS(ExternalScores::parse(bad, "bad"), ParseFileError);
}

TEST_CASE("exported MF candidates re-import unchanged") {
    auto data = random_ratings(15, 40, 10, 4);
    MfHyperParams h;
    h.epochs = 5;
    auto mf = MfModel::train(data, h);
    auto history = training_history(data);
    std::vector<CandidateSet> sets;
    for (UserId u = 1; u <= 15; ++u) sets.push_back(mf.top_n_candidates(u, 20, history[u]));
    std::stringstream csv;
    write_candidates_csv(csv, sets);
    auto ext = ExternalScores::parse(csv, "mf-export");
    for (const auto& s : sets) {
        auto back = ext.top_n_candidates(s.user, 20, history[s.user]);
        CHECK(back.entries == s.entries);
    }
}

TEST_CASE("model files round-trip") {
    testing::TempDir dir;
    auto data = random_ratings(15, 20, 8, 6);
    MfHyperParams h;
    h.epochs = 3;
    auto mf = MfModel::train(data, h);
    auto knn = ItemKnnModel::train(data, {});
    save_model(dir / "mf.json", mf);
    save_model(dir / "knn.json", knn);
    auto mf2 = load_model(dir / "mf.json");
    auto knn2 = load_model(dir / "knn.json");
    for (int u = 1; u <= 15; ++u) {
        for (int i = 1; i <= 20; ++i) {
            CHECK(mf2->predict_rating(u, i) == mf.predict_rating(u, i));
            CHECK(knn2->predict_rating(u, i) == knn.predict_rating(u, i));
        }
    }
    testing::write_file(dir / "junk.json", "{\"format\":\"other\"}");
    CHECK_THROWS(load_model(dir / "junk.json"));
}
