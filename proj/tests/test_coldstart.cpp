#include "doctest.h"
#include "support.hpp"

#include "chatrec/coldstart.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <sstream>
#include <thread>

using namespace chatrec;

namespace {

ExternalItemDoc make_doc(int i, int year = 1999) {
    char id[16];
    std::snprintf(id, sizeof id, "doc-%04d", i);
    return {id, "Title " + std::to_string(i), year, "Description " + std::to_string(i), "synthetic"};
}

// 1000 small-integer vectors; every tenth one repeats an earlier vector so
// exact similarity ties occur.
std::vector<std::vector<double>> synthetic_vectors(std::size_t n, std::size_t dim, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<std::vector<double>> out;
    for (std::size_t i = 0; i < n; ++i) {
        if (i % 10 == 9) {
            out.push_back(out[rng.below(i)]);
            continue;
        }
        std::vector<double> v(dim);
        do {
            for (auto& x : v) x = double(rng.below(5)) - 2.0;
        } while (std::all_of(v.begin(), v.end(), [](double x) { return x == 0.0; }));
        out.push_back(v);
    }
    return out;
}

std::vector<double> unit(std::vector<double> v) {
    double s = 0;
    for (double x : v) s += x * x;
    s = std::sqrt(s);
    for (double& x : v) x /= s;
    return v;
}

// Cosine full scan with a complete sort.
std::vector<Retrieved> full_scan(const std::vector<std::pair<std::string, std::vector<double>>>& rows,
                                 const std::vector<double>& query, std::size_t k) {
    auto q = unit(query);
    std::vector<Retrieved> all;
    for (const auto& [id, v] : rows) {
        auto u = unit(v);
        double dot = 0;
        for (std::size_t i = 0; i < u.size(); ++i) dot += q[i] * u[i];
        all.push_back({id, dot});
    }
    std::sort(all.begin(), all.end(), [](const Retrieved& a, const Retrieved& b) {
        return a.similarity != b.similarity ? a.similarity > b.similarity : a.doc_id < b.doc_id;
    });
    all.resize(std::min(k, all.size()));
    return all;
}

}  // namespace

TEST_CASE("documents parse from JSON lines") {
    auto docs = load_docs(testing::fixtures() / "docs.jsonl");
    REQUIRE(docs.size() == 7);
    CHECK(docs[0].doc_id == "nr-001");
    CHECK(docs[0].display_title() == "Harbor Lights (1999)");
    CHECK(docs[0].embed_text().find("lighthouse") != std::string::npos);

    std::istringstream dup(R"({"doc_id":"a","title":"T","description":"d"}
{"doc_id":"a","title":"U","description":"e"})");
    CHECK_THROWS_AS(parse_docs(dup), ParseFileError);
    std::istringstream empty(R"({"doc_id":"a","title":"T","description":"  "})");
    CHECK_THROWS_AS(parse_docs(empty), ParseFileError);
}

TEST_CASE("retrieval equals a cosine full scan on 1000 vectors, ties included") {
    const auto vecs = synthetic_vectors(1000, 8, 77);
    EmbeddingCache cache("synthetic");
    std::vector<std::pair<std::string, std::vector<double>>> rows;
    for (std::size_t i = 0; i < vecs.size(); ++i) {
        auto d = make_doc(int(i));
        cache.put(d, vecs[i]);
        rows.emplace_back(d.doc_id, vecs[i]);
    }
    REQUIRE(cache.size() == 1000);
    Rng rng(5);
    std::size_t tied_queries = 0;
    for (int q = 0; q < 50; ++q) {
        // half the queries are cached vectors themselves, which always tie with their duplicates
        std::vector<double> query = q % 2 ? vecs[rng.below(vecs.size())] : synthetic_vectors(1, 8, 1000 + q)[0];
        auto got = cache.retrieve_vector(query, 10);
        auto want = full_scan(rows, query, 10);
        REQUIRE(got.size() == 10);
        for (std::size_t i = 0; i < 10; ++i) {
            CHECK(got[i].doc_id == want[i].doc_id);
            CHECK(got[i].similarity == doctest::Approx(want[i].similarity).epsilon(1e-12));
            if (i && got[i].similarity == got[i - 1].similarity) ++tied_queries;
        }
    }
    CHECK(tied_queries > 0);
    CHECK(cache.retrieve_vector(vecs[0], 5000).size() == 1000);
    CHECK_THROWS(cache.retrieve_vector(vecs[0], 0));
    CHECK_THROWS(cache.retrieve_vector({1.0, 2.0}, 3));
}

TEST_CASE("cache persist and reload is bit-identical") {
    testing::TempDir dir;
    const auto vecs = synthetic_vectors(1000, 8, 78);
    EmbeddingCache cache("synthetic");
    for (std::size_t i = 0; i < vecs.size(); ++i) cache.put(make_doc(int(i), 1990 + int(i % 10)), vecs[i]);
    cache.save(dir.path());
    const std::string bin = testing::read_file(dir / "vectors.bin");
    auto back = EmbeddingCache::load(dir.path());
    CHECK(back.size() == cache.size());
    CHECK(back.dimension() == 8);
    CHECK(back.model_id() == "synthetic");
    CHECK(back.max_release_year() == 1999);
    for (const auto& id : cache.doc_ids()) {
        auto a = cache.vector(id), b = back.vector(id);
        CHECK(std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0);
        CHECK(back.doc(id).title == cache.doc(id).title);
    }
    testing::TempDir again;
    back.save(again.path());
    CHECK(testing::read_file(again / "vectors.bin") == bin);
    CHECK(testing::read_file(again / "manifest.json") == testing::read_file(dir / "manifest.json"));
}

TEST_CASE("ingest counts added, updated and unchanged documents") {
    auto docs = load_docs(testing::fixtures() / "docs.jsonl");
    EchoProvider provider;
    EmbeddingCache cache("stub");
    auto first = cache.ingest(docs, provider);
    CHECK(first.added == 7);
    CHECK(first.skipped == 0);
    auto second = cache.ingest(docs, provider);
    CHECK(second.skipped == 7);
    docs[2].description += " Now with a twist.";
    auto third = cache.ingest(docs, provider);
    CHECK(third.updated == 1);
    CHECK(third.skipped == 6);
    CHECK(cache.max_release_year() == 1999);

    FunctionProvider failing([](const CompletionRequest&) { return std::string(); },
                             [](const std::string& t) -> EmbeddingVector {
                                 if (t.find("Underlake") != std::string::npos) throw ProviderError("refused");
                                 return stub_embedding(t);
                             });
    EmbeddingCache partial;
    auto rep = partial.ingest(load_docs(testing::fixtures() / "docs.jsonl"), failing);
    CHECK(rep.added == 6);
    REQUIRE(rep.failures.size() == 1);
    CHECK(rep.failures[0].first == "nr-007");
}

TEST_CASE("retrieval by text uses the provider's embedding") {
    auto docs = load_docs(testing::fixtures() / "docs.jsonl");
    EchoProvider provider;
    EmbeddingCache cache("stub");
    cache.ingest(docs, provider);
    auto hits = cache.retrieve(docs[3].embed_text(), 3, provider);
    REQUIRE(hits.size() == 3);
    CHECK(hits[0].doc_id == "nr-004");
    CHECK(hits[0].similarity == doctest::Approx(1.0).epsilon(1e-12));
    EmbeddingCache empty;
    CHECK_THROWS(empty.retrieve("x", 3, provider));
}

TEST_CASE("concurrent retrieval during ingest") {
    EchoProvider provider;
    EmbeddingCache cache("stub");
    cache.put(make_doc(0), stub_embedding("seed").values);
    std::vector<ExternalItemDoc> more;
    for (int i = 1; i <= 200; ++i) more.push_back(make_doc(i));
    std::thread writer([&] { cache.ingest(more, provider); });
    for (int i = 0; i < 200; ++i) {
        auto r = cache.retrieve_vector(stub_embedding("q").values, 5);
        CHECK_FALSE(r.empty());
    }
    writer.join();
    CHECK(cache.size() == 201);
}

TEST_CASE("cold-start query text and prompt") {
    CHECK(coldstart_query_text("new sci-fi", "likes action") == "new sci-fi\nlikes action");
    CHECK(coldstart_query_text("new sci-fi", "likes action", ColdstartQueryMode::request_only) == "new sci-fi");
    CHECK(coldstart_query_text("new sci-fi", "") == "new sci-fi");

    auto docs = load_docs(testing::fixtures() / "docs.jsonl");
    PromptForge forge(testing::micro().catalog);
    InteractionSummary empty;
    auto p = build_coldstart_prompt(forge, "anything new?", docs, testing::micro().users.at(1), empty);
    CHECK(p.bundle.expected_format == ExpectedFormat::ranked_list(5));
    CHECK(p.doc_ids.size() == 7);
    for (const auto& d : docs) CHECK(p.bundle.user_text.find(d.display_title()) != std::string::npos);
    CHECK(p.index.resolve("Cold Ledger (1998)") == 2);
    CHECK(p.index.resolve("The Long Pasture (1999)") == 4);

    std::vector<ExternalItemDoc> two(docs.begin(), docs.begin() + 2);
    CHECK(build_coldstart_prompt(forge, "", two, testing::micro().users.at(1), empty).bundle.expected_format ==
          ExpectedFormat::ranked_list(2));
    CHECK_THROWS(build_coldstart_prompt(forge, "", {}, testing::micro().users.at(1), empty));
}
