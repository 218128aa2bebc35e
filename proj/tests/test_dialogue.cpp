#include "doctest.h"
#include "support.hpp"

#include "chatrec/dialogue.hpp"

#include <algorithm>

using namespace chatrec;

namespace {

const ExternalScores& scores() {
    static const ExternalScores s = ExternalScores::load(testing::fixtures() / "micro" / "scores.csv");
    return s;
}

const Dataset& ds() { return testing::micro(); }

std::string listing(const std::vector<ItemId>& ids, bool reasons = false) {
    std::string out = "The current list is:\n";
    for (std::size_t i = 0; i < ids.size(); ++i) {
        out += std::to_string(i + 1) + "." + ds().catalog.at(ids[i]).title;
        if (reasons) out += " - reason " + std::to_string(i + 1);
        out += "\n";
    }
    return out;
}

CandidateSet candidates_for(UserId u, const std::vector<ItemId>& shown = {}) {
    ItemSet exclude = training_history(ds().events)[u];
    exclude.insert(shown.begin(), shown.end());
    return scores().top_n_candidates(u, 20, exclude);
}

struct Fixture {
    ScriptedProvider provider;
    DialogueConfig config;
    Fixture() {
        config.temperature = 0.0;
        config.max_retries = 3;
    }
    DialogueEngine engine() { return DialogueEngine(ds().catalog, ds().users, ds().events, scores(), provider, config); }
};

}  // namespace

TEST_CASE("rule pass decides common turns without a model call") {
    Fixture f;
    auto engine = f.engine();
    auto state = engine.start_session(1, "s");
    CHECK(engine.determine_task("I want some action movies", state).type == TaskType::recommend);
    CHECK(engine.determine_task("Can you recommend something funny?", state).type == TaskType::recommend);

    auto cross = engine.determine_task("Can you suggest books or podcasts I'd like?", state);
    CHECK(cross.type == TaskType::cross_domain);
    CHECK(cross.domains == std::set<Domain>{Domain::books, Domain::podcasts});

    state.shown = {8, 12};
    auto why = engine.determine_task("Why did you recommend Babe?", state);
    CHECK(why.type == TaskType::explain);
    CHECK(why.item == 8);
    auto why_usual = engine.determine_task("why The Usual Suspects?", state);
    CHECK(why_usual.item == 12);

    auto detail = engine.determine_task("Tell me about Braveheart", state);
    CHECK(detail.type == TaskType::detail_qa);
    CHECK(detail.item == 22);
    CHECK(f.provider.calls() == 0);
    CHECK_THROWS(engine.determine_task("   ", state));
}

TEST_CASE("unmatched turns go to the classifier") {
    Fixture f;
    f.provider.push("Label: EXPLAIN");
    f.provider.push("I think this is CHITCHAT");
    f.provider.push("no idea");
    f.provider.push("still nothing");
    f.provider.push("?");
    f.provider.push("...");
    auto engine = f.engine();
    auto state = engine.start_session(1, "s");
    state.shown = {8};
    state.last_top5 = std::vector<ItemId>{8};
    auto k = engine.determine_task("and the pig one?", state);
    CHECK(k.by_classifier);
    CHECK(k.type == TaskType::explain);
    CHECK(k.item == 8);
    CHECK(engine.determine_task("hello there", state).type == TaskType::chitchat);
    auto fb = engine.determine_task("hmm", state);
    CHECK(fb.type == TaskType::chitchat);
    CHECK(fb.fallback);
    CHECK(f.provider.calls() == 6);
}

TEST_CASE("task labels") {
    CHECK(parse_task_label("RECOMMEND").value() == TaskType::recommend);
    CHECK(parse_task_label("cross_domain please").value() == TaskType::cross_domain);
    CHECK(parse_task_label("Answer: detail").value() == TaskType::detail_qa);
    CHECK_FALSE(parse_task_label("RECOMMENDATION").ok());
}

TEST_CASE("a scripted top-5 comes back in order") {
    Fixture f;
    auto cands = candidates_for(1);
    REQUIRE(cands.size() == 20);
    auto ids = cands.ids();
    std::vector<ItemId> pick = {ids[2], ids[0], ids[6], ids[1], ids[8]};
    f.provider.push(listing(pick, true));
    auto engine = f.engine();
    auto state = engine.start_session(1, "s");
    auto reply = engine.handle_turn(state, "I want some movies");
    REQUIRE(reply.recommendations);
    std::vector<ItemId> got;
    for (const auto& r : *reply.recommendations) got.push_back(r.item);
    CHECK(got == pick);
    CHECK((*reply.recommendations)[0].reason == "reason 1");
    CHECK_FALSE(reply.degraded);
    CHECK(state.history.size() == 1);
    CHECK(state.last_top5 == pick);
    for (ItemId id : *state.last_top5) CHECK(state.last_candidates->contains(id));
    CHECK(state.shown == pick);
}

TEST_CASE("an out-of-set title is rejected and retried") {
    Fixture f;
    auto ids = candidates_for(1).ids();
    std::vector<ItemId> pick(ids.begin(), ids.begin() + 5);
    auto history_item = *training_history(ds().events)[1].begin();
    std::vector<ItemId> bad = {history_item, ids[1], ids[2], ids[3], ids[4]};
    f.provider.push(listing(bad));
    f.provider.push(listing(pick));
    RunLog log;
    auto engine = f.engine();
    engine.set_run_log(&log);
    auto state = engine.start_session(1, "s");
    auto reply = engine.handle_turn(state, "recommend something");
    CHECK_FALSE(reply.degraded);
    CHECK(state.last_top5 == pick);
    auto entries = log.entries();
    REQUIRE(entries.size() == 2);
    CHECK(entries[0].at("parse_outcome") == "unknown_title");
    CHECK(entries[1].at("attempt") == 2);
}

TEST_CASE("retry exhaustion degrades to the recommender order") {
    Fixture f;
    for (int i = 0; i < 4; ++i) f.provider.push("I'd rather not say.");
    auto engine = f.engine();
    auto state = engine.start_session(1, "s");
    auto reply = engine.handle_turn(state, "recommend something");
    CHECK(reply.degraded);
    auto ids = candidates_for(1).ids();
    CHECK(*state.last_top5 == std::vector<ItemId>(ids.begin(), ids.begin() + 5));
    CHECK(f.provider.calls() == 4);
}

TEST_CASE("too few candidates degrades without a model call") {
    Fixture f;
    f.config.top_k = 5;
    auto engine = f.engine();
    auto state = engine.start_session(1, "s");
    state.shown = candidates_for(1).ids();
    state.shown.resize(17);  // leaves three
    auto reply = engine.handle_turn(state, "recommend something");
    CHECK(reply.degraded);
    CHECK(reply.recommendations->size() == 3);
    CHECK(f.provider.calls() == 0);
}

TEST_CASE("a second recommend turn draws fresh candidates") {
    Fixture f;
    auto first = candidates_for(1).ids();
    std::vector<ItemId> pick1(first.begin(), first.begin() + 5);
    auto second = candidates_for(1, pick1).ids();
    std::vector<ItemId> pick2(second.begin(), second.begin() + 5);
    f.provider.push(listing(pick1));
    f.provider.push(listing(pick2));
    auto engine = f.engine();
    auto state = engine.start_session(1, "s");
    engine.handle_turn(state, "recommend something");
    engine.handle_turn(state, "more like #2 but newer, another one please");
    CHECK(state.history.size() == 2);
    CHECK(*state.last_top5 == pick2);
    for (ItemId id : pick1) CHECK_FALSE(state.last_candidates->contains(id));
    CHECK(state.shown.size() == 10);
}

TEST_CASE("reuse_candidates reranks the previous set") {
    Fixture f;
    f.config.reuse_candidates = true;
    auto ids = candidates_for(1).ids();
    f.provider.push(listing({ids[0], ids[1], ids[2], ids[3], ids[4]}));
    f.provider.push(listing({ids[4], ids[3], ids[2], ids[1], ids[0]}));
    auto engine = f.engine();
    auto state = engine.start_session(1, "s");
    engine.handle_turn(state, "recommend something");
    engine.handle_turn(state, "recommend again");
    CHECK(state.last_candidates->ids() == ids);
}

TEST_CASE("earlier turns travel with each request") {
    std::vector<CompletionRequest> seen;
    FunctionProvider p([&](const CompletionRequest& r) {
        seen.push_back(r);
        return std::string("Sure.");
    });
    DialogueConfig cfg;
    cfg.dialogue_context_turns = 2;
    DialogueEngine engine(ds().catalog, ds().users, ds().events, scores(), p, cfg);
    auto state = engine.start_session(2, "s");
    engine.handle_turn(state, "Can you suggest some books?");
    engine.handle_turn(state, "And music?");
    engine.handle_turn(state, "What about tv series?");
    REQUIRE(seen.size() == 3);
    // system, 2 earlier turns (user + assistant each), the new prompt
    CHECK(seen[2].messages.size() == 1 + 4 + 1);
    CHECK(seen[2].messages[1].content == "Can you suggest some books?");
    CHECK(seen[2].messages[2].content == "Sure.");
    CHECK(seen[2].annotations.at("task") == "crossdomain");
}

TEST_CASE("consistency probe covers candidates left out of the top 5") {
    Fixture f;
    auto ids = candidates_for(1).ids();
    std::vector<ItemId> llm_top = {ids[5], ids[6], ids[0], ids[7], ids[8]};
    f.provider.push(listing(llm_top));
    f.provider.push("Yes, they would.");
    f.provider.push("Probably not.");
    f.provider.push("Maybe.");
    auto engine = f.engine();
    auto state = engine.start_session(1, "s");
    engine.handle_turn(state, "recommend something");
    std::vector<ItemId> dropped;
    for (int i = 0; i < 5; ++i) {
        if (std::find(llm_top.begin(), llm_top.end(), ids[i]) == llm_top.end()) dropped.push_back(ids[i]);
    }
    REQUIRE(dropped.size() == 4);
    CHECK_THROWS(engine.consistency_probe(state, {llm_top[0]}));
    CHECK_THROWS(engine.consistency_probe(state, {}));
    auto records = engine.consistency_probe(state, {dropped[0], dropped[1], dropped[2]});
    REQUIRE(records.size() == 3);
    CHECK(records[0].verdict == "Yes, they would.");
    CHECK(state.probes.size() == 3);
    CHECK_THROWS_AS(engine.consistency_probe(state, {dropped[3]}), ScriptExhaustedError);
}

TEST_CASE("a scripted session is a pure function of data and script") {
    auto run = [] {
        Fixture f;
        auto ids = candidates_for(3).ids();
        f.provider.push(listing({ids[1], ids[0], ids[2], ids[3], ids[4]}, true));
        f.provider.push("Because it matches your taste.");
        f.provider.push("Here are some books.");
        auto engine = f.engine();
        auto state = engine.start_session(3, "fixed");
        engine.handle_turn(state, "recommend a movie");
        engine.handle_turn(state, "why " + ds().catalog.at(ids[0]).title + "?");
        engine.handle_turn(state, "any novels?");
        auto j = state.to_json();
        return j.dump();
    };
    const auto a = run();
    CHECK(a == run());
    auto j = nlohmann::json::parse(a);
    CHECK(j.at("turns").size() == 3);
}

TEST_CASE("new-release requests route to the document cache") {
    Fixture f;
    EchoProvider embedder;
    EmbeddingCache cache("stub");
    cache.ingest(load_docs(testing::fixtures() / "docs.jsonl"), embedder);
    auto ids = candidates_for(1).ids();
    f.provider.push(listing({ids[0], ids[1], ids[2], ids[3], ids[4]}));
    f.provider.push("Enjoys light comedies and family films.");
    f.provider.push("The current list is:\n1.Rocket Garden (1999) - for the family\n2.Second Chorus (1998)\n"
                    "3.Harbor Lights (1999)\n4.Cold Ledger (1998)\n5.Underlake (1999)");
    auto engine = f.engine();
    engine.set_coldstart_cache(&cache);
    auto state = engine.start_session(1, "s");
    engine.handle_turn(state, "recommend something");
    const auto top_before = state.last_top5;
    auto reply = engine.handle_turn(state, "Recommend the latest movies from 1999");
    CHECK(reply.coldstart);
    CHECK_FALSE(reply.degraded);
    REQUIRE(reply.recommendations->size() == 5);
    CHECK((*reply.recommendations)[0].doc_id == "nr-002");
    CHECK((*reply.recommendations)[0].reason == "for the family");
    CHECK(state.preference_summary == "Enjoys light comedies and family films.");
    CHECK(state.last_top5 == top_before);
    CHECK(f.provider.remaining() == 0);
}

TEST_CASE("a year beyond the catalog counts as a new-item request") {
    Fixture f;
    f.config.coldstart_query = ColdstartQueryMode::request_only;
    EchoProvider embedder;
    EmbeddingCache cache("stub");
    cache.ingest(load_docs(testing::fixtures() / "docs.jsonl"), embedder);
    for (int i = 0; i < 4; ++i) f.provider.push("nothing useful");
    auto engine = f.engine();
    engine.set_coldstart_cache(&cache);
    auto state = engine.start_session(1, "s");
    auto reply = engine.handle_turn(state, "recommend movies from 1998");
    CHECK(reply.coldstart);
    CHECK(reply.degraded);
    CHECK(reply.recommendations->size() == 5);
    CHECK_FALSE(state.preference_summary.has_value());
}

TEST_CASE("sessions and config") {
    Fixture f;
    auto engine = f.engine();
    CHECK_THROWS_AS(engine.start_session(999, "s"), std::out_of_range);
    DialogueConfig c;
    c.top_k = 3;
    c.variant = PromptVariant::w_top1;
    c.recommend_vocabulary = {"gimme"};
    auto back = DialogueConfig::from_json(c.to_json());
    CHECK(back.top_k == 3);
    CHECK(back.variant == PromptVariant::w_top1);
    CHECK(back.recommend_vocabulary == std::vector<std::string>{"gimme"});
    CHECK(DialogueConfig::from_json({{"temperature", 0.3}}).top_k == 5);
}
