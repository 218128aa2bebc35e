#include "chatrec/dialogue.hpp"

#include <algorithm>
#include <cctype>
#include <stdexcept>

namespace chatrec {

using nlohmann::json;

std::string to_string(TaskType t) {
    switch (t) {
        case TaskType::recommend: return "recommend";
        case TaskType::explain: return "explain";
        case TaskType::detail_qa: return "detail_qa";
        case TaskType::cross_domain: return "cross_domain";
        case TaskType::chitchat: return "chitchat";
    }
    return "chitchat";
}

TaskType task_type_from_string(const std::string& s) {
    for (TaskType t : {TaskType::recommend, TaskType::explain, TaskType::detail_qa, TaskType::cross_domain,
                       TaskType::chitchat}) {
        if (to_string(t) == s) return t;
    }
    throw std::invalid_argument("unknown task type '" + s + "'");
}

json TaskKind::to_json() const {
    json j = {{"type", to_string(type)}};
    if (item) j["item"] = *item;
    if (!domains.empty()) {
        j["domains"] = json::array();
        for (Domain d : domains) j["domains"].push_back(to_string(d));
    }
    if (by_classifier) j["by_classifier"] = true;
    if (fallback) j["fallback"] = true;
    return j;
}

json Reply::to_json() const {
    json j = {{"kind", kind.to_json()}, {"text", text}, {"degraded", degraded}};
    if (coldstart) j["coldstart"] = true;
    if (!note.empty()) j["note"] = note;
    if (recommendations) {
        j["recommendations"] = json::array();
        for (const auto& r : *recommendations) {
            json c = {{"title", r.title}, {"reason", r.reason}};
            if (r.doc_id.empty()) {
                c["item_id"] = r.item;
            } else {
                c["doc_id"] = r.doc_id;
            }
            j["recommendations"].push_back(c);
        }
    }
    return j;
}

json DialogueState::to_json() const {
    json turns = json::array();
    for (const auto& t : history) turns.push_back({{"query", t.query}, {"reply", t.reply.to_json()}});
    json j = {{"session_id", session_id}, {"user_id", user_id}, {"turns", turns}};
    if (last_top5) j["last_top5"] = *last_top5;
    if (last_candidates) j["last_candidates"] = last_candidates->ids();
    if (preference_summary) j["preference_summary"] = *preference_summary;
    if (!probes.empty()) {
        j["probes"] = json::array();
        for (const auto& p : probes) j["probes"].push_back({{"item", p.item}, {"verdict", p.verdict}});
    }
    return j;
}

json DialogueConfig::to_json() const {
    return {{"model_id", model_id},
            {"temperature", temperature},
            {"candidate_count", candidate_count},
            {"top_k", top_k},
            {"max_retries", max_retries},
            {"variant", chatrec::to_string(variant)},
            {"seed", seed},
            {"reuse_candidates", reuse_candidates},
            {"with_reasons", with_reasons},
            {"history_cap", history_cap},
            {"dialogue_context_turns", dialogue_context_turns},
            {"coldstart_k", coldstart_k},
            {"coldstart_query",
             coldstart_query == ColdstartQueryMode::request_only ? "request_only" : "request_and_preferences"},
            {"recommend_vocabulary", recommend_vocabulary},
            {"why_vocabulary", why_vocabulary},
            {"detail_vocabulary", detail_vocabulary},
            {"newness_vocabulary", newness_vocabulary}};
}

DialogueConfig DialogueConfig::from_json(const json& j) {
    DialogueConfig c;
    c.model_id = j.value("model_id", c.model_id);
    c.temperature = j.value("temperature", c.temperature);
    c.candidate_count = j.value("candidate_count", c.candidate_count);
    c.top_k = j.value("top_k", c.top_k);
    c.max_retries = j.value("max_retries", c.max_retries);
    if (j.contains("variant")) c.variant = prompt_variant_from_string(j.at("variant").get<std::string>());
    c.seed = j.value("seed", c.seed);
    c.reuse_candidates = j.value("reuse_candidates", c.reuse_candidates);
    c.with_reasons = j.value("with_reasons", c.with_reasons);
    c.history_cap = j.value("history_cap", c.history_cap);
    c.dialogue_context_turns = j.value("dialogue_context_turns", c.dialogue_context_turns);
    c.coldstart_k = j.value("coldstart_k", c.coldstart_k);
    if (j.contains("coldstart_query")) {
        const auto mode = j.at("coldstart_query").get<std::string>();
        if (mode == "request_only") {
            c.coldstart_query = ColdstartQueryMode::request_only;
        } else if (mode == "request_and_preferences") {
            c.coldstart_query = ColdstartQueryMode::request_and_preferences;
        } else {
            throw std::invalid_argument("unknown coldstart_query mode '" + mode + "'");
        }
    }
    c.recommend_vocabulary = j.value("recommend_vocabulary", c.recommend_vocabulary);
    c.why_vocabulary = j.value("why_vocabulary", c.why_vocabulary);
    c.detail_vocabulary = j.value("detail_vocabulary", c.detail_vocabulary);
    c.newness_vocabulary = j.value("newness_vocabulary", c.newness_vocabulary);
    if (c.top_k == 0 || c.candidate_count < c.top_k) throw std::invalid_argument("need candidate_count >= top_k >= 1");
    if (c.max_retries < 0) throw std::invalid_argument("max_retries must be >= 0");
    return c;
}

// ---------------------------------------------------------------------------

namespace {

bool is_word_char(char c) { return std::isalnum(static_cast<unsigned char>(c)) != 0; }

/// `needle` occurs in `hay` without alphanumerics directly on either side.
bool contains_phrase(const std::string& hay, const std::string& needle) {
    if (needle.empty()) return false;
    for (std::size_t pos = hay.find(needle); pos != std::string::npos; pos = hay.find(needle, pos + 1)) {
        const bool left = pos == 0 || !is_word_char(hay[pos - 1]) || !is_word_char(needle.front());
        const std::size_t end = pos + needle.size();
        const bool right = end >= hay.size() || !is_word_char(hay[end]) || !is_word_char(needle.back());
        if (left && right) return true;
    }
    return false;
}

bool contains_any(const std::string& lower, const std::vector<std::string>& phrases) {
    return std::any_of(phrases.begin(), phrases.end(),
                       [&](const std::string& p) { return contains_phrase(lower, to_lower(p)); });
}

/// Lowercase spellings a user might type for a catalog title.
std::vector<std::string> title_keys(const std::string& title) {
    std::vector<std::string> keys = {to_lower(title)};
    std::string base = to_lower(title_without_year(title));
    keys.push_back(base);
    for (const char* art : {"the", "a", "an"}) {
        const std::string suffix = std::string(", ") + art;
        if (base.size() > suffix.size() && base.compare(base.size() - suffix.size(), suffix.size(), suffix) == 0) {
            keys.push_back(std::string(art) + " " + base.substr(0, base.size() - suffix.size()));
            keys.push_back(base.substr(0, base.size() - suffix.size()));
        }
    }
    return keys;
}

std::string render_recommendations(const std::vector<Recommendation>& recs, bool degraded) {
    std::string out = degraded ? "Here are the top picks from your recommender:\n" : "Here are my recommendations:\n";
    for (std::size_t i = 0; i < recs.size(); ++i) {
        out += std::to_string(i + 1) + ". " + recs[i].title;
        if (!recs[i].reason.empty()) out += " - " + recs[i].reason;
        out += '\n';
    }
    if (!out.empty() && out.back() == '\n') out.pop_back();
    return out;
}

}  // namespace

std::vector<ItemId> mentioned_items(const std::string& text, const std::vector<ItemId>& pool,
                                    const Catalog& catalog) {
    const std::string lower = to_lower(text);
    std::vector<std::pair<std::size_t, ItemId>> hits;  // (matched length, id)
    for (ItemId id : pool) {
        const Item* item = catalog.find(id);
        if (!item) continue;
        std::size_t best = 0;
        for (const auto& key : title_keys(item->title)) {
            if (key.size() >= 2 && key.size() > best && contains_phrase(lower, key)) best = key.size();
        }
        if (best) hits.emplace_back(best, id);
    }
    std::sort(hits.begin(), hits.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first > b.first;
        return a.second < b.second;
    });
    std::vector<ItemId> out;
    for (const auto& [_, id] : hits) {
        if (std::find(out.begin(), out.end(), id) == out.end()) out.push_back(id);
    }
    return out;
}

std::set<Domain> mentioned_domains(const std::string& text) {
    static const std::vector<std::pair<std::string, Domain>> nouns = {
        {"book", Domain::books},         {"books", Domain::books},        {"novel", Domain::books},
        {"novels", Domain::books},       {"tv", Domain::tv},              {"tv series", Domain::tv},
        {"tv shows", Domain::tv},        {"television", Domain::tv},      {"series", Domain::tv},
        {"podcast", Domain::podcasts},   {"podcasts", Domain::podcasts},  {"game", Domain::games},
        {"games", Domain::games},        {"video games", Domain::games},  {"music", Domain::music},
        {"songs", Domain::music},        {"albums", Domain::music},       {"album", Domain::music},
        {"bands", Domain::music},        {"artists", Domain::music}};
    const std::string lower = to_lower(text);
    std::set<Domain> out;
    for (const auto& [noun, d] : nouns) {
        if (contains_phrase(lower, noun)) out.insert(d);
    }
    return out;
}

ParseOutcome<TaskType> parse_task_label(std::string_view text) {
    static const std::vector<std::pair<std::string, TaskType>> labels = {
        {"RECOMMEND", TaskType::recommend}, {"EXPLAIN", TaskType::explain},
        {"DETAIL", TaskType::detail_qa},    {"CROSS_DOMAIN", TaskType::cross_domain},
        {"CROSS-DOMAIN", TaskType::cross_domain}, {"CHITCHAT", TaskType::chitchat}};
    std::string upper(text);
    std::transform(upper.begin(), upper.end(), upper.begin(),
                   [](unsigned char c) { return static_cast<char>(std::toupper(c)); });
    std::size_t best_pos = std::string::npos;
    TaskType best = TaskType::chitchat;
    for (const auto& [label, type] : labels) {
        for (std::size_t pos = upper.find(label); pos != std::string::npos; pos = upper.find(label, pos + 1)) {
            const std::size_t end = pos + label.size();
            const bool left = pos == 0 || !(is_word_char(upper[pos - 1]) || upper[pos - 1] == '_');
            const bool right = end >= upper.size() || !(is_word_char(upper[end]) || upper[end] == '_');
            if (left && right && pos < best_pos) {
                best_pos = pos;
                best = type;
                break;
            }
        }
    }
    if (best_pos == std::string::npos) {
        return ParseError{ParseError::Kind::unknown_label, "no task label in \"" + std::string(text.substr(0, 80)) + "\""};
    }
    return best;
}

// ---------------------------------------------------------------------------

DialogueEngine::DialogueEngine(const Catalog& catalog, const UserTable& users, const std::vector<RatingEvent>& history,
                               const CandidateSource& recommender, Provider& provider, DialogueConfig config,
                               TemplateSet templates)
    : catalog_(&catalog),
      users_(&users),
      recommender_(&recommender),
      provider_(&provider),
      config_(std::move(config)),
      forge_(catalog, std::move(templates)) {
    for (const auto& ev : history) events_by_user_[ev.user].push_back(ev);
    seen_ = training_history(history);
}

const UserProfile& DialogueEngine::profile_for(UserId user) const {
    auto it = users_->find(user);
    if (it == users_->end()) throw std::out_of_range("unknown user " + std::to_string(user));
    return it->second;
}

InteractionSummary DialogueEngine::summary_for(UserId user) const {
    auto it = events_by_user_.find(user);
    if (it == events_by_user_.end()) return InteractionSummary{user, {}, {}, config_.history_cap};
    return summarize_history(user, it->second, *catalog_, config_.history_cap);
}

DialogueState DialogueEngine::start_session(UserId user, std::string session_id) const {
    profile_for(user);
    DialogueState s;
    s.session_id = std::move(session_id);
    s.user_id = user;
    return s;
}

std::vector<Message> DialogueEngine::prior_messages(const DialogueState& state) const {
    std::vector<Message> out;
    const std::size_t n = state.history.size();
    const std::size_t from = n > config_.dialogue_context_turns ? n - config_.dialogue_context_turns : 0;
    for (std::size_t i = from; i < n; ++i) {
        out.push_back({Role::user, state.history[i].query});
        out.push_back({Role::assistant, state.history[i].reply.text});
    }
    return out;
}

std::string DialogueEngine::ask(const DialogueState& state, const PromptBundle& bundle) const {
    return complete_logged(*provider_, make_request(bundle, config_.model_id, prior_messages(state), catalog_), log_)
        .text;
}

TaskKind DialogueEngine::determine_task(const std::string& query, const DialogueState& state) const {
    if (trim(query).empty()) throw std::invalid_argument("empty query");
    const std::string lower = to_lower(query);
    TaskKind kind;

    if (contains_any(lower, config_.why_vocabulary)) {
        auto hits = mentioned_items(query, state.shown, *catalog_);
        if (!hits.empty()) {
            kind.type = TaskType::explain;
            kind.item = hits.front();
            return kind;
        }
    }
    if (auto domains = mentioned_domains(query); !domains.empty()) {
        kind.type = TaskType::cross_domain;
        kind.domains = std::move(domains);
        return kind;
    }
    if (contains_any(lower, config_.detail_vocabulary)) {
        std::vector<ItemId> all;
        for (const auto& it : catalog_->items()) all.push_back(it.id);
        auto hits = mentioned_items(query, all, *catalog_);
        if (!hits.empty()) {
            kind.type = TaskType::detail_qa;
            kind.item = hits.front();
            return kind;
        }
    }
    if (contains_any(lower, config_.recommend_vocabulary)) {
        kind.type = TaskType::recommend;
        return kind;
    }

    // Nothing matched: let the model label the turn.
    kind.by_classifier = true;
    std::vector<std::pair<std::string, std::string>> recent;
    for (const auto& t : state.history) recent.emplace_back(t.query, t.reply.text);
    if (recent.size() > config_.dialogue_context_turns) {
        recent.erase(recent.begin(), recent.end() - static_cast<std::ptrdiff_t>(config_.dialogue_context_turns));
    }
    const auto bundle = forge_.build_task_prompt(query, recent);
    try {
        auto label = complete_with_retry<TaskType>(*provider_, make_request(bundle, config_.model_id), parse_task_label,
                                                   config_.max_retries, log_);
        kind.type = label.value;
    } catch (const RetryExhaustedError& e) {
        if (log_) log_->note({{"event", "task_label_fallback"}, {"session_id", state.session_id}, {"detail", e.what()}});
        kind.type = TaskType::chitchat;
        kind.fallback = true;
        return kind;
    }
    switch (kind.type) {
        case TaskType::explain: {
            auto hits = mentioned_items(query, state.shown, *catalog_);
            if (hits.empty() && state.last_top5 && !state.last_top5->empty()) hits = {state.last_top5->front()};
            if (hits.empty()) {
                kind.type = TaskType::chitchat;
                kind.fallback = true;
            } else {
                kind.item = hits.front();
            }
            break;
        }
        case TaskType::detail_qa: {
            std::vector<ItemId> pool = state.shown;
            auto hits = mentioned_items(query, pool, *catalog_);
            if (hits.empty()) {
                pool.clear();
                for (const auto& it : catalog_->items()) pool.push_back(it.id);
                hits = mentioned_items(query, pool, *catalog_);
            }
            if (hits.empty()) {
                kind.type = TaskType::chitchat;
                kind.fallback = true;
            } else {
                kind.item = hits.front();
            }
            break;
        }
        case TaskType::cross_domain:
            kind.domains = mentioned_domains(query);
            if (kind.domains.empty()) kind.domains = {all_domains().begin(), all_domains().end()};
            break;
        default: break;
    }
    if (kind.fallback && log_) {
        log_->note({{"event", "task_label_fallback"}, {"session_id", state.session_id},
                    {"detail", "label needs an item the query does not name"}});
    }
    return kind;
}

RankedList DialogueEngine::rerank_candidates(const DialogueState& state, const CandidateSet& candidates,
                                             PromptVariant variant, const std::string& request) const {
    if (candidates.size() < config_.top_k) {
        throw std::invalid_argument("rerank needs at least " + std::to_string(config_.top_k) + " candidates, got " +
                                    std::to_string(candidates.size()));
    }
    TopkOptions opts;
    opts.count = config_.top_k;
    opts.required_candidates = 0;
    opts.temperature = config_.temperature;
    opts.request = request;
    opts.with_reasons = config_.with_reasons;
    const std::uint64_t seed = mix_seed(mix_seed(config_.seed, static_cast<std::uint64_t>(state.user_id)),
                                        state.history.size());
    const auto bundle = forge_.build_topk_prompt(profile_for(state.user_id), summary_for(state.user_id), candidates,
                                                 variant, seed, opts);
    const auto request_msg = make_request(bundle, config_.model_id, prior_messages(state), catalog_);
    const TitleIndex index = TitleIndex::from_items(*catalog_, candidates.ids());
    const std::size_t n = config_.top_k;
    auto parsed = complete_with_retry<RankedList>(
        *provider_, request_msg, [&](std::string_view text) { return parse_ranked_list(text, n, index); },
        config_.max_retries, log_);
    return std::move(parsed.value);
}

bool DialogueEngine::wants_new_items(const std::string& query) const {
    if (contains_any(to_lower(query), config_.newness_vocabulary)) return true;
    const int max_year = catalog_->max_release_year().value_or(0);
    for (std::size_t i = 0; i + 4 <= query.size(); ++i) {
        if (i > 0 && std::isdigit(static_cast<unsigned char>(query[i - 1]))) continue;
        if (i + 4 < query.size() && std::isdigit(static_cast<unsigned char>(query[i + 4]))) continue;
        const std::string digits = query.substr(i, 4);
        if (!std::all_of(digits.begin(), digits.end(), [](unsigned char c) { return std::isdigit(c); })) continue;
        const int year = std::stoi(digits);
        if (year >= 1900 && year <= 2199 && year > max_year) return true;
    }
    return false;
}

Reply DialogueEngine::recommend(DialogueState& state, const std::string& query, const TaskKind& kind) const {
    CandidateSet candidates;
    if (config_.reuse_candidates && state.last_candidates) {
        candidates = *state.last_candidates;
    } else {
        ItemSet exclude;
        if (auto it = seen_.find(state.user_id); it != seen_.end()) exclude = it->second;
        exclude.insert(state.shown.begin(), state.shown.end());
        candidates = recommender_->top_n_candidates(state.user_id, config_.candidate_count, exclude);
    }

    Reply reply;
    reply.kind = kind;
    std::vector<Recommendation> recs;
    if (candidates.size() < config_.top_k) {
        reply.degraded = true;
        reply.note = "only " + std::to_string(candidates.size()) + " candidates available";
    } else {
        try {
            RankedList ranked = rerank_candidates(state, candidates, config_.variant, query);
            for (std::size_t i = 0; i < ranked.ids.size(); ++i) {
                recs.push_back({ranked.ids[i], "", catalog_->at(ranked.ids[i]).title,
                                i < ranked.reasons.size() ? ranked.reasons[i] : ""});
            }
        } catch (const RetryExhaustedError& e) {
            reply.degraded = true;
            reply.note = e.what();
        } catch (const Error& e) {
            reply.degraded = true;
            reply.note = e.what();
        }
    }
    if (reply.degraded) {
        const std::size_t n = std::min(config_.top_k, candidates.size());
        for (std::size_t i = 0; i < n; ++i) {
            const ItemId id = candidates.entries[i].item;
            recs.push_back({id, "", catalog_->at(id).title, ""});
        }
        if (log_) log_->note({{"event", "degraded_fallback"}, {"session_id", state.session_id}, {"detail", reply.note}});
    }
    std::vector<ItemId> top;
    for (const auto& r : recs) {
        top.push_back(r.item);
        state.shown.push_back(r.item);
    }
    state.last_candidates = std::move(candidates);
    state.last_top5 = std::move(top);
    reply.text = render_recommendations(recs, reply.degraded);
    reply.recommendations = std::move(recs);
    return reply;
}

Reply DialogueEngine::recommend_coldstart(DialogueState& state, const std::string& query, const TaskKind& kind) const {
    const UserProfile& profile = profile_for(state.user_id);
    const InteractionSummary summary = summary_for(state.user_id);
    if (config_.coldstart_query == ColdstartQueryMode::request_and_preferences && !state.preference_summary &&
        !summary.empty()) {
        const auto bundle = forge_.build_preference_summary_prompt(profile, summary, config_.temperature);
        state.preference_summary = ask(state, bundle);
    }
    const std::string text =
        coldstart_query_text(query, state.preference_summary.value_or(""), config_.coldstart_query);
    std::vector<ExternalItemDoc> docs;
    for (const auto& r : coldstart_->retrieve(text, config_.coldstart_k, *provider_)) docs.push_back(coldstart_->doc(r.doc_id));

    const ColdstartPrompt prompt = build_coldstart_prompt(forge_, query, docs, profile, summary, config_.temperature);
    CompletionRequest request = make_request(prompt.bundle, config_.model_id, prior_messages(state));
    const std::size_t n = prompt.bundle.expected_format.count;
    json top = json::array();
    for (std::size_t i = 0; i < n; ++i) top.push_back(docs[i].display_title());
    request.annotations["recommender_top"] = top;

    Reply reply;
    reply.kind = kind;
    reply.coldstart = true;
    std::vector<Recommendation> recs;
    try {
        auto parsed = complete_with_retry<RankedList>(
            *provider_, request, [&](std::string_view t) { return parse_ranked_list(t, n, prompt.index); },
            config_.max_retries, log_);
        for (std::size_t i = 0; i < parsed.value.ids.size(); ++i) {
            const auto& d = docs[static_cast<std::size_t>(parsed.value.ids[i])];
            recs.push_back({0, d.doc_id, d.display_title(),
                            i < parsed.value.reasons.size() ? parsed.value.reasons[i] : ""});
        }
    } catch (const Error& e) {
        reply.degraded = true;
        reply.note = e.what();
        for (std::size_t i = 0; i < n; ++i) recs.push_back({0, docs[i].doc_id, docs[i].display_title(), ""});
    }
    reply.text = render_recommendations(recs, reply.degraded);
    reply.recommendations = std::move(recs);
    return reply;
}

Reply DialogueEngine::handle_turn(DialogueState& state, const std::string& query) const {
    const UserProfile& profile = profile_for(state.user_id);
    TaskKind kind = determine_task(query, state);
    Reply reply;
    switch (kind.type) {
        case TaskType::recommend:
            if (coldstart_ && !coldstart_->empty() && wants_new_items(query)) {
                reply = recommend_coldstart(state, query, kind);
            } else {
                reply = recommend(state, query, kind);
            }
            break;
        case TaskType::explain:
            reply.kind = kind;
            reply.text = ask(state, forge_.build_explanation_prompt(*kind.item, profile, summary_for(state.user_id),
                                                                    state.shown, config_.temperature));
            break;
        case TaskType::detail_qa:
            reply.kind = kind;
            reply.text = ask(state, forge_.build_detail_prompt(*kind.item, profile, query, config_.temperature));
            break;
        case TaskType::cross_domain:
            reply.kind = kind;
            reply.text = ask(state, forge_.build_crossdomain_prompt(profile, summary_for(state.user_id), kind.domains,
                                                                    config_.temperature));
            break;
        case TaskType::chitchat:
            reply.kind = kind;
            reply.text = ask(state, forge_.build_chitchat_prompt(profile, query, config_.temperature));
            break;
    }
    state.history.push_back({query, reply});
    return reply;
}

std::vector<ProbeRecord> DialogueEngine::consistency_probe(DialogueState& state, const std::vector<ItemId>& items) const {
    if (items.empty()) throw std::invalid_argument("consistency probe needs at least one item");
    for (ItemId id : items) {
        const bool candidate = state.last_candidates && state.last_candidates->contains(id);
        const bool shown = state.last_top5 &&
                           std::find(state.last_top5->begin(), state.last_top5->end(), id) != state.last_top5->end();
        if (!candidate || shown) {
            throw std::invalid_argument("item " + std::to_string(id) +
                                        " is not a candidate left out of the latest recommendations");
        }
    }
    std::vector<ProbeRecord> out;
    for (ItemId id : items) {
        ProbeRecord rec{id, ask(state, forge_.build_probe_prompt(id, config_.temperature))};
        state.probes.push_back(rec);
        out.push_back(std::move(rec));
    }
    return out;
}

}  // namespace chatrec
