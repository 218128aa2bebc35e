#pragma once

#include "chatrec/coldstart.hpp"
#include "chatrec/llm.hpp"
#include "chatrec/parse.hpp"
#include "chatrec/prompt.hpp"
#include "chatrec/recsys.hpp"

#include <nlohmann/json.hpp>

#include <optional>
#include <set>
#include <string>
#include <vector>

namespace chatrec {

enum class TaskType { recommend, explain, detail_qa, cross_domain, chitchat };

std::string to_string(TaskType t);
TaskType task_type_from_string(const std::string& s);

struct TaskKind {
    TaskType type = TaskType::chitchat;
    std::optional<ItemId> item;  // explain and detail_qa
    std::set<Domain> domains;    // cross_domain
    bool by_classifier = false;  // decided by the model rather than the rule pass
    bool fallback = false;       // classifier gave no usable label

    nlohmann::json to_json() const;
};

struct Recommendation {
    ItemId item = 0;         // catalog id; unused for cold-start picks
    std::string doc_id;      // set for cold-start picks
    std::string title;
    std::string reason;
};

struct Reply {
    TaskKind kind;
    std::string text;
    std::optional<std::vector<Recommendation>> recommendations;  // present iff kind is recommend
    bool degraded = false;
    bool coldstart = false;
    std::string note;  // why a turn degraded

    nlohmann::json to_json() const;
};

struct Turn {
    std::string query;
    Reply reply;
};

struct ProbeRecord {
    ItemId item = 0;
    std::string verdict;
};

struct DialogueState {
    std::string session_id;
    UserId user_id = 0;
    std::vector<Turn> history;
    std::optional<CandidateSet> last_candidates;
    std::optional<std::vector<ItemId>> last_top5;
    std::optional<std::string> preference_summary;
    std::vector<ItemId> shown;  // every catalog item recommended so far, in order
    std::vector<ProbeRecord> probes;

    /// Structured transcript; pure function of the state.
    nlohmann::json to_json() const;
};

struct DialogueConfig {
    std::string model_id = "gpt-3.5-turbo";
    double temperature = 0.9;
    std::size_t candidate_count = 20;
    std::size_t top_k = 5;
    int max_retries = 3;
    PromptVariant variant = PromptVariant::standard;
    std::uint64_t seed = 42;
    /// Rerank the previous turn's candidates instead of fetching new ones.
    bool reuse_candidates = false;
    bool with_reasons = true;
    std::size_t history_cap = 20;
    /// Earlier (query, reply) pairs sent along with each request.
    std::size_t dialogue_context_turns = 4;
    std::size_t coldstart_k = 10;
    ColdstartQueryMode coldstart_query = ColdstartQueryMode::request_and_preferences;
    std::vector<std::string> recommend_vocabulary = {"recommend", "suggest", "suggestion", "want", "looking for",
                                                     "show me", "more like", "something like", "in the mood",
                                                     "what should i watch", "movies", "films", "another"};
    std::vector<std::string> why_vocabulary = {"why"};
    std::vector<std::string> detail_vocabulary = {"tell me about", "tell me more about", "what is", "what's",
                                                  "who directed", "who stars", "who is in", "plot of"};
    std::vector<std::string> newness_vocabulary = {"new release", "newly released", "latest", "recent release",
                                                   "just released", "new movies", "new films", "this year"};

    nlohmann::json to_json() const;
    /// Missing keys keep their defaults.
    static DialogueConfig from_json(const nlohmann::json& j);
};

/// Catalog item ids whose title appears in `text`, longest match first.
std::vector<ItemId> mentioned_items(const std::string& text, const std::vector<ItemId>& pool, const Catalog& catalog);
std::set<Domain> mentioned_domains(const std::string& text);
ParseOutcome<TaskType> parse_task_label(std::string_view text);

/// Session orchestrator: decides what a turn asks for, gathers candidates,
/// has the model rerank them and answers the other turn kinds directly.
///
/// Shares only immutable data between sessions; one state must not be used by
/// two threads at once.
class DialogueEngine {
public:
    DialogueEngine(const Catalog& catalog, const UserTable& users, const std::vector<RatingEvent>& history,
                   const CandidateSource& recommender, Provider& provider, DialogueConfig config = {},
                   TemplateSet templates = TemplateSet::builtin());

    void set_coldstart_cache(const EmbeddingCache* cache) { coldstart_ = cache; }
    void set_run_log(RunLog* log) { log_ = log; }
    const DialogueConfig& config() const { return config_; }
    const Catalog& catalog() const { return *catalog_; }
    const PromptForge& forge() const { return forge_; }
    Provider& provider() const { return *provider_; }

    /// Throws std::out_of_range for an unknown user.
    DialogueState start_session(UserId user, std::string session_id) const;

    TaskKind determine_task(const std::string& query, const DialogueState& state) const;
    Reply handle_turn(DialogueState& state, const std::string& query) const;

    /// Model's ordering of min(top_k, |candidates|) items. Throws RetryExhaustedError.
    RankedList rerank_candidates(const DialogueState& state, const CandidateSet& candidates, PromptVariant variant,
                                 const std::string& request = {}) const;

    /// Asks, inside the session, whether the user would like each item.
    std::vector<ProbeRecord> consistency_probe(DialogueState& state, const std::vector<ItemId>& items) const;

    InteractionSummary summary_for(UserId user) const;
    const UserProfile& profile_for(UserId user) const;

private:
    Reply recommend(DialogueState& state, const std::string& query, const TaskKind& kind) const;
    Reply recommend_coldstart(DialogueState& state, const std::string& query, const TaskKind& kind) const;
    bool wants_new_items(const std::string& query) const;
    std::vector<Message> prior_messages(const DialogueState& state) const;
    std::string ask(const DialogueState& state, const PromptBundle& bundle) const;

    const Catalog* catalog_;
    const UserTable* users_;
    const CandidateSource* recommender_;
    Provider* provider_;
    DialogueConfig config_;
    PromptForge forge_;
    std::map<UserId, std::vector<RatingEvent>> events_by_user_;
    std::map<UserId, ItemSet> seen_;
    const EmbeddingCache* coldstart_ = nullptr;
    RunLog* log_ = nullptr;
};

}  // namespace chatrec
