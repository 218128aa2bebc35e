#pragma once

#include "chatrec/dataset.hpp"
#include "chatrec/recsys.hpp"

#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

namespace chatrec {

enum class PromptVariant { standard, w_random, w_top1 };

std::string to_string(PromptVariant v);
PromptVariant prompt_variant_from_string(const std::string& s);

struct ExpectedFormat {
    enum class Kind { ranked_list, rating_value, free_text, label };
    Kind kind = Kind::free_text;
    std::size_t count = 0;  // ranked_list length

    static ExpectedFormat ranked_list(std::size_t n) { return {Kind::ranked_list, n}; }
    static ExpectedFormat rating_value() { return {Kind::rating_value, 0}; }
    static ExpectedFormat free_text() { return {Kind::free_text, 0}; }
    static ExpectedFormat label() { return {Kind::label, 0}; }

    friend bool operator==(const ExpectedFormat&, const ExpectedFormat&) = default;
};

std::string to_string(const ExpectedFormat& f);

/// A fully rendered prompt plus everything needed to send and check it.
struct PromptBundle {
    std::string template_name;
    std::string system_text;
    std::string user_text;
    PromptVariant variant = PromptVariant::standard;
    double temperature = 0.9;
    ExpectedFormat expected_format;
    std::vector<ItemId> candidate_order;     // order as written into user_text
    std::vector<ItemId> recommender_order;   // order the recommender produced
    bool profile_only = false;               // rendered without any rating history

    friend bool operator==(const PromptBundle&, const PromptBundle&) = default;
};

/// The user's most recent rated items, oldest first, at most `cap` lines of
/// the form "Title (Year) — rated r/5".
struct InteractionSummary {
    UserId user = 0;
    std::vector<std::string> lines;
    std::vector<ItemId> items;
    std::size_t cap = 20;

    bool empty() const { return lines.empty(); }
};

InteractionSummary summarize_history(UserId user, const std::vector<RatingEvent>& events,
                                     const Catalog& catalog, std::size_t cap = 20);

/// Named prompt templates with `{{field}}` placeholders.
///
/// Built-in defaults are compiled from the files in templates/; load_dir()
/// overrides any of them with `<name>.txt` files from a directory, so wording
/// can change without a rebuild. One trailing newline is stripped per file.
class TemplateSet {
public:
    static TemplateSet builtin();
    static TemplateSet load_dir(const std::filesystem::path& dir);

    void set(const std::string& name, std::string text);
    const std::string& get(const std::string& name) const;
    bool has(const std::string& name) const { return templates_.count(name) > 0; }
    std::vector<std::string> names() const;

    /// Replaces every {{field}}; an unknown field or an unclosed "{{" is an error.
    std::string render(const std::string& name, const std::map<std::string, std::string>& fields) const;

private:
    std::map<std::string, std::string> templates_;
};

std::string render_template(std::string_view text, const std::map<std::string, std::string>& fields);

enum class Domain { books, tv, podcasts, games, music };

std::string to_string(Domain d);
Domain domain_from_string(const std::string& s);
const std::vector<Domain>& all_domains();

struct TopkOptions {
    std::size_t count = 5;                  // titles requested back
    std::size_t required_candidates = 20;   // 0 accepts any non-empty set
    double temperature = 0.9;
    std::string request;                    // user's words, empty in batch runs
    bool with_reasons = false;
};

/// Prompt builders. All are pure: identical inputs give identical bundles.
class PromptForge {
public:
    PromptForge(const Catalog& catalog, TemplateSet templates = TemplateSet::builtin())
        : catalog_(&catalog), templates_(std::move(templates)) {}

    const TemplateSet& templates() const { return templates_; }
    const Catalog& catalog() const { return *catalog_; }

    /// w_random shuffles the candidates with Rng(rng_seed); w_top1 drops the
    /// sentence naming the recommender's first candidate.
    PromptBundle build_topk_prompt(const UserProfile& profile, const InteractionSummary& summary,
                                   const CandidateSet& candidates, PromptVariant variant,
                                   std::uint64_t rng_seed, const TopkOptions& options = {}) const;
    PromptBundle build_rating_prompt(const UserProfile& profile, const InteractionSummary& summary,
                                     ItemId target, double temperature = 0.9) const;
    PromptBundle build_preference_summary_prompt(const UserProfile& profile,
                                                 const InteractionSummary& summary,
                                                 double temperature = 0.9) const;
    /// `recommended` lists every item shown to the user this session.
    PromptBundle build_explanation_prompt(ItemId item, const UserProfile& profile,
                                          const InteractionSummary& summary,
                                          const std::vector<ItemId>& recommended,
                                          double temperature = 0.9) const;
    PromptBundle build_crossdomain_prompt(const UserProfile& profile, const InteractionSummary& summary,
                                          const std::set<Domain>& domains, double temperature = 0.9) const;
    PromptBundle build_detail_prompt(ItemId item, const UserProfile& profile, const std::string& query,
                                     double temperature = 0.9) const;
    PromptBundle build_chitchat_prompt(const UserProfile& profile, const std::string& query,
                                       double temperature = 0.9) const;
    /// `recent` holds earlier (query, reply) pairs for context.
    PromptBundle build_task_prompt(const std::string& query,
                                   const std::vector<std::pair<std::string, std::string>>& recent) const;
    PromptBundle build_probe_prompt(ItemId item, double temperature = 0.9) const;

    std::string render_profile(const UserProfile& profile) const;
    /// History block, or the profile-only sentence when the summary is empty.
    std::string render_history(const InteractionSummary& summary) const;

private:
    PromptBundle base(const std::string& name, double temperature) const;

    const Catalog* catalog_;
    TemplateSet templates_;
};

}  // namespace chatrec
