#include "chatrec/prompt.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace chatrec {

namespace detail {
// generated from templates/*.txt by cmake/EmbedTemplates.cmake
const std::vector<std::pair<std::string, std::string>>& builtin_template_table();
}  // namespace detail

std::string to_string(PromptVariant v) {
    switch (v) {
        case PromptVariant::standard: return "standard";
        case PromptVariant::w_random: return "w_random";
        case PromptVariant::w_top1: return "w_top1";
    }
    return "standard";
}

PromptVariant prompt_variant_from_string(const std::string& s) {
    if (s == "standard") return PromptVariant::standard;
    if (s == "w_random" || s == "w/random") return PromptVariant::w_random;
    if (s == "w_top1" || s == "w/top1") return PromptVariant::w_top1;
    throw std::invalid_argument("unknown prompt variant '" + s + "'");
}

std::string to_string(const ExpectedFormat& f) {
    switch (f.kind) {
        case ExpectedFormat::Kind::ranked_list: return "ranked_list(" + std::to_string(f.count) + ")";
        case ExpectedFormat::Kind::rating_value: return "rating_value";
        case ExpectedFormat::Kind::free_text: return "free_text";
        case ExpectedFormat::Kind::label: return "label";
    }
    return "free_text";
}

std::string to_string(Domain d) {
    switch (d) {
        case Domain::books: return "books";
        case Domain::tv: return "tv";
        case Domain::podcasts: return "podcasts";
        case Domain::games: return "games";
        case Domain::music: return "music";
    }
    return "books";
}

Domain domain_from_string(const std::string& s) {
    for (Domain d : all_domains()) {
        if (to_string(d) == s) return d;
    }
    throw std::invalid_argument("unknown domain '" + s + "'");
}

const std::vector<Domain>& all_domains() {
    static const std::vector<Domain> v = {Domain::books, Domain::tv, Domain::podcasts, Domain::games,
                                          Domain::music};
    return v;
}

InteractionSummary summarize_history(UserId user, const std::vector<RatingEvent>& events,
                                     const Catalog& catalog, std::size_t cap) {
    std::vector<RatingEvent> mine;
    for (const auto& ev : events) {
        if (ev.user == user) mine.push_back(ev);
    }
    std::stable_sort(mine.begin(), mine.end(), [](const RatingEvent& a, const RatingEvent& b) {
        if (a.timestamp != b.timestamp) return a.timestamp < b.timestamp;
        return a.item < b.item;
    });
    if (mine.size() > cap) mine.erase(mine.begin(), mine.end() - static_cast<std::ptrdiff_t>(cap));
    InteractionSummary s;
    s.user = user;
    s.cap = cap;
    for (const auto& ev : mine) {
        s.lines.push_back(catalog.at(ev.item).title + " — rated " + std::to_string(ev.rating) + "/5");
        s.items.push_back(ev.item);
    }
    return s;
}

// ---------------------------------------------------------------------------

std::string render_template(std::string_view text, const std::map<std::string, std::string>& fields) {
    std::string out;
    out.reserve(text.size() + 256);
    std::size_t pos = 0;
    while (pos < text.size()) {
        std::size_t open = text.find("{{", pos);
        if (open == std::string_view::npos) {
            out.append(text.substr(pos));
            break;
        }
        out.append(text.substr(pos, open - pos));
        std::size_t close = text.find("}}", open + 2);
        if (close == std::string_view::npos) throw Error("unclosed '{{' in template");
        const std::string name = trim(text.substr(open + 2, close - open - 2));
        auto it = fields.find(name);
        if (it == fields.end()) throw Error("template field '" + name + "' has no value");
        out.append(it->second);
        pos = close + 2;
    }
    return out;
}

TemplateSet TemplateSet::builtin() {
    TemplateSet set;
    for (const auto& [name, text] : detail::builtin_template_table()) set.set(name, text);
    return set;
}

TemplateSet TemplateSet::load_dir(const std::filesystem::path& dir) {
    TemplateSet set = builtin();
    if (!std::filesystem::is_directory(dir)) throw Error("template directory " + dir.string() + " not found");
    for (const auto& entry : std::filesystem::directory_iterator(dir)) {
        if (entry.path().extension() != ".txt") continue;
        std::ifstream in(entry.path(), std::ios::binary);
        std::stringstream buf;
        buf << in.rdbuf();
        set.set(entry.path().stem().string(), buf.str());
    }
    return set;
}

void TemplateSet::set(const std::string& name, std::string text) {
    if (!text.empty() && text.back() == '\n') text.pop_back();
    if (!text.empty() && text.back() == '\r') text.pop_back();
    templates_[name] = std::move(text);
}

const std::string& TemplateSet::get(const std::string& name) const {
    auto it = templates_.find(name);
    if (it == templates_.end()) throw Error("no template named '" + name + "'");
    return it->second;
}

std::vector<std::string> TemplateSet::names() const {
    std::vector<std::string> out;
    for (const auto& [name, _] : templates_) out.push_back(name);
    return out;
}

std::string TemplateSet::render(const std::string& name, const std::map<std::string, std::string>& fields) const {
    try {
        return render_template(get(name), fields);
    } catch (const Error& e) {
        throw Error("template '" + name + "': " + e.what());
    }
}

// ---------------------------------------------------------------------------

namespace {

std::string genre_list(const Item& item) {
    if (item.genres.empty()) return "genre unknown";
    std::string out;
    for (std::size_t i = 0; i < item.genres.size(); ++i) {
        if (i) out += ", ";
        out += item.genres[i];
    }
    return out;
}

}  // namespace

PromptBundle PromptForge::base(const std::string& name, double temperature) const {
    if (!(temperature >= 0.0 && temperature <= 2.0)) throw std::invalid_argument("temperature must be in [0, 2]");
    PromptBundle b;
    b.template_name = name;
    b.system_text = templates_.get("system");
    b.temperature = temperature;
    return b;
}

std::string PromptForge::render_profile(const UserProfile& profile) const {
    return templates_.render("profile", {{"age", std::to_string(profile.age)},
                                         {"gender", profile.gender == 'F' ? "woman" : "man"},
                                         {"occupation", profile.occupation}});
}

std::string PromptForge::render_history(const InteractionSummary& summary) const {
    if (summary.empty()) return templates_.get("history_empty");
    std::string lines;
    for (std::size_t i = 0; i < summary.lines.size(); ++i) {
        if (i) lines += '\n';
        lines += summary.lines[i];
    }
    return templates_.render("history_block", {{"lines", lines}});
}

PromptBundle PromptForge::build_topk_prompt(const UserProfile& profile, const InteractionSummary& summary,
                                            const CandidateSet& candidates, PromptVariant variant,
                                            std::uint64_t rng_seed, const TopkOptions& options) const {
    if (candidates.empty()) throw std::invalid_argument("top-k prompt needs a non-empty candidate set");
    if (options.required_candidates != 0 && candidates.size() != options.required_candidates) {
        throw std::invalid_argument("top-k prompt expects " + std::to_string(options.required_candidates) +
                                    " candidates, got " + std::to_string(candidates.size()));
    }
    if (options.count == 0 || options.count > candidates.size()) {
        throw std::invalid_argument("cannot ask for " + std::to_string(options.count) + " of " +
                                    std::to_string(candidates.size()) + " candidates");
    }
    PromptBundle b = base("topk", options.temperature);
    b.variant = variant;
    b.expected_format = ExpectedFormat::ranked_list(options.count);
    b.recommender_order = candidates.ids();
    b.candidate_order = b.recommender_order;
    if (variant == PromptVariant::w_random) {
        Rng rng(rng_seed);
        rng.shuffle(b.candidate_order);
    }
    b.profile_only = summary.empty();

    std::string list;
    for (std::size_t i = 0; i < b.candidate_order.size(); ++i) {
        if (i) list += '\n';
        list += "- " + catalog_->at(b.candidate_order[i]).title;
    }
    std::string background;
    if (variant != PromptVariant::w_top1) {
        background = templates_.render("topk_background",
                                       {{"top1", catalog_->at(b.recommender_order.front()).title}});
    }
    std::string request;
    if (!options.request.empty()) request = templates_.render("request", {{"query", options.request}});

    b.user_text = templates_.render(
        "topk", {{"profile", render_profile(profile)},
                 {"history", render_history(summary)},
                 {"request", request},
                 {"background", background},
                 {"candidate_count", std::to_string(candidates.size())},
                 {"candidates", list},
                 {"count", std::to_string(options.count)},
                 {"reason_rule", options.with_reasons ? templates_.get("topk_reason_rule") : ""}});
    return b;
}

PromptBundle PromptForge::build_rating_prompt(const UserProfile& profile, const InteractionSummary& summary,
                                              ItemId target, double temperature) const {
    const Item* item = catalog_->find(target);
    if (!item) throw std::invalid_argument("rating prompt: unknown item " + std::to_string(target));
    PromptBundle b = base("rating", temperature);
    b.expected_format = ExpectedFormat::rating_value();
    b.profile_only = summary.empty();
    b.user_text = templates_.render("rating", {{"profile", render_profile(profile)},
                                               {"history", render_history(summary)},
                                               {"target", item->title}});
    return b;
}

PromptBundle PromptForge::build_preference_summary_prompt(const UserProfile& profile,
                                                          const InteractionSummary& summary,
                                                          double temperature) const {
    if (summary.empty()) throw std::invalid_argument("preference summary needs a non-empty history");
    PromptBundle b = base("preference_summary", temperature);
    b.expected_format = ExpectedFormat::free_text();
    b.user_text = templates_.render("preference_summary",
                                    {{"profile", render_profile(profile)}, {"history", render_history(summary)}});
    return b;
}

PromptBundle PromptForge::build_explanation_prompt(ItemId item, const UserProfile& profile,
                                                   const InteractionSummary& summary,
                                                   const std::vector<ItemId>& recommended,
                                                   double temperature) const {
    if (std::find(recommended.begin(), recommended.end(), item) == recommended.end()) {
        throw std::logic_error("explanation requested for item " + std::to_string(item) +
                               " that was never recommended in this session");
    }
    const Item& it = catalog_->at(item);
    PromptBundle b = base("explanation", temperature);
    b.expected_format = ExpectedFormat::free_text();
    b.profile_only = summary.empty();
    b.user_text = templates_.render("explanation", {{"profile", render_profile(profile)},
                                                    {"history", render_history(summary)},
                                                    {"item", it.title},
                                                    {"genres", genre_list(it)}});
    return b;
}

PromptBundle PromptForge::build_crossdomain_prompt(const UserProfile& profile, const InteractionSummary& summary,
                                                   const std::set<Domain>& domains, double temperature) const {
    if (domains.empty()) throw std::invalid_argument("cross-domain prompt needs at least one domain");
    static const std::map<Domain, std::string> labels = {{Domain::books, "books"},
                                                         {Domain::tv, "TV series"},
                                                         {Domain::podcasts, "podcasts"},
                                                         {Domain::games, "video games"},
                                                         {Domain::music, "music"}};
    std::string names;
    std::size_t i = 0;
    for (Domain d : domains) {
        if (i++) names += i == domains.size() ? " and " : ", ";
        names += labels.at(d);
    }
    PromptBundle b = base("crossdomain", temperature);
    b.expected_format = ExpectedFormat::free_text();
    b.profile_only = summary.empty();
    b.user_text = templates_.render("crossdomain", {{"profile", render_profile(profile)},
                                                    {"history", render_history(summary)},
                                                    {"domains", names}});
    return b;
}

PromptBundle PromptForge::build_detail_prompt(ItemId item, const UserProfile& profile, const std::string& query,
                                              double temperature) const {
    const Item& it = catalog_->at(item);
    PromptBundle b = base("detail", temperature);
    b.expected_format = ExpectedFormat::free_text();
    b.user_text = templates_.render("detail", {{"profile", render_profile(profile)},
                                               {"item", it.title},
                                               {"genres", genre_list(it)},
                                               {"query", query}});
    return b;
}

PromptBundle PromptForge::build_chitchat_prompt(const UserProfile& profile, const std::string& query,
                                                double temperature) const {
    PromptBundle b = base("chitchat", temperature);
    b.expected_format = ExpectedFormat::free_text();
    b.user_text = templates_.render("chitchat", {{"profile", render_profile(profile)}, {"query", query}});
    return b;
}

PromptBundle PromptForge::build_task_prompt(const std::string& query,
                                            const std::vector<std::pair<std::string, std::string>>& recent) const {
    PromptBundle b = base("task_classifier", 0.0);
    b.expected_format = ExpectedFormat::label();
    std::string context;
    for (const auto& [q, a] : recent) context += "User: " + q + "\nAssistant: " + a + "\n";
    b.user_text = templates_.render("task_classifier", {{"query", query}, {"recent", context}});
    return b;
}

PromptBundle PromptForge::build_probe_prompt(ItemId item, double temperature) const {
    PromptBundle b = base("consistency_probe", temperature);
    b.expected_format = ExpectedFormat::free_text();
    b.user_text = templates_.render("consistency_probe", {{"item", catalog_->at(item).title}});
    return b;
}

}  // namespace chatrec
