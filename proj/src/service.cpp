#include "chatrec/service.hpp"

#include <httplib.h>

#include <cstdlib>
#include <ctime>
#include <fstream>
#include <random>

namespace chatrec {

using nlohmann::json;

namespace {

ApiResponse error(int status, const std::string& message) { return {status, {{"error", message}}}; }

std::string utc_now() {
    std::time_t t = std::time(nullptr);
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

}  // namespace

std::string new_session_token() {
    static std::mutex mutex;
    static std::random_device device;
    std::lock_guard lock(mutex);
    std::uint64_t hi = (static_cast<std::uint64_t>(device()) << 32) | device();
    std::uint64_t lo = (static_cast<std::uint64_t>(device()) << 32) | device();
    return to_hex(hi) + to_hex(lo);
}

ChatService::ChatService(const Catalog& catalog, const UserTable& users, const std::vector<RatingEvent>& history,
                         const CandidateSource& recommender, std::map<std::string, Provider*> providers,
                         std::string default_provider, DialogueConfig dialogue, ServiceOptions options,
                         EmbeddingCache* coldstart, RunLog* log)
    : catalog_(&catalog),
      users_(&users),
      default_provider_(std::move(default_provider)),
      options_(std::move(options)),
      coldstart_(coldstart) {
    if (providers.empty()) throw std::invalid_argument("service needs at least one provider");
    if (!providers.count(default_provider_)) throw std::invalid_argument("default provider '" + default_provider_ + "' not registered");
    for (const auto& [name, provider] : providers) {
        auto engine = std::make_unique<DialogueEngine>(catalog, users, history, recommender, *provider, dialogue);
        engine->set_coldstart_cache(coldstart_);
        engine->set_run_log(log);
        engines_.emplace(name, std::move(engine));
    }
}

std::shared_ptr<ChatService::Session> ChatService::find(const std::string& id) const {
    std::shared_lock lock(sessions_mutex_);
    auto it = sessions_.find(id);
    return it == sessions_.end() ? nullptr : it->second;
}

std::size_t ChatService::session_count() const {
    std::shared_lock lock(sessions_mutex_);
    return sessions_.size();
}

ApiResponse ChatService::create_session(const json& body) {
    if (!body.is_object() || !body.contains("user_id") || !body.at("user_id").is_number_integer()) {
        return error(400, "body must be an object with an integer user_id");
    }
    const auto user = body.at("user_id").get<long long>();
    if (user < std::numeric_limits<UserId>::min() || user > std::numeric_limits<UserId>::max() ||
        !users_->count(static_cast<UserId>(user))) {
        return error(404, "unknown user " + std::to_string(user));
    }
    std::string provider = body.value("provider", default_provider_);
    auto engine = engines_.find(provider);
    if (engine == engines_.end()) return error(400, "unknown provider '" + provider + "'");

    auto session = std::make_shared<Session>();
    session->provider = provider;
    session->created_at = utc_now();
    std::string id;
    {
        std::unique_lock lock(sessions_mutex_);
        do {
            id = new_session_token();
        } while (sessions_.count(id));
        session->state = engine->second->start_session(static_cast<UserId>(user), id);
        sessions_.emplace(id, session);
    }
    return {201, {{"session_id", id}, {"user_id", user}, {"provider", provider}, {"created_at", session->created_at}}};
}

json ChatService::reply_json(const Reply& reply) const {
    json j = {{"kind", to_string(reply.kind.type)}, {"text", reply.text}, {"degraded", reply.degraded}};
    if (reply.kind.item) j["item_id"] = *reply.kind.item;
    if (!reply.kind.domains.empty()) {
        j["domains"] = json::array();
        for (Domain d : reply.kind.domains) j["domains"].push_back(to_string(d));
    }
    if (reply.coldstart) j["coldstart"] = true;
    if (!reply.note.empty()) j["note"] = reply.note;
    json cards = json::array();
    if (reply.recommendations) {
        for (const auto& r : *reply.recommendations) {
            json c = {{"title", r.title}, {"reason", r.reason}};
            if (r.doc_id.empty()) {
                const Item& item = catalog_->at(r.item);
                c["item_id"] = r.item;
                c["year"] = item.release_year ? json(*item.release_year) : json(nullptr);
                c["genres"] = item.genres;
            } else {
                c["doc_id"] = r.doc_id;
                int year = 0;
                if (coldstart_ && coldstart_->contains(r.doc_id)) year = coldstart_->doc(r.doc_id).release_year;
                c["year"] = year > 0 ? json(year) : json(nullptr);
                c["genres"] = json::array();
            }
            cards.push_back(c);
        }
    }
    j["recommendations"] = cards;
    return j;
}

json ChatService::transcript_json(const Session& s) const {
    json turns = json::array();
    for (const auto& t : s.state.history) turns.push_back({{"query", t.query}, {"reply", reply_json(t.reply)}});
    return {{"session_id", s.state.session_id},
            {"user_id", s.state.user_id},
            {"provider", s.provider},
            {"created_at", s.created_at},
            {"turns", turns}};
}

ApiResponse ChatService::post_message(const std::string& session_id, const json& body) {
    auto session = find(session_id);
    if (!session) return error(404, "unknown session " + session_id);
    if (!body.is_object() || !body.contains("text") || !body.at("text").is_string()) {
        return error(400, "body must be an object with a string text");
    }
    const std::string text = body.at("text").get<std::string>();
    if (trim(text).empty()) return error(400, "text must not be empty");
    const DialogueEngine& engine = *engines_.at(session->provider);
    std::lock_guard lock(session->mutex);
    try {
        Reply reply = engine.handle_turn(session->state, text);
        json j = reply_json(reply);
        j["turn"] = session->state.history.size();
        return {200, j};
    } catch (const std::exception& e) {
        ApiResponse r = error(502, std::string("turn failed: ") + e.what());
        if (session->state.last_top5) {
            json fallback = json::array();
            for (ItemId id : *session->state.last_top5) fallback.push_back({{"item_id", id}, {"title", catalog_->at(id).title}});
            r.body["fallback"] = fallback;
        }
        return r;
    }
}

ApiResponse ChatService::transcript(const std::string& session_id) const {
    auto session = find(session_id);
    if (!session) return error(404, "unknown session " + session_id);
    std::lock_guard lock(session->mutex);
    return {200, transcript_json(*session)};
}

ApiResponse ChatService::reports() const {
    json list = json::array();
    for (const auto& [path, r] : list_reports(options_.reports_dir)) {
        list.push_back({{"file", path.filename().string()},
                        {"experiment", r.experiment},
                        {"model_id", r.model_id},
                        {"provider_id", r.provider_id},
                        {"candidate_source", r.candidate_source},
                        {"variant", to_string(r.variant)},
                        {"temperature", r.temperature},
                        {"repeats", r.repeats},
                        {"means", r.means},
                        {"valid", r.valid},
                        {"timestamp", r.timestamp}});
    }
    return {200, {{"reports", list}}};
}

ApiResponse ChatService::ingest_docs(const json& body) {
    if (!coldstart_) return error(503, "cold-start cache is not configured");
    const json* docs = &body;
    if (body.is_object() && body.contains("docs")) docs = &body.at("docs");
    if (!docs->is_array()) return error(400, "expected an array of documents or {\"docs\": [...]}");
    std::vector<ExternalItemDoc> parsed;
    std::set<std::string> ids;
    for (std::size_t i = 0; i < docs->size(); ++i) {
        try {
            parsed.push_back(ExternalItemDoc::from_json((*docs)[i]));
        } catch (const std::exception& e) {
            return error(400, "document " + std::to_string(i) + ": " + e.what());
        }
        if (!ids.insert(parsed.back().doc_id).second) return error(400, "duplicate doc_id " + parsed.back().doc_id);
    }
    std::lock_guard lock(ingest_mutex_);
    // the default provider embeds; every engine reads the same cache
    IngestReport report = coldstart_->ingest(parsed, engines_.at(default_provider_)->provider());
    if (!options_.coldstart_dir.empty()) coldstart_->save(options_.coldstart_dir);
    json j = report.to_json();
    j["cache_size"] = coldstart_->size();
    return {200, j};
}

ApiResponse ChatService::health() const { return {200, {{"status", "ok"}}}; }

json ChatService::snapshot() const {
    json out = json::array();
    std::shared_lock lock(sessions_mutex_);
    for (const auto& [_, s] : sessions_) {
        std::lock_guard session_lock(s->mutex);
        out.push_back(transcript_json(*s));
    }
    return out;
}

// ---------------------------------------------------------------------------

namespace {

void send(httplib::Response& res, const ApiResponse& r) {
    res.status = r.status;
    res.set_content(r.body.dump(), "application/json");
}

bool parse_body(const httplib::Request& req, httplib::Response& res, json& out) {
    try {
        out = req.body.empty() ? json::object() : json::parse(req.body);
        return true;
    } catch (const json::exception& e) {
        send(res, error(400, std::string("malformed JSON: ") + e.what()));
        return false;
    }
}

}  // namespace

void mount_routes(httplib::Server& server, ChatService& service) {
    const std::string origin = service.options().cors_origin;
    server.set_default_headers({{"Access-Control-Allow-Origin", origin},
                                {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"},
                                {"Access-Control-Allow-Headers", "Content-Type"}});
    server.Options(R"(.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });

    server.Get("/health", [&service](const httplib::Request&, httplib::Response& res) { send(res, service.health()); });
    server.Get("/reports", [&service](const httplib::Request&, httplib::Response& res) { send(res, service.reports()); });
    server.Post("/sessions", [&service](const httplib::Request& req, httplib::Response& res) {
        json body;
        if (parse_body(req, res, body)) send(res, service.create_session(body));
    });
    server.Post(R"(/sessions/([0-9A-Za-z]+)/messages)", [&service](const httplib::Request& req, httplib::Response& res) {
        json body;
        if (parse_body(req, res, body)) send(res, service.post_message(req.matches[1], body));
    });
    server.Get(R"(/sessions/([0-9A-Za-z]+))", [&service](const httplib::Request& req, httplib::Response& res) {
        send(res, service.transcript(req.matches[1]));
    });
    server.Post("/coldstart/docs", [&service](const httplib::Request& req, httplib::Response& res) {
        json body;
        if (parse_body(req, res, body)) send(res, service.ingest_docs(body));
    });
    server.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
        std::string what = "internal error";
        try {
            std::rethrow_exception(ep);
        } catch (const std::exception& e) {
            what = e.what();
        } catch (...) {
        }
        send(res, error(500, what));
    });
}

// ---------------------------------------------------------------------------

ServeConfig ServeConfig::from_json(const json& j) {
    ServeConfig c;
    if (!j.is_object()) throw ValidationError("serve config must be a JSON object");
    auto path = [&](const char* key, std::filesystem::path& out) {
        if (j.contains(key)) out = j.at(key).get<std::string>();
    };
    path("data_dir", c.data_dir);
    path("model", c.model);
    path("reports_dir", c.reports_dir);
    path("coldstart_dir", c.coldstart_dir);
    path("run_log", c.run_log);
    path("templates_dir", c.templates_dir);
    path("snapshot", c.snapshot);
    c.candidates = j.value("candidates", c.candidates);
    c.provider = j.value("provider", c.provider);
    c.host = j.value("host", c.host);
    c.port = j.value("port", c.port);
    c.cors_origin = j.value("cors_origin", c.cors_origin);
    c.dialogue = j.value("dialogue", json::object());
    DialogueConfig::from_json(c.dialogue);  // validate early
    return c;
}

ServeConfig ServeConfig::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open config " + path.string());
    try {
        return from_json(json::parse(in, nullptr, true, true));
    } catch (const json::exception& e) {
        throw Error("config " + path.string() + ": " + e.what());
    }
}

void ServeConfig::apply_env() {
    if (const char* v = std::getenv("CHATREC_DATA_DIR")) data_dir = v;
    if (const char* v = std::getenv("CHATREC_PORT")) port = std::stoi(v);
    if (const char* v = std::getenv("CHATREC_PROVIDER")) provider = v;
    if (const char* v = std::getenv("CHATREC_REPORTS_DIR")) reports_dir = v;
}

}  // namespace chatrec
