#pragma once

#include "chatrec/coldstart.hpp"
#include "chatrec/dialogue.hpp"
#include "chatrec/eval.hpp"
#include "chatrec/llm.hpp"
#include "chatrec/recsys.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <shared_mutex>
#include <string>

namespace httplib {
class Server;
}

namespace chatrec {

/// Status code plus JSON body, independent of the transport.
struct ApiResponse {
    int status = 200;
    nlohmann::json body;
};

struct ServiceOptions {
    std::filesystem::path reports_dir = "reports";
    /// Where ingested cold-start documents are persisted; empty keeps them in memory.
    std::filesystem::path coldstart_dir;
    std::string cors_origin = "*";
};

/// Sessions and request handling behind the HTTP routes.
///
/// Turns in one session run one at a time; different sessions run in
/// parallel and share only read-only data.
class ChatService {
public:
    ChatService(const Catalog& catalog, const UserTable& users, const std::vector<RatingEvent>& history,
                const CandidateSource& recommender, std::map<std::string, Provider*> providers,
                std::string default_provider, DialogueConfig dialogue = {}, ServiceOptions options = {},
                EmbeddingCache* coldstart = nullptr, RunLog* log = nullptr);

    ApiResponse create_session(const nlohmann::json& body);
    ApiResponse post_message(const std::string& session_id, const nlohmann::json& body);
    ApiResponse transcript(const std::string& session_id) const;
    ApiResponse reports() const;
    ApiResponse ingest_docs(const nlohmann::json& body);
    ApiResponse health() const;

    std::size_t session_count() const;
    /// Every transcript as one JSON document.
    nlohmann::json snapshot() const;

    const ServiceOptions& options() const { return options_; }

private:
    struct Session {
        std::mutex mutex;
        DialogueState state;
        std::string provider;
        std::string created_at;
    };

    std::shared_ptr<Session> find(const std::string& id) const;
    nlohmann::json reply_json(const Reply& reply) const;
    nlohmann::json transcript_json(const Session& s) const;

    const Catalog* catalog_;
    const UserTable* users_;
    std::map<std::string, std::unique_ptr<DialogueEngine>> engines_;
    std::string default_provider_;
    ServiceOptions options_;
    EmbeddingCache* coldstart_;
    std::mutex ingest_mutex_;
    mutable std::shared_mutex sessions_mutex_;
    std::map<std::string, std::shared_ptr<Session>> sessions_;
};

/// 128 random bits as 32 hex characters.
std::string new_session_token();

/// Registers the routes on `server`:
///   POST /sessions, POST /sessions/{id}/messages, GET /sessions/{id},
///   GET /reports, POST /coldstart/docs, GET /health
void mount_routes(httplib::Server& server, ChatService& service);

/// Settings for `chatrec serve`, read from a JSON file.
struct ServeConfig {
    std::filesystem::path data_dir = "data/ml-100k";
    std::filesystem::path model;  // trained model file; empty trains MF on startup
    std::string candidates = "mf";  // mf | itemknn (used when no model file is given)
    std::string provider = "echo";  // echo | stub:<script> | http[:model]
    std::filesystem::path reports_dir = "reports";
    std::filesystem::path coldstart_dir;
    std::filesystem::path run_log;
    std::filesystem::path templates_dir;
    std::filesystem::path snapshot;  // transcripts written here on shutdown
    std::string host = "127.0.0.1";
    int port = 8080;
    std::string cors_origin = "*";
    nlohmann::json dialogue = nlohmann::json::object();

    /// Missing keys keep defaults; CHATREC_DATA_DIR, CHATREC_PORT, CHATREC_PROVIDER
    /// and CHATREC_REPORTS_DIR override the file.
    static ServeConfig from_json(const nlohmann::json& j);
    static ServeConfig load(const std::filesystem::path& path);
    void apply_env();
};

}  // namespace chatrec
