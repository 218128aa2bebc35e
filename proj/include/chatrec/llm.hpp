#pragma once

#include "chatrec/common.hpp"
#include "chatrec/parse.hpp"
#include "chatrec/prompt.hpp"

#include <nlohmann/json.hpp>

#include <chrono>
#include <condition_variable>
#include <deque>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

namespace chatrec {

enum class Role { system, user, assistant };

std::string to_string(Role role);
Role role_from_string(const std::string& s);

struct Message {
    Role role = Role::user;
    std::string content;

    friend bool operator==(const Message&, const Message&) = default;
};

struct CompletionRequest {
    std::string model_id;
    std::vector<Message> messages;
    double temperature = 0.9;
    int max_output_tokens = 512;
    /// Local metadata (task kind, recommender order). Never sent to a
    /// provider and not part of the request hash.
    nlohmann::json annotations = nlohmann::json::object();

    /// Throws unless messages are non-empty, end with a user turn and the
    /// temperature is within [0, 2].
    void validate() const;
    /// Hex FNV-1a over the canonical wire body; keys scripted responses.
    std::string hash() const;
    /// Chat-completion JSON body: model, messages, temperature, max_tokens.
    nlohmann::json wire_body() const;
};

/// Builds a request from a prompt: system text, any prior turns, then the prompt itself.
/// With a catalog, ranked-list prompts are annotated with the recommender's
/// own top titles ("recommender_top") for the echo provider.
CompletionRequest make_request(const PromptBundle& bundle, const std::string& model_id,
                               const std::vector<Message>& prior = {}, const Catalog* catalog = nullptr);

struct Completion {
    std::string text;
    double latency_ms = 0.0;
    int prompt_tokens = 0;
    int completion_tokens = 0;
};

struct EmbeddingVector {
    std::vector<double> values;
    std::uint64_t source_text_hash = 0;
};

class TransportError : public Error {
public:
    using Error::Error;
};
class RateLimitError : public Error {
public:
    using Error::Error;
};
class AuthError : public Error {
public:
    using Error::Error;
};
class ProviderError : public Error {
public:
    using Error::Error;
};
class ScriptExhaustedError : public Error {
public:
    explicit ScriptExhaustedError(std::size_t request_index)
        : Error("stub script exhausted at request #" + std::to_string(request_index)),
          index_(request_index) {}
    std::size_t request_index() const noexcept { return index_; }

private:
    std::size_t index_;
};

/// A chat-completion + embedding backend. Implementations must be safe to
/// call from several threads.
class Provider {
public:
    virtual ~Provider() = default;
    virtual std::string id() const = 0;
    virtual Completion complete(const CompletionRequest& request) = 0;
    virtual EmbeddingVector embed(const std::string& text) = 0;
};

/// Deterministic unit vector derived from a seeded hash of the text.
EmbeddingVector stub_embedding(const std::string& text, std::size_t dimension = 64);

/// Replays scripted responses.
///
/// Entries carrying a request_hash are served only to requests with that hash,
/// in script order; the rest form one queue served in call order. A run log is
/// a valid script.
class ScriptedProvider final : public Provider {
public:
    struct Entry {
        std::optional<std::string> request_hash;
        std::string response;
    };

    explicit ScriptedProvider(std::vector<Entry> entries = {}, std::size_t embed_dimension = 64);
    static ScriptedProvider sequence(const std::vector<std::string>& responses);
    /// JSON lines with "response" (or "raw_response") and optional "request_hash".
    static std::vector<Entry> read_script(const std::filesystem::path& path);
    static ScriptedProvider load(const std::filesystem::path& path) { return ScriptedProvider(read_script(path)); }

    std::string id() const override { return "stub"; }
    Completion complete(const CompletionRequest& request) override;
    EmbeddingVector embed(const std::string& text) override;

    void push(std::string response);
    void push_for(const std::string& request_hash, std::string response);
    std::size_t calls() const;
    std::size_t remaining() const;

private:
    mutable std::mutex mutex_;
    std::deque<std::string> queue_;
    std::map<std::string, std::deque<std::string>> keyed_;
    std::size_t calls_ = 0;
    std::size_t embed_dimension_;
};

/// Answers from request annotations: a ranked-list request gets the
/// recommender's own top titles back, so reranking is the identity. Other
/// requests get a fixed acknowledgement. Embeddings come from stub_embedding.
class EchoProvider final : public Provider {
public:
    explicit EchoProvider(std::size_t embed_dimension = 64) : embed_dimension_(embed_dimension) {}
    std::string id() const override { return "echo"; }
    Completion complete(const CompletionRequest& request) override;
    EmbeddingVector embed(const std::string& text) override { return stub_embedding(text, embed_dimension_); }

private:
    std::size_t embed_dimension_;
};

/// Provider backed by callables; handy for tests and custom adapters.
class FunctionProvider final : public Provider {
public:
    using CompleteFn = std::function<std::string(const CompletionRequest&)>;
    using EmbedFn = std::function<EmbeddingVector(const std::string&)>;

    explicit FunctionProvider(CompleteFn complete, EmbedFn embed = nullptr, std::string id = "function");
    std::string id() const override { return id_; }
    Completion complete(const CompletionRequest& request) override;
    EmbeddingVector embed(const std::string& text) override;

private:
    CompleteFn complete_;
    EmbedFn embed_;
    std::string id_;
    std::mutex mutex_;
};

/// Caps concurrent requests and spaces out request starts.
class RequestLimiter {
public:
    RequestLimiter(std::size_t max_in_flight, std::chrono::milliseconds min_interval);

    class Slot {
    public:
        explicit Slot(RequestLimiter& owner) : owner_(&owner) {}
        Slot(const Slot&) = delete;
        Slot& operator=(const Slot&) = delete;
        ~Slot() { owner_->release(); }

    private:
        RequestLimiter* owner_;
    };

    [[nodiscard]] Slot acquire();
    std::size_t max_in_flight() const { return max_in_flight_; }

private:
    void release();

    std::mutex mutex_;
    std::condition_variable cv_;
    std::size_t max_in_flight_;
    std::size_t in_flight_ = 0;
    std::chrono::milliseconds min_interval_;
    std::chrono::steady_clock::time_point last_start_{};
};

struct HttpProviderConfig {
    std::string base_url = "https://api.openai.com/v1";
    std::string api_key;
    std::string model_id = "gpt-3.5-turbo";
    std::string embedding_model = "text-embedding-ada-002";
    std::string chat_path = "/chat/completions";
    std::string embed_path = "/embeddings";
    std::string auth_header = "Authorization";
    std::string auth_prefix = "Bearer ";
    std::size_t max_in_flight = 4;
    std::chrono::milliseconds min_interval{200};
    int rate_limit_retries = 5;
    std::chrono::milliseconds initial_backoff{1000};
    double backoff_factor = 2.0;
    std::chrono::seconds timeout{120};

    /// Defaults overridden by CHATREC_API_KEY, CHATREC_API_BASE and CHATREC_MODEL.
    static HttpProviderConfig from_env();
};

/// JSON chat-completion client for any server following the common hosted-API
/// shape. Rate limits (HTTP 429) are retried with exponential backoff.
class HttpProvider final : public Provider {
public:
    explicit HttpProvider(HttpProviderConfig config);
    std::string id() const override { return "http:" + config_.model_id; }
    Completion complete(const CompletionRequest& request) override;
    EmbeddingVector embed(const std::string& text) override;
    const HttpProviderConfig& config() const { return config_; }

private:
    nlohmann::json post(const std::string& path, const nlohmann::json& body);

    HttpProviderConfig config_;
    RequestLimiter limiter_;
};

/// Append-only JSON-lines record of every provider call. Lines carry
/// request_hash and response, so a log can be replayed by ScriptedProvider.
class RunLog {
public:
    RunLog() = default;  // in-memory only
    explicit RunLog(const std::filesystem::path& path);

    struct Record {
        std::string request_hash;
        std::string model_id;
        double temperature = 0.0;
        nlohmann::json messages;
        std::string task;
        std::string response;
        std::string parse_outcome;  // "ok" or the ParseError kind
        std::string parse_detail;
        int attempt = 1;
        double latency_ms = 0.0;
        int prompt_tokens = 0;
        int completion_tokens = 0;
    };

    void append(const Record& record);
    void note(const nlohmann::json& event);
    std::vector<nlohmann::json> entries() const;

private:
    mutable std::mutex mutex_;
    std::vector<nlohmann::json> entries_;
    std::optional<std::ofstream> out_;
};

/// Sends a request once and logs it as free text.
Completion complete_logged(Provider& provider, const CompletionRequest& request, RunLog* log);

class RetryExhaustedError : public Error {
public:
    RetryExhaustedError(ParseError last, std::vector<std::string> raw)
        : Error("no well-formed answer after " + std::to_string(raw.size()) + " attempts (last: " +
                to_string(last.kind) + ": " + last.detail + ")"),
          last_(std::move(last)),
          raw_(std::move(raw)) {}
    const ParseError& last_error() const { return last_; }
    const std::vector<std::string>& raw_responses() const { return raw_; }
    std::size_t attempts() const { return raw_.size(); }

private:
    ParseError last_;
    std::vector<std::string> raw_;
};

template <class T>
struct Retried {
    T value;
    int attempts = 1;
    std::vector<std::string> raw_responses;
};

/// Re-sends the identical request until `parser` accepts the answer, making at
/// most max_retries + 1 calls. Throws RetryExhaustedError otherwise.
template <class T, class Parser>
Retried<T> complete_with_retry(Provider& provider, const CompletionRequest& request, Parser&& parser,
                               int max_retries, RunLog* log = nullptr) {
    if (max_retries < 0) throw std::invalid_argument("max_retries must be >= 0");
    request.validate();
    std::vector<std::string> raw;
    std::optional<ParseError> last;
    const std::string hash = request.hash();
    for (int attempt = 1; attempt <= max_retries + 1; ++attempt) {
        Completion c = provider.complete(request);
        raw.push_back(c.text);
        ParseOutcome<T> outcome = parser(std::string_view(c.text));
        if (log) {
            RunLog::Record rec;
            rec.request_hash = hash;
            rec.model_id = request.model_id;
            rec.temperature = request.temperature;
            rec.messages = request.wire_body().at("messages");
            rec.task = request.annotations.value("task", "");
            rec.response = c.text;
            rec.parse_outcome = outcome.ok() ? "ok" : to_string(outcome.error().kind);
            rec.parse_detail = outcome.ok() ? "" : outcome.error().detail;
            rec.attempt = attempt;
            rec.latency_ms = c.latency_ms;
            rec.prompt_tokens = c.prompt_tokens;
            rec.completion_tokens = c.completion_tokens;
            log->append(rec);
        }
        if (outcome.ok()) return Retried<T>{std::move(outcome.value()), attempt, std::move(raw)};
        last = outcome.error();
    }
    throw RetryExhaustedError(*last, std::move(raw));
}

/// "stub:<script>", "echo" (also plain "stub") or "http[:model]" configured from the environment.
std::unique_ptr<Provider> make_provider(const std::string& spec);

}  // namespace chatrec
