#include "chatrec/llm.hpp"

#include <httplib.h>

#include <cmath>
#include <cstdlib>
#include <sstream>
#include <thread>

namespace chatrec {

using nlohmann::json;

std::string to_string(Role role) {
    switch (role) {
        case Role::system: return "system";
        case Role::user: return "user";
        case Role::assistant: return "assistant";
    }
    return "user";
}

Role role_from_string(const std::string& s) {
    if (s == "system") return Role::system;
    if (s == "user") return Role::user;
    if (s == "assistant") return Role::assistant;
    throw std::invalid_argument("unknown role '" + s + "'");
}

void CompletionRequest::validate() const {
    if (messages.empty()) throw std::invalid_argument("completion request has no messages");
    if (messages.back().role != Role::user) throw std::invalid_argument("completion request must end with a user message");
    if (!(temperature >= 0.0 && temperature <= 2.0)) throw std::invalid_argument("temperature must be in [0, 2]");
    if (max_output_tokens <= 0) throw std::invalid_argument("max_output_tokens must be positive");
}

json CompletionRequest::wire_body() const {
    json msgs = json::array();
    for (const auto& m : messages) msgs.push_back({{"role", to_string(m.role)}, {"content", m.content}});
    return {{"model", model_id}, {"messages", msgs}, {"temperature", temperature}, {"max_tokens", max_output_tokens}};
}

std::string CompletionRequest::hash() const { return to_hex(fnv1a64(wire_body().dump())); }

CompletionRequest make_request(const PromptBundle& bundle, const std::string& model_id,
                               const std::vector<Message>& prior, const Catalog* catalog) {
    CompletionRequest r;
    r.model_id = model_id;
    r.temperature = bundle.temperature;
    if (!bundle.system_text.empty()) r.messages.push_back({Role::system, bundle.system_text});
    r.messages.insert(r.messages.end(), prior.begin(), prior.end());
    r.messages.push_back({Role::user, bundle.user_text});
    r.annotations["task"] = bundle.template_name;
    r.annotations["expected"] = to_string(bundle.expected_format);
    if (catalog && bundle.expected_format.kind == ExpectedFormat::Kind::ranked_list) {
        json top = json::array();
        for (std::size_t i = 0; i < bundle.recommender_order.size() && i < bundle.expected_format.count; ++i) {
            top.push_back(catalog->at(bundle.recommender_order[i]).title);
        }
        r.annotations["recommender_top"] = top;
    }
    return r;
}

EmbeddingVector stub_embedding(const std::string& text, std::size_t dimension) {
    if (dimension == 0) throw std::invalid_argument("embedding dimension must be positive");
    EmbeddingVector v;
    v.source_text_hash = fnv1a64(text);
    Rng rng(mix_seed(v.source_text_hash, 0x5eed));
    v.values.resize(dimension);
    double norm = 0.0;
    for (auto& x : v.values) {
        x = rng.unit() * 2.0 - 1.0;
        norm += x * x;
    }
    norm = std::sqrt(norm);
    for (auto& x : v.values) x /= norm;
    return v;
}

// ---------------------------------------------------------------------------

ScriptedProvider::ScriptedProvider(std::vector<Entry> entries, std::size_t embed_dimension)
    : embed_dimension_(embed_dimension) {
    for (auto& e : entries) {
        if (e.request_hash) {
            keyed_[*e.request_hash].push_back(std::move(e.response));
        } else {
            queue_.push_back(std::move(e.response));
        }
    }
}

ScriptedProvider ScriptedProvider::sequence(const std::vector<std::string>& responses) {
    std::vector<Entry> entries;
    for (const auto& r : responses) entries.push_back({std::nullopt, r});
    return ScriptedProvider(std::move(entries));
}

std::vector<ScriptedProvider::Entry> ScriptedProvider::read_script(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open stub script " + path.string());
    std::vector<Entry> entries;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (trim(line).empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw ParseFileError(path.string(), lineno, e.what());
        }
        if (!j.is_object()) throw ParseFileError(path.string(), lineno, "expected a JSON object");
        if (j.contains("event")) continue;  // run-log annotations
        Entry e;
        if (j.contains("response")) {
            e.response = j.at("response").get<std::string>();
        } else if (j.contains("raw_response")) {
            e.response = j.at("raw_response").get<std::string>();
        } else {
            throw ParseFileError(path.string(), lineno, "missing \"response\"");
        }
        if (j.contains("request_hash") && j.at("request_hash").is_string()) {
            e.request_hash = j.at("request_hash").get<std::string>();
        }
        entries.push_back(std::move(e));
    }
    return entries;
}

Completion ScriptedProvider::complete(const CompletionRequest& request) {
    request.validate();
    const std::string h = request.hash();
    std::lock_guard lock(mutex_);
    const std::size_t index = calls_++;
    Completion c;
    auto it = keyed_.find(h);
    if (it != keyed_.end() && !it->second.empty()) {
        c.text = std::move(it->second.front());
        it->second.pop_front();
    } else if (!queue_.empty()) {
        c.text = std::move(queue_.front());
        queue_.pop_front();
    } else {
        throw ScriptExhaustedError(index);
    }
    c.completion_tokens = static_cast<int>(c.text.size() / 4);
    return c;
}

EmbeddingVector ScriptedProvider::embed(const std::string& text) { return stub_embedding(text, embed_dimension_); }

void ScriptedProvider::push(std::string response) {
    std::lock_guard lock(mutex_);
    queue_.push_back(std::move(response));
}

void ScriptedProvider::push_for(const std::string& request_hash, std::string response) {
    std::lock_guard lock(mutex_);
    keyed_[request_hash].push_back(std::move(response));
}

std::size_t ScriptedProvider::calls() const {
    std::lock_guard lock(mutex_);
    return calls_;
}

std::size_t ScriptedProvider::remaining() const {
    std::lock_guard lock(mutex_);
    std::size_t n = queue_.size();
    for (const auto& [_, q] : keyed_) n += q.size();
    return n;
}

Completion EchoProvider::complete(const CompletionRequest& request) {
    request.validate();
    Completion c;
    const auto& a = request.annotations;
    if (a.contains("recommender_top") && a.at("recommender_top").is_array()) {
        std::ostringstream out;
        out << kListAnchor << '\n';
        int n = 0;
        for (const auto& title : a.at("recommender_top")) out << ++n << '.' << title.get<std::string>() << '\n';
        c.text = out.str();
    } else if (a.value("task", "") == "task_classifier") {
        c.text = "CHITCHAT";
    } else if (a.value("task", "") == "rating") {
        c.text = "3";
    } else {
        c.text = "Happy to help with movies. Tell me what you are in the mood for.";
    }
    return c;
}

FunctionProvider::FunctionProvider(CompleteFn complete, EmbedFn embed, std::string id)
    : complete_(std::move(complete)), embed_(std::move(embed)), id_(std::move(id)) {
    if (!complete_) throw std::invalid_argument("FunctionProvider needs a completion function");
}

Completion FunctionProvider::complete(const CompletionRequest& request) {
    request.validate();
    std::lock_guard lock(mutex_);
    return Completion{complete_(request)};
}

EmbeddingVector FunctionProvider::embed(const std::string& text) {
    std::lock_guard lock(mutex_);
    return embed_ ? embed_(text) : stub_embedding(text);
}

// ---------------------------------------------------------------------------

RequestLimiter::RequestLimiter(std::size_t max_in_flight, std::chrono::milliseconds min_interval)
    : max_in_flight_(max_in_flight), min_interval_(min_interval) {
    if (max_in_flight_ == 0) throw std::invalid_argument("max_in_flight must be positive");
}

RequestLimiter::Slot RequestLimiter::acquire() {
    std::unique_lock lock(mutex_);
    cv_.wait(lock, [&] { return in_flight_ < max_in_flight_; });
    ++in_flight_;
    auto now = std::chrono::steady_clock::now();
    auto earliest = last_start_ + min_interval_;
    if (last_start_.time_since_epoch().count() != 0 && now < earliest) {
        last_start_ = earliest;
        lock.unlock();
        std::this_thread::sleep_until(earliest);
    } else {
        last_start_ = now;
    }
    return Slot(*this);
}

void RequestLimiter::release() {
    {
        std::lock_guard lock(mutex_);
        --in_flight_;
    }
    cv_.notify_one();
}

HttpProviderConfig HttpProviderConfig::from_env() {
    HttpProviderConfig c;
    if (const char* v = std::getenv("CHATREC_API_KEY")) c.api_key = v;
    if (const char* v = std::getenv("CHATREC_API_BASE")) c.base_url = v;
    if (const char* v = std::getenv("CHATREC_MODEL")) c.model_id = v;
    return c;
}

HttpProvider::HttpProvider(HttpProviderConfig config)
    : config_(std::move(config)), limiter_(config_.max_in_flight, config_.min_interval) {
    if (config_.base_url.empty()) throw std::invalid_argument("HttpProvider needs a base URL");
}

namespace {

// "https://host:port/prefix" -> ("https://host:port", "/prefix")
std::pair<std::string, std::string> split_base(const std::string& url) {
    auto scheme = url.find("://");
    auto start = scheme == std::string::npos ? 0 : scheme + 3;
    auto slash = url.find('/', start);
    if (slash == std::string::npos) return {url, ""};
    std::string prefix = url.substr(slash);
    while (!prefix.empty() && prefix.back() == '/') prefix.pop_back();
    return {url.substr(0, slash), prefix};
}

}  // namespace

json HttpProvider::post(const std::string& path, const json& body) {
    auto [origin, prefix] = split_base(config_.base_url);
    httplib::Client client(origin);
    client.set_connection_timeout(config_.timeout);
    client.set_read_timeout(config_.timeout);
    client.set_write_timeout(config_.timeout);
    httplib::Headers headers;
    if (!config_.api_key.empty()) headers.emplace(config_.auth_header, config_.auth_prefix + config_.api_key);

    auto backoff = config_.initial_backoff;
    const std::string payload = body.dump();
    for (int attempt = 0;; ++attempt) {
        httplib::Result res;
        {
            auto slot = limiter_.acquire();
            res = client.Post(prefix + path, headers, payload, "application/json");
        }
        if (!res) throw TransportError("request to " + origin + prefix + path + " failed: " + httplib::to_string(res.error()));
        const int status = res->status;
        if (status == 429) {
            if (attempt >= config_.rate_limit_retries) {
                throw RateLimitError("rate limited after " + std::to_string(attempt + 1) + " attempts");
            }
            std::this_thread::sleep_for(backoff);
            backoff = std::chrono::milliseconds(static_cast<long long>(backoff.count() * config_.backoff_factor));
            continue;
        }
        if (status == 401 || status == 403) throw AuthError("provider rejected credentials (HTTP " + std::to_string(status) + ")");
        if (status < 200 || status >= 300) {
            throw ProviderError("provider returned HTTP " + std::to_string(status) + ": " + res->body.substr(0, 500));
        }
        try {
            return json::parse(res->body);
        } catch (const json::exception& e) {
            throw ProviderError(std::string("provider sent malformed JSON: ") + e.what());
        }
    }
}

Completion HttpProvider::complete(const CompletionRequest& request) {
    request.validate();
    json body = request.wire_body();
    if (body.at("model").get<std::string>().empty()) body["model"] = config_.model_id;
    const auto t0 = std::chrono::steady_clock::now();
    json res = post(config_.chat_path, body);
    Completion c;
    c.latency_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    try {
        c.text = res.at("choices").at(0).at("message").at("content").get<std::string>();
    } catch (const json::exception&) {
        throw ProviderError("completion response has no choices[0].message.content");
    }
    if (res.contains("usage")) {
        c.prompt_tokens = res["usage"].value("prompt_tokens", 0);
        c.completion_tokens = res["usage"].value("completion_tokens", 0);
    }
    return c;
}

EmbeddingVector HttpProvider::embed(const std::string& text) {
    json res = post(config_.embed_path, {{"model", config_.embedding_model}, {"input", text}});
    EmbeddingVector v;
    v.source_text_hash = fnv1a64(text);
    try {
        v.values = res.at("data").at(0).at("embedding").get<std::vector<double>>();
    } catch (const json::exception&) {
        throw ProviderError("embedding response has no data[0].embedding");
    }
    if (v.values.empty()) throw ProviderError("provider returned an empty embedding");
    return v;
}

// ---------------------------------------------------------------------------

RunLog::RunLog(const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    out_.emplace(path, std::ios::app);
    if (!*out_) throw Error("cannot open run log " + path.string());
}

void RunLog::append(const Record& r) {
    json j = {{"request_hash", r.request_hash},
              {"model_id", r.model_id},
              {"temperature", r.temperature},
              {"messages", r.messages},
              {"task", r.task},
              {"response", r.response},
              {"parse_outcome", r.parse_outcome},
              {"attempt", r.attempt},
              {"latency_ms", r.latency_ms},
              {"prompt_tokens", r.prompt_tokens},
              {"completion_tokens", r.completion_tokens}};
    if (!r.parse_detail.empty()) j["parse_detail"] = r.parse_detail;
    std::lock_guard lock(mutex_);
    if (out_) *out_ << j.dump() << '\n' << std::flush;
    entries_.push_back(std::move(j));
}

void RunLog::note(const json& event) {
    json j = event;
    if (!j.contains("event")) j["event"] = "note";
    std::lock_guard lock(mutex_);
    if (out_) *out_ << j.dump() << '\n' << std::flush;
    entries_.push_back(std::move(j));
}

std::vector<json> RunLog::entries() const {
    std::lock_guard lock(mutex_);
    return entries_;
}

Completion complete_logged(Provider& provider, const CompletionRequest& request, RunLog* log) {
    request.validate();
    Completion c = provider.complete(request);
    if (log) {
        RunLog::Record rec;
        rec.request_hash = request.hash();
        rec.model_id = request.model_id;
        rec.temperature = request.temperature;
        rec.messages = request.wire_body().at("messages");
        rec.task = request.annotations.value("task", "");
        rec.response = c.text;
        rec.parse_outcome = "ok";
        rec.latency_ms = c.latency_ms;
        rec.prompt_tokens = c.prompt_tokens;
        rec.completion_tokens = c.completion_tokens;
        log->append(rec);
    }
    return c;
}

std::unique_ptr<Provider> make_provider(const std::string& spec) {
    if (spec == "echo" || spec == "stub") return std::make_unique<EchoProvider>();
    if (spec.rfind("stub:", 0) == 0) return std::make_unique<ScriptedProvider>(ScriptedProvider::read_script(spec.substr(5)));
    if (spec == "http" || spec.rfind("http:", 0) == 0) {
        auto cfg = HttpProviderConfig::from_env();
        if (spec.size() > 5) cfg.model_id = spec.substr(5);
        return std::make_unique<HttpProvider>(cfg);
    }
    throw std::invalid_argument("unknown provider '" + spec + "' (expected echo, stub:<file> or http[:model])");
}

}  // namespace chatrec
