#pragma once

#include "chatrec/llm.hpp"
#include "chatrec/prompt.hpp"

#include <filesystem>
#include <map>
#include <shared_mutex>
#include <string>
#include <vector>

namespace chatrec {

/// Description of an item that has no interaction data.
struct ExternalItemDoc {
    std::string doc_id;
    std::string title;
    int release_year = 0;
    std::string description;
    std::string source_tag;

    /// "Title (Year)" as shown to the model and matched in its answer.
    std::string display_title() const;
    /// Text that gets embedded: title, year and description.
    std::string embed_text() const;
    std::uint64_t content_hash() const;

    nlohmann::json to_json() const;
    static ExternalItemDoc from_json(const nlohmann::json& j);
};

/// JSON lines, one document per line. Duplicate ids and empty descriptions are rejected.
std::vector<ExternalItemDoc> load_docs(const std::filesystem::path& path);
std::vector<ExternalItemDoc> parse_docs(std::istream& in, const std::string& source = "<docs>");

struct IngestReport {
    std::size_t added = 0;
    std::size_t updated = 0;
    std::size_t skipped = 0;  // unchanged content
    std::vector<std::pair<std::string, std::string>> failures;  // (doc_id, error)

    nlohmann::json to_json() const;
};

struct Retrieved {
    std::string doc_id;
    double similarity = 0.0;
};

/// Documents and their unit-length embeddings, keyed by doc_id.
///
/// Reads run concurrently; ingest holds the write lock only while inserting
/// already-computed vectors.
class EmbeddingCache {
public:
    EmbeddingCache() = default;
    explicit EmbeddingCache(std::string model_id) : model_id_(std::move(model_id)) {}
    EmbeddingCache(EmbeddingCache&& other) noexcept;
    EmbeddingCache& operator=(EmbeddingCache&& other) noexcept;

    IngestReport ingest(const std::vector<ExternalItemDoc>& docs, Provider& provider);
    /// Inserts a vector directly. Normalizes it; a zero vector is rejected.
    void put(const ExternalItemDoc& doc, std::vector<double> vector);

    /// Top min(k, size) by cosine similarity, ties broken by ascending doc_id.
    std::vector<Retrieved> retrieve_vector(const std::vector<double>& query, std::size_t k) const;
    std::vector<Retrieved> retrieve(const std::string& query_text, std::size_t k, Provider& provider) const;

    std::size_t size() const;
    bool empty() const { return size() == 0; }
    std::size_t dimension() const;
    const std::string& model_id() const { return model_id_; }
    bool contains(const std::string& doc_id) const;
    ExternalItemDoc doc(const std::string& doc_id) const;
    std::vector<double> vector(const std::string& doc_id) const;
    std::vector<std::string> doc_ids() const;
    /// Newest release year among cached docs, 0 when empty.
    int max_release_year() const;

    /// Writes manifest.json and vectors.bin (raw little-endian doubles) into dir.
    void save(const std::filesystem::path& dir) const;
    static EmbeddingCache load(const std::filesystem::path& dir);

private:
    struct Entry {
        ExternalItemDoc doc;
        std::uint64_t content_hash = 0;
        std::vector<double> vector;
    };

    void insert_locked(const ExternalItemDoc& doc, std::vector<double> v);

    mutable std::shared_mutex mutex_;
    std::string model_id_;
    std::size_t dimension_ = 0;
    std::map<std::string, Entry> entries_;
};

enum class ColdstartQueryMode { request_and_preferences, request_only };

std::string coldstart_query_text(const std::string& request, const std::string& preference_summary,
                                 ColdstartQueryMode mode = ColdstartQueryMode::request_and_preferences);

/// Cold-start prompt plus the mapping from list positions back to doc ids.
struct ColdstartPrompt {
    PromptBundle bundle;
    std::vector<std::string> doc_ids;  // bundle.candidate_order[i] == i indexes this
    TitleIndex index;                  // resolves retrieved titles to positions
};

/// Asks for min(5, |docs|) picks restricted to the retrieved documents.
ColdstartPrompt build_coldstart_prompt(const PromptForge& forge, const std::string& query,
                                       const std::vector<ExternalItemDoc>& retrieved, const UserProfile& profile,
                                       const InteractionSummary& summary, double temperature = 0.9);

}  // namespace chatrec
