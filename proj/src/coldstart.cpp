#include "chatrec/coldstart.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <mutex>
#include <set>
#include <sstream>

namespace chatrec {

using nlohmann::json;

std::string ExternalItemDoc::display_title() const {
    return release_year > 0 ? title + " (" + std::to_string(release_year) + ")" : title;
}

std::string ExternalItemDoc::embed_text() const { return display_title() + "\n" + description; }

std::uint64_t ExternalItemDoc::content_hash() const { return fnv1a64(embed_text()); }

json ExternalItemDoc::to_json() const {
    return {{"doc_id", doc_id},
            {"title", title},
            {"release_year", release_year},
            {"description", description},
            {"source_tag", source_tag}};
}

ExternalItemDoc ExternalItemDoc::from_json(const json& j) {
    ExternalItemDoc d;
    d.doc_id = j.at("doc_id").is_string() ? j.at("doc_id").get<std::string>() : j.at("doc_id").dump();
    d.title = j.at("title").get<std::string>();
    d.release_year = j.value("release_year", 0);
    d.description = j.at("description").get<std::string>();
    d.source_tag = j.value("source_tag", "");
    if (d.doc_id.empty()) throw ValidationError("document has an empty doc_id");
    if (d.title.empty()) throw ValidationError("document " + d.doc_id + " has an empty title");
    if (trim(d.description).empty()) throw ValidationError("document " + d.doc_id + " has an empty description");
    return d;
}

std::vector<ExternalItemDoc> parse_docs(std::istream& in, const std::string& source) {
    std::vector<ExternalItemDoc> docs;
    std::set<std::string> seen;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (trim(line).empty()) continue;
        ExternalItemDoc d;
        try {
            d = ExternalItemDoc::from_json(json::parse(line));
        } catch (const json::exception& e) {
            throw ParseFileError(source, lineno, e.what());
        } catch (const ValidationError& e) {
            throw ParseFileError(source, lineno, e.what());
        }
        if (!seen.insert(d.doc_id).second) throw ParseFileError(source, lineno, "duplicate doc_id " + d.doc_id);
        docs.push_back(std::move(d));
    }
    return docs;
}

std::vector<ExternalItemDoc> load_docs(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open " + path.string());
    return parse_docs(in, path.string());
}

json IngestReport::to_json() const {
    json f = json::array();
    for (const auto& [id, err] : failures) f.push_back({{"doc_id", id}, {"error", err}});
    return {{"added", added}, {"updated", updated}, {"skipped", skipped}, {"failures", f}};
}

namespace {

std::vector<double> normalized(std::vector<double> v) {
    double norm = 0.0;
    for (double x : v) norm += x * x;
    norm = std::sqrt(norm);
    if (!(norm > 0.0) || !std::isfinite(norm)) throw std::invalid_argument("embedding has zero or non-finite norm");
    for (double& x : v) x /= norm;
    return v;
}

}  // namespace

EmbeddingCache::EmbeddingCache(EmbeddingCache&& other) noexcept {
    std::unique_lock lock(other.mutex_);
    model_id_ = std::move(other.model_id_);
    dimension_ = other.dimension_;
    entries_ = std::move(other.entries_);
}

EmbeddingCache& EmbeddingCache::operator=(EmbeddingCache&& other) noexcept {
    if (this != &other) {
        std::scoped_lock lock(mutex_, other.mutex_);
        model_id_ = std::move(other.model_id_);
        dimension_ = other.dimension_;
        entries_ = std::move(other.entries_);
    }
    return *this;
}

void EmbeddingCache::insert_locked(const ExternalItemDoc& doc, std::vector<double> v) {
    if (v.empty()) throw std::invalid_argument("empty embedding for " + doc.doc_id);
    if (dimension_ == 0) dimension_ = v.size();
    if (v.size() != dimension_) {
        throw std::invalid_argument("embedding for " + doc.doc_id + " has dimension " + std::to_string(v.size()) +
                                    ", cache holds " + std::to_string(dimension_));
    }
    entries_[doc.doc_id] = Entry{doc, doc.content_hash(), normalized(std::move(v))};
}

void EmbeddingCache::put(const ExternalItemDoc& doc, std::vector<double> vector) {
    std::unique_lock lock(mutex_);
    insert_locked(doc, std::move(vector));
}

IngestReport EmbeddingCache::ingest(const std::vector<ExternalItemDoc>& docs, Provider& provider) {
    IngestReport report;
    std::vector<std::pair<const ExternalItemDoc*, bool>> todo;  // (doc, replaces an existing entry)
    {
        std::shared_lock lock(mutex_);
        for (const auto& d : docs) {
            auto it = entries_.find(d.doc_id);
            if (it != entries_.end() && it->second.content_hash == d.content_hash()) {
                ++report.skipped;
            } else {
                todo.emplace_back(&d, it != entries_.end());
            }
        }
    }
    std::vector<std::pair<const ExternalItemDoc*, std::vector<double>>> embedded;
    std::vector<bool> replaced;
    for (const auto& [doc, existing] : todo) {
        try {
            embedded.emplace_back(doc, provider.embed(doc->embed_text()).values);
            replaced.push_back(existing);
        } catch (const std::exception& e) {
            report.failures.emplace_back(doc->doc_id, e.what());
        }
    }
    std::unique_lock lock(mutex_);
    for (std::size_t i = 0; i < embedded.size(); ++i) {
        try {
            insert_locked(*embedded[i].first, std::move(embedded[i].second));
            ++(replaced[i] ? report.updated : report.added);
        } catch (const std::exception& e) {
            report.failures.emplace_back(embedded[i].first->doc_id, e.what());
        }
    }
    return report;
}

std::vector<Retrieved> EmbeddingCache::retrieve_vector(const std::vector<double>& query, std::size_t k) const {
    if (k == 0) throw std::invalid_argument("k must be at least 1");
    std::shared_lock lock(mutex_);
    if (entries_.empty()) throw Error("embedding cache is empty");
    if (query.size() != dimension_) {
        throw std::invalid_argument("query has dimension " + std::to_string(query.size()) + ", cache holds " +
                                    std::to_string(dimension_));
    }
    const std::vector<double> q = normalized(query);
    std::vector<Retrieved> all;
    all.reserve(entries_.size());
    for (const auto& [id, e] : entries_) {
        double dot = 0.0;
        for (std::size_t i = 0; i < q.size(); ++i) dot += q[i] * e.vector[i];
        all.push_back({id, dot});
    }
    const std::size_t n = std::min(k, all.size());
    std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(n), all.end(),
                      [](const Retrieved& a, const Retrieved& b) {
                          if (a.similarity != b.similarity) return a.similarity > b.similarity;
                          return a.doc_id < b.doc_id;
                      });
    all.resize(n);
    return all;
}

std::vector<Retrieved> EmbeddingCache::retrieve(const std::string& query_text, std::size_t k,
                                                Provider& provider) const {
    if (empty()) throw Error("embedding cache is empty");
    return retrieve_vector(provider.embed(query_text).values, k);
}

std::size_t EmbeddingCache::size() const {
    std::shared_lock lock(mutex_);
    return entries_.size();
}

std::size_t EmbeddingCache::dimension() const {
    std::shared_lock lock(mutex_);
    return dimension_;
}

bool EmbeddingCache::contains(const std::string& doc_id) const {
    std::shared_lock lock(mutex_);
    return entries_.count(doc_id) > 0;
}

ExternalItemDoc EmbeddingCache::doc(const std::string& doc_id) const {
    std::shared_lock lock(mutex_);
    auto it = entries_.find(doc_id);
    if (it == entries_.end()) throw std::out_of_range("no cached document " + doc_id);
    return it->second.doc;
}

std::vector<double> EmbeddingCache::vector(const std::string& doc_id) const {
    std::shared_lock lock(mutex_);
    auto it = entries_.find(doc_id);
    if (it == entries_.end()) throw std::out_of_range("no cached document " + doc_id);
    return it->second.vector;
}

std::vector<std::string> EmbeddingCache::doc_ids() const {
    std::shared_lock lock(mutex_);
    std::vector<std::string> ids;
    for (const auto& [id, _] : entries_) ids.push_back(id);
    return ids;
}

int EmbeddingCache::max_release_year() const {
    std::shared_lock lock(mutex_);
    int y = 0;
    for (const auto& [_, e] : entries_) y = std::max(y, e.doc.release_year);
    return y;
}

void EmbeddingCache::save(const std::filesystem::path& dir) const {
    std::shared_lock lock(mutex_);
    std::filesystem::create_directories(dir);
    json manifest = {{"format", "chatrec-embedding-cache"},
                     {"version", 1},
                     {"dimension", dimension_},
                     {"model_id", model_id_},
                     {"entries", json::array()}};
    std::ofstream bin(dir / "vectors.bin", std::ios::binary | std::ios::trunc);
    if (!bin) throw Error("cannot write " + (dir / "vectors.bin").string());
    std::size_t row = 0;
    for (const auto& [id, e] : entries_) {
        json j = e.doc.to_json();
        j["content_hash"] = to_hex(e.content_hash);
        j["row"] = row++;
        manifest["entries"].push_back(j);
        bin.write(reinterpret_cast<const char*>(e.vector.data()),
                  static_cast<std::streamsize>(e.vector.size() * sizeof(double)));
    }
    if (!bin) throw Error("failed writing vectors.bin");
    std::ofstream(dir / "manifest.json") << manifest.dump(2) << '\n';
}

EmbeddingCache EmbeddingCache::load(const std::filesystem::path& dir) {
    std::ifstream mf(dir / "manifest.json");
    if (!mf) throw Error("no embedding cache manifest in " + dir.string());
    json manifest = json::parse(mf);
    if (manifest.value("format", "") != "chatrec-embedding-cache") throw Error("not an embedding cache manifest");
    EmbeddingCache cache(manifest.value("model_id", ""));
    const auto dim = manifest.at("dimension").get<std::size_t>();
    const auto& rows = manifest.at("entries");
    std::ifstream bin(dir / "vectors.bin", std::ios::binary);
    if (!bin) throw Error("missing vectors.bin in " + dir.string());
    std::vector<double> all(dim * rows.size());
    bin.read(reinterpret_cast<char*>(all.data()), static_cast<std::streamsize>(all.size() * sizeof(double)));
    if (static_cast<std::size_t>(bin.gcount()) != all.size() * sizeof(double)) {
        throw Error("vectors.bin is shorter than the manifest says");
    }
    cache.dimension_ = dim;
    for (const auto& j : rows) {
        Entry e;
        e.doc = ExternalItemDoc::from_json(j);
        e.content_hash = e.doc.content_hash();
        const auto row = j.at("row").get<std::size_t>();
        if (row >= rows.size()) throw Error("manifest row index out of range");
        // stored vectors are already unit length; copy the bits as they are
        e.vector.assign(all.begin() + static_cast<std::ptrdiff_t>(row * dim),
                        all.begin() + static_cast<std::ptrdiff_t>((row + 1) * dim));
        cache.entries_[e.doc.doc_id] = std::move(e);
    }
    return cache;
}

std::string coldstart_query_text(const std::string& request, const std::string& preference_summary,
                                 ColdstartQueryMode mode) {
    if (mode == ColdstartQueryMode::request_only || trim(preference_summary).empty()) return request;
    return request + "\n" + preference_summary;
}

ColdstartPrompt build_coldstart_prompt(const PromptForge& forge, const std::string& query,
                                       const std::vector<ExternalItemDoc>& retrieved, const UserProfile& profile,
                                       const InteractionSummary& summary, double temperature) {
    if (retrieved.empty()) throw std::invalid_argument("cold-start prompt needs at least one retrieved document");
    if (!(temperature >= 0.0 && temperature <= 2.0)) throw std::invalid_argument("temperature must be in [0, 2]");
    const TemplateSet& t = forge.templates();
    ColdstartPrompt out;
    PromptBundle& b = out.bundle;
    b.template_name = "coldstart";
    b.system_text = t.get("system");
    b.temperature = temperature;
    b.expected_format = ExpectedFormat::ranked_list(std::min<std::size_t>(5, retrieved.size()));
    b.profile_only = summary.empty();

    std::vector<std::pair<int, std::string>> titles;
    std::string docs;
    for (std::size_t i = 0; i < retrieved.size(); ++i) {
        const auto& d = retrieved[i];
        out.doc_ids.push_back(d.doc_id);
        b.candidate_order.push_back(static_cast<ItemId>(i));
        titles.emplace_back(static_cast<int>(i), d.display_title());
        if (i) docs += '\n';
        docs += "- " + d.display_title() + ": " + d.description;
    }
    b.recommender_order = b.candidate_order;
    out.index = TitleIndex(titles);
    std::string request;
    if (!query.empty()) request = t.render("request", {{"query", query}});
    b.user_text = t.render("coldstart", {{"profile", forge.render_profile(profile)},
                                         {"history", forge.render_history(summary)},
                                         {"request", request},
                                         {"doc_count", std::to_string(retrieved.size())},
                                         {"docs", docs},
                                         {"count", std::to_string(b.expected_format.count)}});
    return out;
}

}  // namespace chatrec
