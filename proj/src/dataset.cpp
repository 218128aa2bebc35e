#include "chatrec/dataset.hpp"

#include <algorithm>
#include <charconv>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>

namespace chatrec {

namespace {

template <class T>
T parse_number(std::string_view field, const std::string& path, std::size_t line, const char* what) {
    std::string t = trim(field);
    T value{};
    auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), value);
    if (ec != std::errc{} || ptr != t.data() + t.size() || t.empty()) {
        throw ParseFileError(path, line, std::string("bad ") + what + " '" + t + "'");
    }
    return value;
}

std::ifstream open_or_throw(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open " + path.string());
    return in;
}

// strips a trailing CR so files with DOS line endings load too
void chomp(std::string& line) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
}

}  // namespace

const std::vector<std::string>& genre_names() {
    static const std::vector<std::string> names = {
        "unknown", "Action",    "Adventure", "Animation", "Children's", "Comedy", "Crime",
        "Documentary", "Drama", "Fantasy",   "Film-Noir", "Horror",     "Musical", "Mystery",
        "Romance", "Sci-Fi",    "Thriller",  "War",       "Western"};
    return names;
}

Catalog::Catalog(std::vector<Item> items) : items_(std::move(items)) {
    std::sort(items_.begin(), items_.end(), [](const Item& a, const Item& b) { return a.id < b.id; });
    for (std::size_t i = 0; i < items_.size(); ++i) {
        if (!index_.emplace(items_[i].id, i).second) {
            throw ValidationError("duplicate item id " + std::to_string(items_[i].id));
        }
    }
}

const Item* Catalog::find(ItemId id) const {
    auto it = index_.find(id);
    return it == index_.end() ? nullptr : &items_[it->second];
}

const Item& Catalog::at(ItemId id) const {
    const Item* item = find(id);
    if (!item) throw ValidationError("unknown item id " + std::to_string(id));
    return *item;
}

std::optional<int> Catalog::max_release_year() const {
    std::optional<int> best;
    for (const auto& item : items_) {
        if (item.release_year && (!best || *item.release_year > *best)) best = item.release_year;
    }
    return best;
}

std::string latin1_to_utf8(std::string_view bytes) {
    std::string out;
    out.reserve(bytes.size());
    for (std::size_t i = 0; i < bytes.size(); ++i) {
        auto c = static_cast<unsigned char>(bytes[i]);
        if (c == 0 || (c >= 0x80 && c <= 0x9f)) {
            throw EncodingError("undecodable byte 0x" + to_hex(c).substr(14) + " at offset " +
                                std::to_string(i));
        }
        if (c < 0x80) {
            out.push_back(static_cast<char>(c));
        } else {
            out.push_back(static_cast<char>(0xc0 | (c >> 6)));
            out.push_back(static_cast<char>(0x80 | (c & 0x3f)));
        }
    }
    return out;
}

std::optional<int> year_from_title(std::string_view title) {
    for (std::size_t pos = title.size(); pos-- > 0;) {
        if (title[pos] != '(' || pos + 5 >= title.size() || title[pos + 5] != ')') continue;
        auto digits = title.substr(pos + 1, 4);
        if (std::all_of(digits.begin(), digits.end(), [](char c) { return c >= '0' && c <= '9'; })) {
            return std::stoi(std::string(digits));
        }
    }
    return std::nullopt;
}

std::vector<RatingEvent> load_ratings(const std::filesystem::path& path) {
    auto in = open_or_throw(path);
    const std::string name = path.string();
    std::vector<RatingEvent> events;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        chomp(line);
        if (trim(line).empty()) continue;
        auto fields = split(line, '\t');
        if (fields.size() != 4) {
            throw ParseFileError(name, lineno,
                                 "expected 4 tab-separated fields, got " + std::to_string(fields.size()));
        }
        RatingEvent ev;
        ev.user = parse_number<UserId>(fields[0], name, lineno, "user id");
        ev.item = parse_number<ItemId>(fields[1], name, lineno, "item id");
        ev.rating = parse_number<int>(fields[2], name, lineno, "rating");
        ev.timestamp = parse_number<std::int64_t>(fields[3], name, lineno, "timestamp");
        if (ev.user <= 0 || ev.item <= 0) throw ParseFileError(name, lineno, "ids must be positive");
        if (ev.rating < 1 || ev.rating > 5) {
            throw ValidationError(name + ":" + std::to_string(lineno) + ": rating " +
                                  std::to_string(ev.rating) + " outside [1,5]");
        }
        events.push_back(ev);
    }
    return events;
}

Catalog load_items(const std::filesystem::path& path) {
    auto in = open_or_throw(path);
    const std::string name = path.string();
    const auto& genres = genre_names();
    std::vector<Item> items;
    std::string raw;
    std::size_t lineno = 0;
    while (std::getline(in, raw)) {
        ++lineno;
        chomp(raw);
        if (trim(raw).empty()) continue;
        std::string line;
        try {
            line = latin1_to_utf8(raw);
        } catch (const EncodingError& e) {
            throw EncodingError(name + ":" + std::to_string(lineno) + ": " + e.what());
        }
        auto fields = split(line, '|');
        if (fields.size() != 5 + genres.size()) {
            throw ParseFileError(name, lineno,
                                 "expected 24 pipe-separated fields, got " + std::to_string(fields.size()));
        }
        Item item;
        item.id = parse_number<ItemId>(fields[0], name, lineno, "item id");
        item.title = trim(fields[1]);
        if (item.title.empty()) throw ParseFileError(name, lineno, "empty title");
        const std::string date = trim(fields[2]);
        if (date.size() >= 4 && std::all_of(date.end() - 4, date.end(), [](char c) { return std::isdigit(static_cast<unsigned char>(c)); })) {
            item.release_year = std::stoi(date.substr(date.size() - 4));
        } else {
            item.release_year = year_from_title(item.title);
        }
        for (std::size_t g = 0; g < genres.size(); ++g) {
            const std::string flag = trim(fields[5 + g]);
            if (flag != "0" && flag != "1") throw ParseFileError(name, lineno, "genre flag must be 0 or 1");
            if (flag == "1" && g != 0) item.genres.push_back(genres[g]);
        }
        items.push_back(std::move(item));
    }
    return Catalog(std::move(items));
}

UserTable load_users(const std::filesystem::path& path) {
    auto in = open_or_throw(path);
    const std::string name = path.string();
    UserTable users;
    std::string raw;
    std::size_t lineno = 0;
    while (std::getline(in, raw)) {
        ++lineno;
        chomp(raw);
        if (trim(raw).empty()) continue;
        std::string line;
        try {
            line = latin1_to_utf8(raw);
        } catch (const EncodingError& e) {
            throw EncodingError(name + ":" + std::to_string(lineno) + ": " + e.what());
        }
        auto fields = split(line, '|');
        if (fields.size() != 5) {
            throw ParseFileError(name, lineno,
                                 "expected 5 pipe-separated fields, got " + std::to_string(fields.size()));
        }
        UserProfile u;
        u.id = parse_number<UserId>(fields[0], name, lineno, "user id");
        u.age = parse_number<int>(fields[1], name, lineno, "age");
        if (u.age <= 0) throw ValidationError(name + ":" + std::to_string(lineno) + ": age must be positive");
        const std::string gender = trim(fields[2]);
        if (gender != "M" && gender != "F") throw ParseFileError(name, lineno, "gender must be M or F");
        u.gender = gender[0];
        u.occupation = trim(fields[3]);
        u.zip_code = trim(fields[4]);
        if (!users.emplace(u.id, u).second) throw ParseFileError(name, lineno, "duplicate user id");
    }
    return users;
}

Dataset load_movielens(const std::filesystem::path& dir) {
    Dataset ds;
    ds.catalog = load_items(dir / "u.item");
    ds.users = load_users(dir / "u.user");
    ds.events = load_ratings(dir / "u.data");
    for (const auto& ev : ds.events) {
        if (!ds.users.count(ev.user)) {
            throw ValidationError("rating references unknown user " + std::to_string(ev.user));
        }
        if (!ds.catalog.contains(ev.item)) {
            throw ValidationError("rating references unknown item " + std::to_string(ev.item));
        }
    }
    return ds;
}

std::size_t distinct_users(const std::vector<RatingEvent>& events) {
    std::set<UserId> ids;
    for (const auto& ev : events) ids.insert(ev.user);
    return ids.size();
}

std::size_t distinct_items(const std::vector<RatingEvent>& events) {
    std::set<ItemId> ids;
    for (const auto& ev : events) ids.insert(ev.item);
    return ids.size();
}

double density(std::size_t n_events, std::size_t n_users, std::size_t n_items) {
    if (n_users == 0 || n_items == 0) throw std::invalid_argument("density: zero users or items");
    return static_cast<double>(n_events) /
           (static_cast<double>(n_users) * static_cast<double>(n_items));
}

std::vector<UserId> sample_users(const UserTable& users, std::size_t n, std::uint64_t seed) {
    if (n > users.size()) {
        throw std::invalid_argument("cannot sample " + std::to_string(n) + " users from " +
                                    std::to_string(users.size()));
    }
    std::vector<UserId> ids;
    ids.reserve(users.size());
    for (const auto& [id, _] : users) ids.push_back(id);
    Rng rng(seed);
    rng.shuffle(ids);
    ids.resize(n);
    std::sort(ids.begin(), ids.end());
    return ids;
}

std::size_t SplitPolicy::test_count(std::size_t n_events) const {
    if (kind == Kind::leave_n_out) return static_cast<std::size_t>(std::max(count, 0));
    // guard against 0.2 * 15 = 3.0000000000000004 rounding up to 4
    double want = fraction * static_cast<double>(n_events);
    return static_cast<std::size_t>(std::ceil(want - 1e-9));
}

std::string SplitPolicy::describe() const {
    if (kind == Kind::leave_n_out) return "leave-" + std::to_string(count) + "-out";
    char buf[64];
    std::snprintf(buf, sizeof buf, "%s(%g)",
                  kind == Kind::per_user_holdout ? "per-user-holdout" : "per-user-random-holdout", fraction);
    return buf;
}

SplitPolicy SplitPolicy::parse(const std::string& text) {
    auto colon = text.find(':');
    const std::string name = text.substr(0, colon);
    const std::string arg = colon == std::string::npos ? "" : text.substr(colon + 1);
    try {
        if (name == "holdout") return holdout(arg.empty() ? 0.2 : std::stod(arg));
        if (name == "random-holdout") return random_holdout(arg.empty() ? 0.2 : std::stod(arg));
        if (name == "leave-out") return leave_out(arg.empty() ? 1 : std::stoi(arg));
    } catch (const std::logic_error&) {
    }
    throw std::invalid_argument("bad split policy '" + text + "' (holdout:F, random-holdout:F, leave-out:N)");
}

DatasetSplit split_train_test(const std::vector<RatingEvent>& events, const SplitPolicy& policy,
                              std::uint64_t seed) {
    if (policy.kind != SplitPolicy::Kind::leave_n_out &&
        !(policy.fraction >= 0.0 && policy.fraction < 1.0)) {
        throw std::invalid_argument("holdout fraction must be in [0, 1)");
    }
    if (policy.kind == SplitPolicy::Kind::leave_n_out && policy.count < 0) {
        throw std::invalid_argument("leave-n-out count must be >= 0");
    }
    std::map<UserId, std::vector<RatingEvent>> by_user;
    for (const auto& ev : events) by_user[ev.user].push_back(ev);

    DatasetSplit split;
    split.policy = policy;
    split.seed = seed;
    for (auto& [user, evs] : by_user) {
        std::sort(evs.begin(), evs.end(), [seed](const RatingEvent& a, const RatingEvent& b) {
            if (a.timestamp != b.timestamp) return a.timestamp < b.timestamp;
            auto ha = mix_seed(seed, static_cast<std::uint64_t>(a.item));
            auto hb = mix_seed(seed, static_cast<std::uint64_t>(b.item));
            if (ha != hb) return ha < hb;
            return a.item < b.item;
        });
        if (policy.kind == SplitPolicy::Kind::per_user_random_holdout) {
            Rng rng(mix_seed(seed, static_cast<std::uint64_t>(user)));
            rng.shuffle(evs);
        }
        const std::size_t holdout = policy.test_count(evs.size());
        if (holdout == 0) {
            split.train.insert(split.train.end(), evs.begin(), evs.end());
            continue;
        }
        if (holdout >= evs.size()) {
            split.excluded_users.push_back(user);
            split.warnings.push_back("user " + std::to_string(user) + " has " +
                                     std::to_string(evs.size()) + " events, needs more than " +
                                     std::to_string(holdout) + "; kept in train only");
            split.train.insert(split.train.end(), evs.begin(), evs.end());
            continue;
        }
        auto cut = evs.end() - static_cast<std::ptrdiff_t>(holdout);
        split.train.insert(split.train.end(), evs.begin(), cut);
        split.test.insert(split.test.end(), cut, evs.end());
    }
    return split;
}

nlohmann::json split_manifest(const DatasetSplit& split, const std::vector<UserId>& sampled) {
    nlohmann::json test = nlohmann::json::array();
    for (const auto& ev : split.test) test.push_back({ev.user, ev.item, ev.rating, ev.timestamp});
    return {
        {"schema_version", 1},
        {"policy", split.policy.describe()},
        {"seed", split.seed},
        {"n_train", split.train.size()},
        {"n_test", split.test.size()},
        {"excluded_users", split.excluded_users},
        {"warnings", split.warnings},
        {"sampled_users", sampled},
        {"test_events", test},
    };
}

}  // namespace chatrec
