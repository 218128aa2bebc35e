#pragma once

#include "chatrec/common.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

namespace chatrec {

struct RatingEvent {
    UserId user = 0;
    ItemId item = 0;
    int rating = 0;  // 1..5 stars
    std::int64_t timestamp = 0;

    friend bool operator==(const RatingEvent&, const RatingEvent&) = default;
};

/// The 19 MovieLens genre flags, in file column order.
const std::vector<std::string>& genre_names();

struct Item {
    ItemId id = 0;
    std::string title;  // UTF-8, verbatim from the catalog, e.g. "Toy Story (1995)"
    std::optional<int> release_year;
    std::vector<std::string> genres;  // empty only for items flagged "unknown"
};

struct UserProfile {
    UserId id = 0;
    int age = 0;
    char gender = 'M';
    std::string occupation;
    std::string zip_code;
};

/// Immutable item catalog ordered by id.
class Catalog {
public:
    Catalog() = default;
    explicit Catalog(std::vector<Item> items);

    const Item* find(ItemId id) const;
    const Item& at(ItemId id) const;
    bool contains(ItemId id) const { return find(id) != nullptr; }
    const std::vector<Item>& items() const { return items_; }
    std::size_t size() const { return items_.size(); }
    std::optional<int> max_release_year() const;

private:
    std::vector<Item> items_;
    std::unordered_map<ItemId, std::size_t> index_;
};

using UserTable = std::map<UserId, UserProfile>;

struct Dataset {
    std::vector<RatingEvent> events;
    Catalog catalog;
    UserTable users;

    std::size_t n_users() const { return users.size(); }
    std::size_t n_items() const { return catalog.size(); }
};

/// Decodes single-byte Latin-1 text into UTF-8. C1 control bytes (0x80-0x9F)
/// and NUL have no printable mapping and raise EncodingError.
std::string latin1_to_utf8(std::string_view bytes);

/// Year in a trailing "(YYYY)" group of a title, ignoring suffixes like " (V)".
std::optional<int> year_from_title(std::string_view title);

std::vector<RatingEvent> load_ratings(const std::filesystem::path& path);
Catalog load_items(const std::filesystem::path& path);
UserTable load_users(const std::filesystem::path& path);

/// Loads u.data, u.item and u.user from a directory and checks that every
/// event references a loaded user and item.
Dataset load_movielens(const std::filesystem::path& dir);

std::size_t distinct_users(const std::vector<RatingEvent>& events);
std::size_t distinct_items(const std::vector<RatingEvent>& events);

double density(std::size_t n_events, std::size_t n_users, std::size_t n_items);

/// n distinct user ids drawn without replacement, returned in ascending order.
std::vector<UserId> sample_users(const UserTable& users, std::size_t n, std::uint64_t seed);

struct SplitPolicy {
    /// per_user_holdout and leave_n_out hold out each user's most recent
    /// events; per_user_random_holdout holds out a seeded random subset.
    enum class Kind { per_user_holdout, leave_n_out, per_user_random_holdout };
    Kind kind = Kind::per_user_holdout;
    double fraction = 0.2;  // per_user_holdout
    int count = 1;          // leave_n_out

    static SplitPolicy holdout(double fraction) { return {Kind::per_user_holdout, fraction, 0}; }
    static SplitPolicy leave_out(int n) { return {Kind::leave_n_out, 0.0, n}; }
    static SplitPolicy random_holdout(double fraction) { return {Kind::per_user_random_holdout, fraction, 0}; }
    /// "holdout:0.2", "leave-out:1" or "random-holdout:0.2"
    static SplitPolicy parse(const std::string& text);

    /// Number of events a user with `n_events` must give to the test side.
    std::size_t test_count(std::size_t n_events) const;
    std::string describe() const;
};

struct DatasetSplit {
    std::vector<RatingEvent> train;
    std::vector<RatingEvent> test;
    SplitPolicy policy;
    std::uint64_t seed = 0;
    std::vector<UserId> excluded_users;  // not enough events to hold any out
    std::vector<std::string> warnings;
};

/// Splits each user's events according to the policy. Timestamp ties are
/// ordered by a seeded hash of the item id, so the result is a pure function
/// of (events, policy, seed). Users who cannot keep at least one training
/// event stay entirely in train and are listed in excluded_users.
DatasetSplit split_train_test(const std::vector<RatingEvent>& events, const SplitPolicy& policy,
                              std::uint64_t seed);

nlohmann::json split_manifest(const DatasetSplit& split, const std::vector<UserId>& sampled);

}  // namespace chatrec
