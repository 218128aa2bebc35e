#pragma once

#include "chatrec/dataset.hpp"

#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <variant>
#include <vector>

namespace chatrec {

struct ParseError {
    enum class Kind { wrong_count, unknown_title, lost_id, no_anchor, non_numeric, unknown_label };
    Kind kind = Kind::no_anchor;
    std::string detail;
};

std::string to_string(ParseError::Kind kind);

/// Either a parsed payload or the reason the text did not conform.
template <class T>
class ParseOutcome {
public:
    ParseOutcome(T value) : v_(std::move(value)) {}
    ParseOutcome(ParseError error) : v_(std::move(error)) {}

    bool ok() const { return std::holds_alternative<T>(v_); }
    explicit operator bool() const { return ok(); }
    const T& value() const { return std::get<T>(v_); }
    T& value() { return std::get<T>(v_); }
    const ParseError& error() const { return std::get<ParseError>(v_); }

private:
    std::variant<T, ParseError> v_;
};

/// Moves a leading "A", "An" or "The" behind the title as ", The" just before
/// the trailing year group, collapses whitespace and puts one space before
/// the year. Idempotent.
///
///   "The Shawshank Redemption (1994)" -> "Shawshank Redemption, The (1994)"
std::string normalize_title(std::string_view raw);

/// Title without its trailing "(YYYY)" group, normalized.
std::string title_without_year(std::string_view raw);

/// Resolves free-form titles to ids: exact match after normalization first,
/// then a year-insensitive match that must be unambiguous.
class TitleIndex {
public:
    TitleIndex() = default;
    explicit TitleIndex(const std::vector<std::pair<int, std::string>>& entries);
    static TitleIndex from_catalog(const Catalog& catalog);
    static TitleIndex from_items(const Catalog& catalog, const std::vector<ItemId>& ids);

    std::optional<int> resolve(std::string_view title) const;
    bool contains_id(int id) const { return ids_.count(id) > 0; }
    std::size_t size() const { return ids_.size(); }

private:
    std::unordered_map<std::string, int> exact_;
    std::unordered_map<std::string, std::vector<std::pair<std::string, int>>> by_base_;
    std::unordered_map<int, std::string> ids_;
};

struct RankedList {
    std::vector<int> ids;
    std::vector<std::string> reasons;  // text after " - " on each line, may be empty
};

inline constexpr std::string_view kListAnchor = "The current list is:";

/// Strict reader for "The current list is:" answers followed by `N.Title` lines.
ParseOutcome<RankedList> parse_ranked_list(std::string_view text, std::size_t expected_n, const TitleIndex& index);

/// First number in [1, 5] after "rate"/"rating" when that word appears,
/// otherwise the first in-range number anywhere.
ParseOutcome<double> parse_rating(std::string_view text);

/// Any answer is acceptable free text.
ParseOutcome<std::string> parse_free_text(std::string_view text);

}  // namespace chatrec
