#include "chatrec/parse.hpp"

#include <algorithm>
#include <cctype>
#include <set>

namespace chatrec {

std::string to_string(ParseError::Kind kind) {
    switch (kind) {
        case ParseError::Kind::wrong_count: return "wrong_count";
        case ParseError::Kind::unknown_title: return "unknown_title";
        case ParseError::Kind::lost_id: return "lost_id";
        case ParseError::Kind::no_anchor: return "no_anchor";
        case ParseError::Kind::non_numeric: return "non_numeric";
        case ParseError::Kind::unknown_label: return "unknown_label";
    }
    return "no_anchor";
}

namespace {

bool is_digit(char c) { return c >= '0' && c <= '9'; }

std::string collapse_whitespace(std::string_view s) {
    std::string out;
    bool space = false;
    for (char c : s) {
        if (std::isspace(static_cast<unsigned char>(c))) {
            space = true;
            continue;
        }
        if (space && !out.empty()) out.push_back(' ');
        space = false;
        out.push_back(c);
    }
    return out;
}

// Position of a trailing "(YYYY)" group, allowing later groups such as " (V)".
std::size_t year_group(const std::string& s) {
    for (std::size_t pos = s.size(); pos-- > 0;) {
        if (s[pos] != '(' || pos + 5 >= s.size() || s[pos + 5] != ')') continue;
        if (is_digit(s[pos + 1]) && is_digit(s[pos + 2]) && is_digit(s[pos + 3]) && is_digit(s[pos + 4])) {
            return pos;
        }
    }
    return std::string::npos;
}

bool ends_with_article(const std::string& body) {
    for (const char* art : {", The", ", A", ", An"}) {
        std::string_view a(art);
        if (body.size() > a.size() && body.compare(body.size() - a.size(), a.size(), a) == 0) return true;
    }
    return false;
}

}  // namespace

std::string normalize_title(std::string_view raw) {
    std::string s = collapse_whitespace(raw);
    std::string body = s, tail;
    if (std::size_t y = year_group(s); y != std::string::npos) {
        body = trim(std::string_view(s).substr(0, y));
        tail = s.substr(y);
    }
    if (!ends_with_article(body)) {
        for (const char* art : {"The ", "An ", "A "}) {
            std::string_view a(art);
            if (body.size() > a.size() && body.compare(0, a.size(), a) == 0) {
                body = body.substr(a.size()) + ", " + std::string(a.substr(0, a.size() - 1));
                break;
            }
        }
    }
    if (tail.empty()) return body;
    if (body.empty()) return tail;
    return body + " " + tail;
}

std::string title_without_year(std::string_view raw) {
    std::string s = normalize_title(raw);
    std::size_t y = year_group(s);
    if (y == std::string::npos) return s;
    return trim(std::string_view(s).substr(0, y)) + s.substr(y + 6);
}

// ---------------------------------------------------------------------------

TitleIndex::TitleIndex(const std::vector<std::pair<int, std::string>>& entries) {
    for (const auto& [id, title] : entries) {
        ids_.emplace(id, title);
        const std::string norm = normalize_title(title);
        auto [it, inserted] = exact_.emplace(norm, id);
        if (!inserted && id < it->second) it->second = id;
        by_base_[to_lower(title_without_year(title))].emplace_back(norm, id);
    }
}

TitleIndex TitleIndex::from_catalog(const Catalog& catalog) {
    std::vector<std::pair<int, std::string>> entries;
    for (const auto& item : catalog.items()) entries.emplace_back(item.id, item.title);
    return TitleIndex(entries);
}

TitleIndex TitleIndex::from_items(const Catalog& catalog, const std::vector<ItemId>& ids) {
    std::vector<std::pair<int, std::string>> entries;
    for (ItemId id : ids) entries.emplace_back(id, catalog.at(id).title);
    return TitleIndex(entries);
}

std::optional<int> TitleIndex::resolve(std::string_view title) const {
    const std::string norm = normalize_title(title);
    if (auto it = exact_.find(norm); it != exact_.end()) return it->second;
    auto it = by_base_.find(to_lower(title_without_year(title)));
    if (it == by_base_.end()) return std::nullopt;
    // unambiguous only if every match is the same title
    std::set<std::string> titles;
    int best = it->second.front().second;
    for (const auto& [t, id] : it->second) {
        titles.insert(t);
        best = std::min(best, id);
    }
    if (titles.size() != 1) return std::nullopt;
    return best;
}

// ---------------------------------------------------------------------------

namespace {

struct ListLine {
    std::string title;
    std::string reason;
};

// "3.Fargo (1996)", "3) Fargo", "3: Fargo"
std::optional<std::string> enumerated_body(std::string_view line) {
    std::string t = trim(line);
    std::size_t i = 0;
    while (i < t.size() && is_digit(t[i])) ++i;
    if (i == 0 || i >= t.size()) return std::nullopt;
    std::size_t j = i;
    while (j < t.size() && t[j] == ' ') ++j;
    if (j >= t.size() || (t[j] != '.' && t[j] != ')' && t[j] != ':')) return std::nullopt;
    std::string body = trim(std::string_view(t).substr(j + 1));
    if (body.empty()) return std::nullopt;
    return body;
}

// "a:Star Wars (1977)", "[m]: Fargo" -- an id slot that lost its number
bool lost_id_line(std::string_view line) {
    std::string t = trim(line);
    std::size_t colon = t.find(':');
    if (colon == std::string::npos || colon == 0 || colon > 5) return false;
    std::string prefix = trim(std::string_view(t).substr(0, colon));
    if (!prefix.empty() && prefix.front() == '[' && prefix.back() == ']') prefix = prefix.substr(1, prefix.size() - 2);
    if (prefix.empty() || prefix.size() > 3) return false;
    bool any_digit = std::any_of(prefix.begin(), prefix.end(), is_digit);
    bool all_alnum = std::all_of(prefix.begin(), prefix.end(),
                                 [](char c) { return std::isalnum(static_cast<unsigned char>(c)); });
    return all_alnum && !any_digit && trim(std::string_view(t).substr(colon + 1)).size() > 0;
}

ListLine split_reason(std::string body) {
    // strip markdown emphasis and wrapping quotes around the title
    auto strip = [](std::string s) {
        s = trim(s);
        while (s.size() >= 2 && ((s.front() == '*' && s.back() == '*') || (s.front() == '"' && s.back() == '"'))) {
            s = trim(std::string_view(s).substr(1, s.size() - 2));
        }
        return s;
    };
    ListLine out;
    std::size_t y = year_group(body);
    if (y != std::string::npos) {
        std::size_t after = y + 6;
        // keep trailing groups like " (V)" with the title
        while (after < body.size()) {
            std::size_t k = after;
            while (k < body.size() && body[k] == ' ') ++k;
            if (k < body.size() && body[k] == '(') {
                std::size_t close = body.find(')', k);
                if (close != std::string::npos && close - k <= 4) {
                    after = close + 1;
                    continue;
                }
            }
            break;
        }
        // closing emphasis or quote belongs to the title
        while (after < body.size() && (body[after] == '*' || body[after] == '"')) ++after;
        std::string rest = trim(std::string_view(body).substr(after));
        for (std::string_view sep : {"—", "–", "-", ":"}) {
            if (rest.compare(0, sep.size(), sep) == 0) {
                rest = trim(std::string_view(rest).substr(sep.size()));
                break;
            }
        }
        out.title = strip(body.substr(0, after));
        out.reason = rest;
        return out;
    }
    out.title = strip(body);
    return out;
}

std::size_t find_anchor(std::string_view text) {
    const std::string lower = to_lower(text);
    const std::string anchor = to_lower(kListAnchor);
    return lower.rfind(anchor);
}

}  // namespace

ParseOutcome<RankedList> parse_ranked_list(std::string_view text, std::size_t expected_n, const TitleIndex& index) {
    using K = ParseError::Kind;
    const std::size_t anchor = find_anchor(text);
    if (anchor == std::string_view::npos) {
        return ParseError{K::no_anchor, "missing \"" + std::string(kListAnchor) + "\""};
    }
    auto lines = split(text.substr(anchor + kListAnchor.size()), '\n');

    std::vector<ListLine> items;
    std::size_t lost = 0;
    for (const auto& raw : lines) {
        std::string line = trim(raw);
        if (line.empty()) continue;
        if (auto body = enumerated_body(line)) {
            items.push_back(split_reason(*body));
        } else if (lost_id_line(line)) {
            ++lost;
        } else {
            break;  // commentary ends the list
        }
    }
    if (lost > 0) {
        return ParseError{K::lost_id, std::to_string(lost) + " line(s) carry a letter instead of a list number"};
    }
    if (items.size() != expected_n) {
        return ParseError{K::wrong_count,
                          "expected " + std::to_string(expected_n) + " titles, got " + std::to_string(items.size())};
    }
    RankedList out;
    std::set<int> seen;
    for (const auto& item : items) {
        auto id = index.resolve(item.title);
        if (!id) return ParseError{K::unknown_title, item.title};
        if (!seen.insert(*id).second) return ParseError{K::wrong_count, "duplicate title " + item.title};
        out.ids.push_back(*id);
        out.reasons.push_back(item.reason);
    }
    return out;
}

ParseOutcome<double> parse_rating(std::string_view text) {
    auto first_in_range = [](std::string_view s) -> std::optional<double> {
        std::size_t i = 0;
        while (i < s.size()) {
            if (!is_digit(s[i]) || (i > 0 && (is_digit(s[i - 1]) || s[i - 1] == '.'))) {
                ++i;
                continue;
            }
            std::size_t j = i;
            while (j < s.size() && is_digit(s[j])) ++j;
            if (j + 1 < s.size() && s[j] == '.' && is_digit(s[j + 1])) {
                ++j;
                while (j < s.size() && is_digit(s[j])) ++j;
            }
            double v = std::stod(std::string(s.substr(i, j - i)));
            if (v >= 1.0 && v <= 5.0) return v;
            i = j;
        }
        return std::nullopt;
    };
    const std::string lower = to_lower(text);
    for (std::size_t pos = lower.find("rat"); pos != std::string::npos; pos = lower.find("rat", pos + 1)) {
        const bool word_start = pos == 0 || !std::isalpha(static_cast<unsigned char>(lower[pos - 1]));
        const bool rate = lower.compare(pos, 4, "rate") == 0;
        const bool rating = lower.compare(pos, 6, "rating") == 0;
        if (word_start && (rate || rating)) {
            if (auto v = first_in_range(text.substr(pos))) return *v;
            break;
        }
    }
    if (auto v = first_in_range(text)) return *v;
    return ParseError{ParseError::Kind::non_numeric, "no number between 1 and 5"};
}

ParseOutcome<std::string> parse_free_text(std::string_view text) { return trim(text); }

}  // namespace chatrec
