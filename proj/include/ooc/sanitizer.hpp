#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "ooc/common.hpp"

namespace ooc::sanitizer {

/// Entity mention over byte offsets [start, end) of a UTF-8 caption.
struct TaggerSpan {
    std::size_t start = 0;
    std::size_t end = 0;
    std::string label;

    std::size_t length() const noexcept { return end - start; }
    friend bool operator==(const TaggerSpan&, const TaggerSpan&) = default;
};

struct SanitizerConfig {
    // Entity class -> replacement word; nullopt keeps the span text verbatim.
    std::map<std::string, std::optional<std::string>> label_map;
    std::set<std::string> blocked_words;
    std::set<std::string> blocked_topics;
    // When true, spans whose label is not in label_map are left as-is instead of raising.
    bool drop_unmapped_labels = false;

    static SanitizerConfig defaults() {
        SanitizerConfig cfg;
        cfg.label_map = {
            {"PERSON", "Person"},      {"GPE", "Location"}, {"LOC", "Location"},
            {"ORG", "Organization"},   {"NORP", "Group"},   {"FAC", "Building"},
            {"DATE", std::nullopt},    {"CARDINAL", std::nullopt},
        };
        cfg.blocked_topics = {"covid", "covid-19", "coronavirus", "abortion",
                              "pregnancy", "pregnant", "drug", "drugs"};
        return cfg;
    }

    void validate() const {
        for (const auto& [label, word] : label_map)
            if (word && trim(*word).empty()) throw ConfigError("empty replacement word for label " + label);
        for (const auto* set : {&blocked_words, &blocked_topics})
            for (const auto& w : *set)
                if (w != to_lower(w)) throw ConfigError("blocked entry must be lowercase: " + w);
    }

    /// Words the substitution step can introduce. Taggers must not re-tag them.
    std::set<std::string> replacement_words() const {
        std::set<std::string> out;
        for (const auto& [_, word] : label_map)
            if (word) out.insert(*word);
        return out;
    }
};

/// Keeps the longest of any overlapping spans (earlier start breaks ties) and sorts by start.
inline std::vector<TaggerSpan> resolve_overlaps(std::vector<TaggerSpan> spans) {
    std::stable_sort(spans.begin(), spans.end(), [](const TaggerSpan& a, const TaggerSpan& b) {
        if (a.length() != b.length()) return a.length() > b.length();
        return a.start < b.start;
    });
    std::vector<TaggerSpan> kept;
    for (auto& s : spans) {
        bool clash = std::any_of(kept.begin(), kept.end(),
                                 [&](const TaggerSpan& k) { return s.start < k.end && k.start < s.end; });
        if (!clash) kept.push_back(std::move(s));
    }
    std::sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) { return a.start < b.start; });
    return kept;
}

inline std::string collapse_whitespace(std::string_view s) {
    std::string out;
    for (const auto& tok : split_whitespace(s)) {
        if (!out.empty()) out += ' ';
        out += tok;
    }
    return out;
}

/// Replaces each span with its label's replacement word and collapses whitespace.
inline std::string substitute_entities(std::string_view caption, std::span<const TaggerSpan> spans,
                                       const SanitizerConfig& cfg) {
    std::vector<TaggerSpan> sorted(spans.begin(), spans.end());
    std::sort(sorted.begin(), sorted.end(), [](const auto& a, const auto& b) { return a.start < b.start; });
    std::string out;
    std::size_t pos = 0;
    for (const auto& s : sorted) {
        if (s.start >= s.end || s.end > caption.size())
            throw DataError("span [" + std::to_string(s.start) + "," + std::to_string(s.end) +
                            ") out of bounds for caption of length " + std::to_string(caption.size()));
        if (s.start < pos) throw DataError("overlapping spans must be resolved before substitution");
        out.append(caption.substr(pos, s.start - pos));
        auto it = cfg.label_map.find(s.label);
        if (it == cfg.label_map.end()) {
            if (!cfg.drop_unmapped_labels) throw DataError("no replacement for entity label " + s.label);
            out.append(caption.substr(s.start, s.length()));
        } else if (it->second) {
            out.append(*it->second);
        } else {
            out.append(caption.substr(s.start, s.length()));
        }
        pos = s.end;
    }
    out.append(caption.substr(pos));
    return collapse_whitespace(out);
}

// ---------------------------------------------------------------------------
// Taggers
// ---------------------------------------------------------------------------

class Tagger {
public:
    virtual ~Tagger() = default;
    virtual std::vector<TaggerSpan> tag(std::string_view caption) const = 0;
    virtual std::string name() const = 0;
};

/// For corpora whose captions are already entity-substituted.
class NullTagger final : public Tagger {
public:
    std::vector<TaggerSpan> tag(std::string_view) const override { return {}; }
    std::string name() const override { return "null"; }
};

namespace detail {

struct Token {
    std::size_t start;
    std::size_t end;  // core span, punctuation stripped
    std::size_t raw_end;
};

inline std::vector<Token> tokenize_with_offsets(std::string_view s) {
    std::vector<Token> out;
    std::size_t i = 0;
    while (i < s.size()) {
        while (i < s.size() && std::isspace(static_cast<unsigned char>(s[i]))) ++i;
        std::size_t j = i;
        while (j < s.size() && !std::isspace(static_cast<unsigned char>(s[j]))) ++j;
        if (j > i) {
            std::size_t a = i, b = j;
            while (a < b && is_ascii_punct(static_cast<unsigned char>(s[a]))) ++a;
            while (b > a && is_ascii_punct(static_cast<unsigned char>(s[b - 1]))) --b;
            // possessive suffix
            if (b - a > 2 && s.substr(b - 2, 2) == "'s") b -= 2;
            if (b > a) out.push_back({a, b, j});
        }
        i = j;
    }
    return out;
}

inline bool is_boundary(std::string_view s, std::size_t pos) {
    return pos >= s.size() || std::isspace(static_cast<unsigned char>(s[pos])) ||
           is_ascii_punct(static_cast<unsigned char>(s[pos]));
}

}  // namespace detail

/// Exact, case-sensitive name lookup at token boundaries; longest name wins.
class GazetteerTagger final : public Tagger {
public:
    struct Entry {
        std::string name;
        std::string label;
    };

    GazetteerTagger(std::vector<Entry> entries, std::set<std::string> whitelist = {})
        : whitelist_(std::move(whitelist)) {
        for (auto& e : entries) {
            if (e.name.empty() || whitelist_.contains(e.name)) continue;
            auto first = split_whitespace(e.name).front();
            by_first_word_[first].push_back(std::move(e));
        }
        for (auto& [_, v] : by_first_word_)
            std::sort(v.begin(), v.end(), [](const Entry& a, const Entry& b) { return a.name.size() > b.name.size(); });
    }

    /// One name per line, optionally followed by a tab and an entity label
    /// (default PERSON). Lines starting with '#' are comments.
    static GazetteerTagger from_file(const std::filesystem::path& path, std::set<std::string> whitelist = {}) {
        std::ifstream in(path);
        if (!in) throw ConfigError("gazetteer file not found: " + path.string());
        std::vector<Entry> entries;
        std::string line;
        while (std::getline(in, line)) {
            auto t = trim(line);
            if (t.empty() || t.front() == '#') continue;
            auto tab = t.find('\t');
            if (tab == std::string_view::npos)
                entries.push_back({std::string(t), "PERSON"});
            else
                entries.push_back({std::string(trim(t.substr(0, tab))), std::string(trim(t.substr(tab + 1)))});
        }
        return GazetteerTagger(std::move(entries), std::move(whitelist));
    }

    std::vector<TaggerSpan> tag(std::string_view caption) const override {
        std::vector<TaggerSpan> spans;
        for (const auto& tok : detail::tokenize_with_offsets(caption)) {
            auto word = caption.substr(tok.start, tok.end - tok.start);
            auto it = by_first_word_.find(std::string(word));
            if (it == by_first_word_.end()) continue;
            for (const auto& e : it->second) {
                if (caption.substr(tok.start).starts_with(e.name) &&
                    detail::is_boundary(caption, tok.start + e.name.size())) {
                    spans.push_back({tok.start, tok.start + e.name.size(), e.label});
                    break;
                }
            }
        }
        return resolve_overlaps(std::move(spans));
    }

    std::string name() const override { return "gazetteer"; }

private:
    std::set<std::string> whitelist_;
    std::unordered_map<std::string, std::vector<Entry>> by_first_word_;
};

/// Tags runs of mid-sentence capitalized words as PERSON, skipping stopwords
/// and the replacement vocabulary.
class CapitalizationTagger final : public Tagger {
public:
    explicit CapitalizationTagger(std::set<std::string> whitelist = {}) : whitelist_(std::move(whitelist)) {}

    std::vector<TaggerSpan> tag(std::string_view caption) const override {
        static const std::set<std::string> stopwords = {
            "i", "a", "an", "the", "and", "or", "but", "in", "on", "at", "of", "to", "for", "with", "by",
            "from", "this", "that", "these", "those", "he", "she", "it", "they", "we", "you", "his", "her",
            "their", "our", "my", "its", "is", "was", "are", "mr", "mrs", "ms", "dr", "monday", "tuesday",
            "wednesday", "thursday", "friday", "saturday", "sunday", "january", "february", "march",
            "april", "may", "june", "july", "august", "september", "october", "november", "december"};
        const auto tokens = detail::tokenize_with_offsets(caption);
        std::vector<TaggerSpan> spans;
        std::optional<TaggerSpan> run;
        for (std::size_t i = 0; i < tokens.size(); ++i) {
            const auto& tok = tokens[i];
            auto word = caption.substr(tok.start, tok.end - tok.start);
            bool sentence_start = i == 0;
            if (i > 0) {
                char prev = caption[tokens[i - 1].raw_end - 1];
                sentence_start = prev == '.' || prev == '!' || prev == '?' || prev == ':';
            }
            bool candidate = !sentence_start && std::isupper(static_cast<unsigned char>(word.front())) &&
                             !whitelist_.contains(std::string(word)) && !stopwords.contains(to_lower(word));
            // A run continues only across plain whitespace between adjacent tokens.
            bool joins = run && candidate && tokens[i - 1].raw_end == tokens[i - 1].end &&
                         trim(caption.substr(run->end, tok.start - run->end)).empty();
            if (joins) {
                run->end = tok.end;
            } else {
                if (run) spans.push_back(*run);
                run.reset();
                if (candidate) run = TaggerSpan{tok.start, tok.end, "PERSON"};
            }
        }
        if (run) spans.push_back(*run);
        return spans;
    }

    std::string name() const override { return "heuristic"; }

private:
    std::set<std::string> whitelist_;
};

/// Second tagging round over already-substituted text.
inline std::vector<TaggerSpan> second_pass_tag(std::string_view caption, const Tagger& tagger,
                                               std::string_view record_id = {}) {
    try {
        return resolve_overlaps(tagger.tag(caption));
    } catch (const std::exception& e) {
        throw BackendError("tagger '" + tagger.name() + "' failed on record " + std::string(record_id) + ": " +
                           e.what());
    }
}

// ---------------------------------------------------------------------------
// Screening
// ---------------------------------------------------------------------------

struct Accepted {
    std::string text;
};

struct Rejected {
    enum class Kind { word, topic };
    Kind kind;
    std::string term;

    std::string reason() const { return (kind == Kind::word ? "word=" : "topic=") + term; }
};

using ScreenResult = std::variant<Accepted, Rejected>;

inline ScreenResult screen(std::string_view caption, const SanitizerConfig& cfg) {
    const auto tokens = normalized_tokens(caption);
    std::string joined = " ";
    for (const auto& t : tokens) joined += t + " ";
    for (const auto& t : tokens)
        if (cfg.blocked_words.contains(t)) return Rejected{Rejected::Kind::word, t};
    for (const auto& w : cfg.blocked_words)  // multi-word entries match whole token sequences
        if (w.find(' ') != std::string::npos && joined.find(" " + collapse_whitespace(w) + " ") != std::string::npos)
            return Rejected{Rejected::Kind::word, w};
    const auto lowered = to_lower(caption);
    for (const auto& topic : cfg.blocked_topics)
        if (lowered.find(topic) != std::string::npos) return Rejected{Rejected::Kind::topic, topic};
    return Accepted{std::string(caption)};
}

/// One entry per line, lowercased; blank lines and '#' comments skipped.
inline std::set<std::string> load_word_list(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("word list not found: " + path.string());
    std::set<std::string> out;
    std::string line;
    while (std::getline(in, line)) {
        auto t = trim(line);
        if (t.empty() || t.front() == '#') continue;
        out.insert(to_lower(t));
    }
    return out;
}

inline SanitizerConfig config_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {}) {
    auto cfg = SanitizerConfig::defaults();
    if (j.contains("label_map"))
        for (auto& [label, word] : j["label_map"].items())
            cfg.label_map[label] = word.is_null() ? std::nullopt : std::optional(word.get<std::string>());
    if (j.contains("blocked_topics")) {
        cfg.blocked_topics.clear();
        for (auto& t : j["blocked_topics"]) cfg.blocked_topics.insert(to_lower(t.get<std::string>()));
    }
    if (j.contains("blocked_words"))
        for (auto& w : j["blocked_words"]) cfg.blocked_words.insert(to_lower(w.get<std::string>()));
    if (j.contains("blocked_words_file")) {
        std::filesystem::path p = j["blocked_words_file"].get<std::string>();
        if (p.is_relative() && !base_dir.empty()) p = base_dir / p;
        cfg.blocked_words.merge(load_word_list(p));
    }
    cfg.drop_unmapped_labels = j.value("drop_unmapped_labels", false);
    cfg.validate();
    return cfg;
}

struct CaptionOutcome {
    std::string text;                 // sanitized text (also set when rejected)
    std::optional<Rejected> rejected;
};

/// Full caption path: tag and substitute, re-tag and substitute, then screen.
inline CaptionOutcome sanitize_caption(std::string_view raw, const Tagger& tagger, const SanitizerConfig& cfg,
                                       std::string_view record_id = {}) {
    auto first = substitute_entities(raw, second_pass_tag(raw, tagger, record_id), cfg);
    auto second = substitute_entities(first, second_pass_tag(first, tagger, record_id), cfg);
    auto verdict = screen(second, cfg);
    if (auto* r = std::get_if<Rejected>(&verdict)) return {second, *r};
    return {second, std::nullopt};
}

}  // namespace ooc::sanitizer
