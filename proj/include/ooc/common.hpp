#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <chrono>
#include <cstdint>
#include <ctime>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <openssl/evp.h>

namespace ooc {

// Broad failure categories. The CLI maps these onto process exit codes.
enum class ErrorKind { config, data, backend, storage };

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

struct ConfigError : Error {
    explicit ConfigError(const std::string& what) : Error(ErrorKind::config, what) {}
};

struct DataError : Error {
    explicit DataError(const std::string& what) : Error(ErrorKind::data, what) {}
};

struct BackendError : Error {
    explicit BackendError(const std::string& what) : Error(ErrorKind::backend, what) {}
};

struct StorageError : Error {
    explicit StorageError(const std::string& what) : Error(ErrorKind::storage, what) {}
};

// Parse failure in a line-oriented file; line numbers are 1-based.
struct ParseError : DataError {
    ParseError(std::size_t line, const std::string& what)
        : DataError("line " + std::to_string(line) + ": " + what), line(line) {}
    std::size_t line;
};

// 64-bit FNV-1a.
inline constexpr std::uint64_t fnv1a_offset = 14695981039346656037ull;
inline constexpr std::uint64_t fnv1a_prime = 1099511628211ull;

inline std::uint64_t fnv1a(std::span<const std::uint8_t> bytes, std::uint64_t h = fnv1a_offset) noexcept {
    for (auto b : bytes) {
        h ^= b;
        h *= fnv1a_prime;
    }
    return h;
}

inline std::uint64_t fnv1a(std::string_view s, std::uint64_t h = fnv1a_offset) noexcept {
    return fnv1a(std::span(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()), h);
}

inline std::string hex64(std::uint64_t v) {
    static constexpr char digits[] = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i, v >>= 4) out[static_cast<std::size_t>(i)] = digits[v & 0xf];
    return out;
}

inline std::string to_lower(std::string_view s) {
    std::string out(s);
    std::transform(out.begin(), out.end(), out.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return out;
}

inline std::string_view trim(std::string_view s) {
    const auto is_space = [](unsigned char c) { return std::isspace(c) != 0; };
    while (!s.empty() && is_space(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
    while (!s.empty() && is_space(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
    return s;
}

inline std::vector<std::string> split_whitespace(std::string_view s) {
    std::vector<std::string> out;
    std::size_t i = 0;
    while (i < s.size()) {
        while (i < s.size() && std::isspace(static_cast<unsigned char>(s[i]))) ++i;
        std::size_t j = i;
        while (j < s.size() && !std::isspace(static_cast<unsigned char>(s[j]))) ++j;
        if (j > i) out.emplace_back(s.substr(i, j - i));
        i = j;
    }
    return out;
}

inline std::vector<std::string> split(std::string_view s, char sep) {
    std::vector<std::string> out;
    std::size_t start = 0;
    for (;;) {
        auto pos = s.find(sep, start);
        out.emplace_back(s.substr(start, pos == std::string_view::npos ? pos : pos - start));
        if (pos == std::string_view::npos) break;
        start = pos + 1;
    }
    return out;
}

inline bool is_ascii_punct(unsigned char c) noexcept { return std::ispunct(c) != 0; }

// Removes leading and trailing ASCII punctuation; inner punctuation ("covid-19") stays.
inline std::string_view strip_punct(std::string_view s) {
    while (!s.empty() && is_ascii_punct(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
    while (!s.empty() && is_ascii_punct(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
    return s;
}

// Lowercased, punctuation-stripped, whitespace-separated tokens with empties dropped.
inline std::vector<std::string> normalized_tokens(std::string_view text) {
    std::vector<std::string> out;
    for (const auto& raw : split_whitespace(text)) {
        auto t = strip_punct(raw);
        if (!t.empty()) out.push_back(to_lower(t));
    }
    return out;
}

inline std::string base64_decode(std::string_view in) {
    std::string clean;
    clean.reserve(in.size());
    for (char c : in)
        if (c != '\n' && c != '\r' && c != ' ') clean.push_back(c);
    if (clean.size() % 4 != 0) throw DataError("invalid base64 input");
    std::string out(clean.size() / 4 * 3, '\0');
    const int n = EVP_DecodeBlock(reinterpret_cast<unsigned char*>(out.data()),
                                  reinterpret_cast<const unsigned char*>(clean.data()), static_cast<int>(clean.size()));
    if (n < 0) throw DataError("invalid base64 input");
    // EVP_DecodeBlock counts padding as zero bytes.
    const auto pad = static_cast<std::size_t>(std::count(clean.end() - std::min<std::size_t>(2, clean.size()), clean.end(), '='));
    out.resize(static_cast<std::size_t>(n) - pad);
    return out;
}

inline std::string utc_timestamp(std::chrono::system_clock::time_point tp = std::chrono::system_clock::now()) {
    auto t = std::chrono::system_clock::to_time_t(tp);
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

}  // namespace ooc
