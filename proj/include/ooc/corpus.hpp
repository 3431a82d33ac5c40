#pragma once

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "ooc/common.hpp"

namespace ooc::corpus {

using json = nlohmann::json;
namespace fs = std::filesystem;

/// Pipeline progress of a record. Ordered; `rejected` is terminal.
enum class Stage { pending = 0, sanitized, generated, embedded, predicted, rejected };

inline const char* to_string(Stage s) {
    switch (s) {
        case Stage::pending: return "pending";
        case Stage::sanitized: return "sanitized";
        case Stage::generated: return "generated";
        case Stage::embedded: return "embedded";
        case Stage::predicted: return "predicted";
        case Stage::rejected: return "rejected";
    }
    return "?";
}

inline Stage stage_from_string(std::string_view s) {
    for (auto st : {Stage::pending, Stage::sanitized, Stage::generated, Stage::embedded, Stage::predicted,
                    Stage::rejected})
        if (s == to_string(st)) return st;
    throw DataError("unknown status '" + std::string(s) + "'");
}

struct GeneratedImageRef {
    std::string path;
    std::string backend;
    std::optional<std::uint64_t> seed;
    int width = 0;
    int height = 0;
    std::string created_at;

    friend bool operator==(const GeneratedImageRef&, const GeneratedImageRef&) = default;
};

struct Record {
    std::string record_id;
    std::string original_image;
    std::string caption1_raw;
    std::string caption2_raw;
    std::optional<std::string> caption1_clean;
    std::optional<std::string> caption2_clean;
    std::optional<int> gold_label;  // 1 = OOC, 0 = NOOC
    std::optional<GeneratedImageRef> gen1;
    std::optional<GeneratedImageRef> gen2;
    Stage status = Stage::pending;
    std::string reject_reason;
    json extra = json::object();  // unknown fields, written back untouched

    bool rejected() const noexcept { return status == Stage::rejected; }
    /// True once the record has completed `s` (rejected records never have).
    bool reached(Stage s) const noexcept { return !rejected() && status >= s; }

    friend bool operator==(const Record&, const Record&) = default;
};

/// Moves a record forward. Throws on backwards moves or on leaving `rejected`.
inline void advance(Record& r, Stage next, std::string reason = {}) {
    if (r.rejected()) throw DataError("record " + r.record_id + " is rejected; status is terminal");
    if (next != Stage::rejected && next < r.status)
        throw DataError("record " + r.record_id + ": status cannot move from " + to_string(r.status) + " to " +
                        to_string(next));
    r.status = next;
    r.reject_reason = next == Stage::rejected ? std::move(reason) : std::string{};
}

inline void validate(const Record& r) {
    if (r.record_id.empty()) throw DataError("record_id is empty");
    if (r.gold_label && *r.gold_label != 0 && *r.gold_label != 1)
        throw DataError("record " + r.record_id + ": gold_label must be 0 or 1");
    if ((r.gen1 && !r.caption1_clean) || (r.gen2 && !r.caption2_clean))
        throw DataError("record " + r.record_id + ": generated image without sanitized caption");
    if (!r.rejected() && r.status >= Stage::generated && !(r.gen1 && r.gen2))
        throw DataError("record " + r.record_id + ": status " + to_string(r.status) + " needs both generated images");
}

namespace detail {

inline json ref_to_json(const GeneratedImageRef& g) {
    json j = {{"path", g.path}, {"backend", g.backend}, {"width", g.width}, {"height", g.height},
              {"created_at", g.created_at}};
    j["seed"] = g.seed ? json(*g.seed) : json(nullptr);
    return j;
}

inline GeneratedImageRef ref_from_json(const json& j) {
    GeneratedImageRef g;
    g.path = j.at("path").get<std::string>();
    g.backend = j.at("backend").get<std::string>();
    g.width = j.at("width").get<int>();
    g.height = j.at("height").get<int>();
    g.created_at = j.value("created_at", "");
    if (j.contains("seed") && !j["seed"].is_null()) g.seed = j["seed"].get<std::uint64_t>();
    return g;
}

inline const std::vector<std::string>& known_keys() {
    static const std::vector<std::string> keys = {
        "record_id", "original_image", "caption1", "caption2", "caption1_clean", "caption2_clean",
        "gold_label", "gen1", "gen2", "status", "reject_reason"};
    return keys;
}

}  // namespace detail

inline json to_json(const Record& r) {
    json j = r.extra.is_object() ? r.extra : json::object();
    j["record_id"] = r.record_id;
    j["original_image"] = r.original_image;
    j["caption1"] = r.caption1_raw;
    j["caption2"] = r.caption2_raw;
    if (r.caption1_clean) j["caption1_clean"] = *r.caption1_clean;
    if (r.caption2_clean) j["caption2_clean"] = *r.caption2_clean;
    if (r.gold_label) j["gold_label"] = *r.gold_label;
    if (r.gen1) j["gen1"] = detail::ref_to_json(*r.gen1);
    if (r.gen2) j["gen2"] = detail::ref_to_json(*r.gen2);
    j["status"] = to_string(r.status);
    if (r.rejected()) j["reject_reason"] = r.reject_reason;
    return j;
}

inline Record record_from_json(const json& j) {
    if (!j.is_object()) throw DataError("record is not an object");
    for (const char* key : {"record_id", "original_image", "caption1", "caption2"})
        if (!j.contains(key)) throw DataError(std::string("missing required field '") + key + "'");
    Record r;
    try {
        r.record_id = j["record_id"].is_string() ? j["record_id"].get<std::string>() : j["record_id"].dump();
        r.original_image = j["original_image"].get<std::string>();
        r.caption1_raw = j["caption1"].get<std::string>();
        r.caption2_raw = j["caption2"].get<std::string>();
        if (j.contains("caption1_clean")) r.caption1_clean = j["caption1_clean"].get<std::string>();
        if (j.contains("caption2_clean")) r.caption2_clean = j["caption2_clean"].get<std::string>();
        if (j.contains("gold_label") && !j["gold_label"].is_null()) r.gold_label = j["gold_label"].get<int>();
        if (j.contains("gen1")) r.gen1 = detail::ref_from_json(j["gen1"]);
        if (j.contains("gen2")) r.gen2 = detail::ref_from_json(j["gen2"]);
        r.status = stage_from_string(j.value("status", "pending"));
        r.reject_reason = j.value("reject_reason", "");
    } catch (const json::exception& e) {
        throw DataError(std::string("malformed record: ") + e.what());
    }
    for (auto it = j.begin(); it != j.end(); ++it)
        if (std::find(detail::known_keys().begin(), detail::known_keys().end(), it.key()) ==
            detail::known_keys().end())
            r.extra[it.key()] = it.value();
    validate(r);
    return r;
}

inline std::string to_line(const Record& r) { return to_json(r).dump(); }

namespace detail {

// Parses line-delimited records. `allow_replace` lets later lines supersede
// earlier ones (journal replay); otherwise a repeated id is an error.
inline void parse_lines(std::istream& in, std::vector<Record>& out, std::unordered_map<std::string, std::size_t>& idx,
                        bool allow_replace) {
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (trim(line).empty()) continue;
        Record r;
        try {
            r = record_from_json(json::parse(line));
        } catch (const json::parse_error& e) {
            throw ParseError(lineno, e.what());
        } catch (const DataError& e) {
            throw ParseError(lineno, e.what());
        }
        auto [it, inserted] = idx.try_emplace(r.record_id, out.size());
        if (inserted) {
            out.push_back(std::move(r));
        } else if (allow_replace) {
            out[it->second] = std::move(r);
        } else {
            throw ParseError(lineno, "duplicate record_id '" + r.record_id + "'");
        }
    }
}

inline void write_all_fd(int fd, std::string_view data) {
    while (!data.empty()) {
        auto n = ::write(fd, data.data(), data.size());
        if (n < 0) {
            if (errno == EINTR) continue;
            throw StorageError(std::string("write failed: ") + std::strerror(errno));
        }
        data.remove_prefix(static_cast<std::size_t>(n));
    }
}

}  // namespace detail

inline std::vector<Record> load_manifest(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("manifest not found: " + path.string());
    std::vector<Record> out;
    std::unordered_map<std::string, std::size_t> idx;
    detail::parse_lines(in, out, idx, false);
    return out;
}

/// Rewrites a manifest via temp file + fsync + rename.
inline void save_manifest(const fs::path& path, std::span<const Record> records) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::string body;
    for (const auto& r : records) {
        body += to_line(r);
        body += '\n';
    }
    auto tmp = path;
    tmp += ".tmp";
    int fd = ::open(tmp.c_str(), O_WRONLY | O_CREAT | O_TRUNC | O_CLOEXEC, 0644);
    if (fd < 0) throw StorageError("cannot write " + tmp.string());
    try {
        detail::write_all_fd(fd, body);
        ::fsync(fd);
    } catch (...) {
        ::close(fd);
        throw;
    }
    ::close(fd);
    fs::rename(tmp, path);
}

/// Single-writer manifest with a durable append journal.
///
/// Every commit is appended to `<manifest>.journal` and fsynced before it
/// returns. `checkpoint()` folds the journal into the manifest atomically.
/// Opening replays a leftover journal, so work acknowledged before a crash
/// is never lost and never duplicated. An advisory lock on `<manifest>.lock`
/// enforces the single-writer rule across processes.
class ManifestStore {
public:
    explicit ManifestStore(fs::path path) : path_(std::move(path)) {
        if (path_.has_parent_path()) fs::create_directories(path_.parent_path());
        lock_fd_ = ::open(lock_path().c_str(), O_RDWR | O_CREAT | O_CLOEXEC, 0644);
        if (lock_fd_ < 0) throw StorageError("cannot create lock file " + lock_path().string());
        if (::flock(lock_fd_, LOCK_EX | LOCK_NB) != 0) {
            ::close(lock_fd_);
            throw StorageError("manifest " + path_.string() + " is locked by another writer");
        }
        if (fs::exists(path_)) {
            std::ifstream in(path_);
            detail::parse_lines(in, records_, index_, false);
        }
        replay_journal();
        journal_fd_ = ::open(journal_path().c_str(), O_WRONLY | O_CREAT | O_APPEND | O_CLOEXEC, 0644);
        if (journal_fd_ < 0) throw StorageError("cannot open journal " + journal_path().string());
    }

    ManifestStore(const ManifestStore&) = delete;
    ManifestStore& operator=(const ManifestStore&) = delete;

    ~ManifestStore() {
        if (journal_fd_ >= 0) ::close(journal_fd_);
        if (lock_fd_ >= 0) {
            ::flock(lock_fd_, LOCK_UN);
            ::close(lock_fd_);
        }
    }

    const fs::path& path() const noexcept { return path_; }
    fs::path journal_path() const { return fs::path(path_.string() + ".journal"); }
    fs::path lock_path() const { return fs::path(path_.string() + ".lock"); }

    std::vector<Record> records() const {
        std::lock_guard lk(mu_);
        return records_;
    }

    std::optional<Record> find(const std::string& id) const {
        std::lock_guard lk(mu_);
        auto it = index_.find(id);
        if (it == index_.end()) return std::nullopt;
        return records_[it->second];
    }

    std::size_t size() const {
        std::lock_guard lk(mu_);
        return records_.size();
    }

    /// Adds a new record; durable on return. Duplicate ids are rejected.
    void append(const Record& r) {
        validate(r);
        std::lock_guard lk(mu_);
        if (index_.contains(r.record_id)) throw DataError("duplicate record_id '" + r.record_id + "'");
        write_journal(r);
        index_.emplace(r.record_id, records_.size());
        records_.push_back(r);
    }

    /// Replaces an existing record; durable on return.
    void update(const Record& r) {
        validate(r);
        std::lock_guard lk(mu_);
        auto it = index_.find(r.record_id);
        if (it == index_.end()) throw DataError("unknown record_id '" + r.record_id + "'");
        write_journal(r);
        records_[it->second] = r;
    }

    void checkpoint() {
        std::lock_guard lk(mu_);
        save_manifest(path_, records_);
        if (::ftruncate(journal_fd_, 0) != 0) throw StorageError("cannot truncate journal");
        ::fsync(journal_fd_);
    }

private:
    void write_journal(const Record& r) {
        auto line = to_line(r);
        line += '\n';
        detail::write_all_fd(journal_fd_, line);
        if (::fsync(journal_fd_) != 0) throw StorageError("fsync failed on journal");
    }

    void replay_journal() {
        auto jp = journal_path();
        if (!fs::exists(jp)) return;
        std::string content;
        {
            std::ifstream in(jp, std::ios::binary);
            content.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
        }
        // A torn final line was never acknowledged; drop it.
        auto last_nl = content.rfind('\n');
        std::size_t keep = last_nl == std::string::npos ? 0 : last_nl + 1;
        if (keep != content.size()) {
            content.resize(keep);
            fs::resize_file(jp, keep);
        }
        std::istringstream in(content);
        detail::parse_lines(in, records_, index_, true);
    }

    fs::path path_;
    int lock_fd_ = -1;
    int journal_fd_ = -1;
    mutable std::mutex mu_;
    std::vector<Record> records_;
    std::unordered_map<std::string, std::size_t> index_;
};

// ---------------------------------------------------------------------------
// Embedding cache
// ---------------------------------------------------------------------------

/// Cache key: content digest of the image bytes plus the featurizer config digest.
inline std::string embedding_key(std::span<const std::uint8_t> image_bytes, std::string_view config_digest) {
    return hex64(fnv1a(image_bytes)) + "/" + std::string(config_digest);
}

/// Binary embedding store ("EMB1"): header = magic, u32 count, u32 dim; then
/// per entry u16 key length, key bytes, dim f32 values. All little-endian.
/// Puts are appended and the header count patched, so each put is durable.
class EmbeddingCache {
public:
    EmbeddingCache(fs::path path, std::uint32_t dim) : path_(std::move(path)), dim_(dim) {
        if (dim_ == 0) throw DataError("embedding dim must be positive");
        if (path_.has_parent_path()) fs::create_directories(path_.parent_path());
        if (fs::exists(path_) && fs::file_size(path_) > 0) {
            load();
            file_ = std::fopen(path_.c_str(), "r+b");
        } else {
            file_ = std::fopen(path_.c_str(), "w+b");
            if (file_) write_header(0);
        }
        if (!file_) throw StorageError("cannot open embedding cache " + path_.string());
    }

    EmbeddingCache(const EmbeddingCache&) = delete;
    EmbeddingCache& operator=(const EmbeddingCache&) = delete;
    ~EmbeddingCache() {
        if (file_) std::fclose(file_);
    }

    std::uint32_t dim() const noexcept { return dim_; }
    std::size_t size() const {
        std::shared_lock lk(mu_);
        return entries_.size();
    }

    /// nullopt means the key is absent; I/O problems throw instead.
    std::optional<std::vector<float>> get(const std::string& key) const {
        std::shared_lock lk(mu_);
        auto it = entries_.find(key);
        if (it == entries_.end()) return std::nullopt;
        return it->second;
    }

    void put(const std::string& key, std::span<const float> values) {
        if (values.size() != dim_)
            throw DataError("embedding dim mismatch: cache dim " + std::to_string(dim_) + ", got " +
                            std::to_string(values.size()));
        if (key.size() > 0xffff) throw DataError("embedding key too long");
        std::unique_lock lk(mu_);
        auto it = entries_.find(key);
        if (it != entries_.end() && std::equal(values.begin(), values.end(), it->second.begin())) return;

        std::vector<std::uint8_t> buf;
        buf.reserve(2 + key.size() + 4 * values.size());
        put_le(buf, static_cast<std::uint16_t>(key.size()));
        buf.insert(buf.end(), key.begin(), key.end());
        for (float v : values) {
            std::uint32_t bits;
            std::memcpy(&bits, &v, 4);
            put_le(buf, bits);
        }
        if (std::fseek(file_, 0, SEEK_END) != 0 || std::fwrite(buf.data(), 1, buf.size(), file_) != buf.size())
            throw StorageError("embedding cache write failed");
        ++count_;
        write_header(count_);
        entries_[key].assign(values.begin(), values.end());
    }

private:
    template <class T>
    static void put_le(std::vector<std::uint8_t>& out, T v) {
        for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }

    template <class T>
    static T get_le(const std::uint8_t* p) {
        T v = 0;
        for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(static_cast<T>(p[i]) << (8 * i));
        return v;
    }

    void write_header(std::uint32_t count) {
        std::vector<std::uint8_t> h = {'E', 'M', 'B', '1'};
        put_le(h, count);
        put_le(h, dim_);
        if (std::fseek(file_, 0, SEEK_SET) != 0 || std::fwrite(h.data(), 1, h.size(), file_) != h.size() ||
            std::fflush(file_) != 0)
            throw StorageError("embedding cache header write failed");
    }

    void load() {
        std::ifstream in(path_, std::ios::binary);
        std::vector<std::uint8_t> data{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
        if (data.size() < 12 || std::memcmp(data.data(), "EMB1", 4) != 0)
            throw DataError("not an EMB1 embedding cache: " + path_.string());
        count_ = get_le<std::uint32_t>(&data[4]);
        auto file_dim = get_le<std::uint32_t>(&data[8]);
        if (file_dim != dim_)
            throw DataError("embedding dim mismatch: cache " + path_.string() + " has dim " +
                            std::to_string(file_dim) + ", expected " + std::to_string(dim_));
        std::size_t pos = 12;
        for (std::uint32_t i = 0; i < count_; ++i) {
            if (pos + 2 > data.size()) throw DataError("truncated embedding cache");
            auto klen = get_le<std::uint16_t>(&data[pos]);
            pos += 2;
            if (pos + klen + 4ull * dim_ > data.size()) throw DataError("truncated embedding cache");
            std::string key(reinterpret_cast<const char*>(&data[pos]), klen);
            pos += klen;
            std::vector<float> values(dim_);
            for (auto& v : values) {
                auto bits = get_le<std::uint32_t>(&data[pos]);
                std::memcpy(&v, &bits, 4);
                pos += 4;
            }
            entries_[std::move(key)] = std::move(values);
        }
        // Bytes past the last counted entry come from an interrupted put.
        if (pos != data.size()) fs::resize_file(path_, pos);
    }

    fs::path path_;
    std::uint32_t dim_;
    std::uint32_t count_ = 0;
    std::FILE* file_ = nullptr;
    mutable std::shared_mutex mu_;
    std::unordered_map<std::string, std::vector<float>> entries_;
};

// ---------------------------------------------------------------------------
// Survey ratings
// ---------------------------------------------------------------------------

struct SurveyRating {
    std::string pair_id;
    std::string participant_id;
    int rating = 0;  // 1..10
};

/// Reads `pair_id,participant_id,rating` CSV (header required).
inline std::vector<SurveyRating> read_survey_csv(std::istream& in) {
    std::string line;
    if (!std::getline(in, line)) throw ParseError(1, "empty survey file");
    if (trim(line) != "pair_id,participant_id,rating")
        throw ParseError(1, "expected header pair_id,participant_id,rating");
    std::vector<SurveyRating> out;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (trim(line).empty()) continue;
        auto cols = split(trim(line), ',');
        if (cols.size() != 3) throw ParseError(lineno, "expected 3 columns");
        SurveyRating r{std::string(trim(cols[0])), std::string(trim(cols[1])), 0};
        auto rating = std::string(trim(cols[2]));
        std::size_t used = 0;
        try {
            r.rating = std::stoi(rating, &used);
        } catch (const std::exception&) {
            used = 0;
        }
        if (used == 0 || used != rating.size()) throw ParseError(lineno, "rating is not an integer: " + rating);
        if (r.rating < 1 || r.rating > 10)
            throw ParseError(lineno, "rating " + rating + " outside [1,10]");
        if (r.pair_id.empty()) throw ParseError(lineno, "empty pair_id");
        out.push_back(std::move(r));
    }
    return out;
}

inline std::vector<SurveyRating> read_survey_csv(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("survey file not found: " + path.string());
    return read_survey_csv(in);
}

}  // namespace ooc::corpus
