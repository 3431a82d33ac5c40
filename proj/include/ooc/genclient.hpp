#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <ostream>
#include <random>
#include <string>
#include <thread>
#include <variant>
#include <vector>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "ooc/common.hpp"
#include "ooc/corpus.hpp"
#include "ooc/image.hpp"

namespace ooc::gen {

using json = nlohmann::json;
namespace fs = std::filesystem;

struct GenRequest {
    std::string prompt;
    int width = 512;
    int height = 512;
    std::optional<std::uint64_t> seed;
    std::string backend_id;
    std::string request_key;  // "<record_id>/c<n>"; for logs only

    void validate() const {
        if (trim(prompt).empty()) throw DataError("generation prompt is empty");
        if (width != height) throw DataError("generated images must be square");
        if (width != 256 && width != 512 && width != 1024) throw DataError("image size must be 256, 512 or 1024");
    }
};

struct BackendConfig {
    std::string backend_id = "mock";
    std::string kind = "mock";  // mock | openai | stability
    std::string endpoint;
    std::string credential_env;  // name of the environment variable holding the key
    double rate_limit = 60;      // requests per minute
    int max_retries = 3;
    double backoff_base = 1.0;  // seconds
    double timeout = 60;        // seconds
    std::string model;          // openai: optional model name
    std::string engine = "stable-diffusion-v1-5";  // stability engine id
    int latency_ms = 0;         // mock only: simulated service latency
    std::string call_log;       // mock only: append one line per call

    void validate() const {
        if (!(rate_limit > 0)) throw ConfigError("backend " + backend_id + ": rate_limit must be > 0");
        if (max_retries < 0) throw ConfigError("backend " + backend_id + ": max_retries must be >= 0");
        if (backoff_base < 0) throw ConfigError("backend " + backend_id + ": backoff_base must be >= 0");
        if (kind != "mock" && kind != "openai" && kind != "stability")
            throw ConfigError("backend " + backend_id + ": unknown kind '" + kind + "'");
        if (kind != "mock" && endpoint.empty()) throw ConfigError("backend " + backend_id + ": endpoint missing");
    }

    static BackendConfig from_json(const json& j) {
        BackendConfig c;
        c.backend_id = j.value("backend_id", c.backend_id);
        c.kind = j.value("kind", c.backend_id == "mock" ? std::string("mock") : c.kind);
        c.endpoint = j.value("endpoint", "");
        c.credential_env = j.value("credential_env", "");
        c.rate_limit = j.value("rate_limit", c.rate_limit);
        c.max_retries = j.value("max_retries", c.max_retries);
        c.backoff_base = j.value("backoff_base", c.backoff_base);
        c.timeout = j.value("timeout", c.timeout);
        c.model = j.value("model", "");
        c.engine = j.value("engine", c.engine);
        c.latency_ms = j.value("latency_ms", 0);
        c.call_log = j.value("call_log", "");
        return c;
    }
};

struct GeneratedImage {
    std::vector<std::uint8_t> bytes;  // PNG
    std::optional<std::uint64_t> seed;
};

struct PolicyRejected {
    std::string reason;
};

struct TransientFailure {
    std::string reason;
};

using Attempt = std::variant<GeneratedImage, PolicyRejected, TransientFailure>;

// ---------------------------------------------------------------------------
// Time
// ---------------------------------------------------------------------------

class Clock {
public:
    virtual ~Clock() = default;
    virtual double now() = 0;  // seconds
    virtual void sleep_until(double t) = 0;
};

class SteadyClock final : public Clock {
public:
    double now() override {
        return std::chrono::duration<double>(std::chrono::steady_clock::now().time_since_epoch()).count();
    }
    void sleep_until(double t) override {
        const double d = t - now();
        if (d > 0) std::this_thread::sleep_for(std::chrono::duration<double>(d));
    }
};

/// Time only moves when somebody sleeps.
class SimulatedClock final : public Clock {
public:
    double now() override {
        std::lock_guard lk(mu_);
        return t_;
    }
    void sleep_until(double t) override {
        std::lock_guard lk(mu_);
        t_ = std::max(t_, t);
    }

private:
    std::mutex mu_;
    double t_ = 0;
};

/// Token bucket of capacity one shared by all workers: consecutive grants are
/// at least 60 / rate_limit seconds apart.
class RateLimiter {
public:
    RateLimiter(double per_minute, Clock& clock) : interval_(60.0 / per_minute), clock_(clock) {
        if (!(per_minute > 0)) throw ConfigError("rate limit must be positive");
    }

    /// Blocks until a slot is available; returns the granted time.
    double acquire() {
        double slot;
        {
            std::lock_guard lk(mu_);
            slot = next_ ? std::max(clock_.now(), *next_) : clock_.now();
            next_ = slot + interval_;
        }
        clock_.sleep_until(slot);
        return slot;
    }

    double interval() const noexcept { return interval_; }

private:
    double interval_;
    Clock& clock_;
    std::mutex mu_;
    std::optional<double> next_;
};

// ---------------------------------------------------------------------------
// Backends
// ---------------------------------------------------------------------------

class Backend {
public:
    virtual ~Backend() = default;
    virtual std::string id() const = 0;
    /// One request, no retries.
    virtual Attempt generate_once(const GenRequest& req) = 0;
};

/// Seed of the mock image: FNV-1a over the sorted normalized token multiset,
/// XORed with the user seed.
inline std::uint64_t mock_seed(std::string_view prompt, std::optional<std::uint64_t> user_seed) {
    auto tokens = normalized_tokens(prompt);
    std::sort(tokens.begin(), tokens.end());
    std::string joined;
    for (const auto& t : tokens) {
        joined += t;
        joined += ' ';
    }
    return fnv1a(joined) ^ user_seed.value_or(0);
}

/// Deterministic stand-in for a text-to-image service.
///
/// The image is an 8x8 grid of flat blocks. Block colors come from a PRNG
/// seeded with mock_seed(), but every block's grayscale value is pinned inside
/// the 4-level band owned by one of the prompt's tokens (band = FNV-1a(token)
/// mod 64). Prompts with equal token multisets therefore give identical
/// images, and prompts with disjoint tokens give images whose grayscale
/// histograms barely overlap.
inline Image render_mock_image(std::string_view prompt, std::optional<std::uint64_t> user_seed, int size) {
    constexpr int grid = 8;
    const std::uint64_t seed = mock_seed(prompt, user_seed);
    std::mt19937_64 rng(seed);
    auto tokens = normalized_tokens(prompt);
    std::sort(tokens.begin(), tokens.end());
    std::vector<unsigned> bands;
    for (const auto& t : tokens) bands.push_back(static_cast<unsigned>(fnv1a(t) % 64));
    if (bands.empty()) bands.push_back(static_cast<unsigned>(seed % 64));

    Image img(size, size, 3);
    const int block = size / grid;
    for (int by = 0; by < grid; ++by)
        for (int bx = 0; bx < grid; ++bx) {
            const unsigned band = bands[rng() % bands.size()];
            const int gray = static_cast<int>(band * 4 + rng() % 4);
            const int r = std::clamp(gray + static_cast<int>(rng() % 41) - 20, 0, 255);
            const int b = std::clamp(gray + static_cast<int>(rng() % 41) - 20, 0, 255);
            int g = static_cast<int>(std::lround((1000.0 * gray - 299.0 * r - 114.0 * b) / 587.0));
            g = std::clamp(g, 0, 255);
            std::array<std::uint8_t, 3> rgb = {static_cast<std::uint8_t>(r), static_cast<std::uint8_t>(g),
                                               static_cast<std::uint8_t>(b)};
            if (luma(rgb[0], rgb[1], rgb[2]) / 4 != band) rgb.fill(static_cast<std::uint8_t>(gray));
            for (int y = by * block; y < (by + 1) * block; ++y)
                for (int x = bx * block; x < (bx + 1) * block; ++x)
                    for (int c = 0; c < 3; ++c) img.at(x, y, c) = rgb[static_cast<std::size_t>(c)];
        }
    return img;
}

class MockBackend final : public Backend {
public:
    explicit MockBackend(BackendConfig cfg = {}) : cfg_(std::move(cfg)) {}

    std::string id() const override { return cfg_.backend_id; }

    Attempt generate_once(const GenRequest& req) override {
        req.validate();
        if (cfg_.latency_ms > 0) std::this_thread::sleep_for(std::chrono::milliseconds(cfg_.latency_ms));
        const auto seed = mock_seed(req.prompt, req.seed);
        GeneratedImage out{encode_png(render_mock_image(req.prompt, req.seed, req.width)), seed};
        calls_.fetch_add(1);
        if (!cfg_.call_log.empty()) {
            // One line per completed call, appended in a single write.
            std::lock_guard lk(log_mu_);
            const auto line = json{{"key", req.request_key}, {"prompt", req.prompt}, {"size", req.width}}.dump() + "\n";
            std::ofstream log(cfg_.call_log, std::ios::app | std::ios::binary);
            log.write(line.data(), static_cast<std::streamsize>(line.size()));
        }
        return out;
    }

    std::size_t calls() const noexcept { return calls_.load(); }

private:
    BackendConfig cfg_;
    std::atomic<std::size_t> calls_{0};
    std::mutex log_mu_;
};

namespace detail {

inline std::string require_credential(const BackendConfig& cfg) {
    if (cfg.credential_env.empty()) throw ConfigError("backend " + cfg.backend_id + ": credential_env not set");
    const char* v = std::getenv(cfg.credential_env.c_str());
    if (!v || !*v)
        throw ConfigError("backend " + cfg.backend_id + ": environment variable " + cfg.credential_env +
                          " is not set");
    return v;
}

inline std::unique_ptr<httplib::Client> make_client(const BackendConfig& cfg) {
    auto cli = std::make_unique<httplib::Client>(cfg.endpoint);
    const auto secs = std::chrono::duration<double>(cfg.timeout);
    cli->set_connection_timeout(std::chrono::duration_cast<std::chrono::microseconds>(secs));
    cli->set_read_timeout(std::chrono::duration_cast<std::chrono::microseconds>(secs));
    cli->set_write_timeout(std::chrono::duration_cast<std::chrono::microseconds>(secs));
    return cli;
}

// Non-2xx responses other than policy refusals: 408/429/5xx are retryable,
// anything else is a configuration or request problem.
inline Attempt classify_http_failure(const BackendConfig& cfg, int status, const std::string& body) {
    if (status == 408 || status == 429 || status >= 500)
        return TransientFailure{"HTTP " + std::to_string(status)};
    throw BackendError("backend " + cfg.backend_id + " returned HTTP " + std::to_string(status) + ": " +
                       body.substr(0, 300));
}

}  // namespace detail

/// Adapter for services taking {"prompt", "n", "size": "WxH"} and answering
/// {"data": [{"b64_json": ...}]}.
class OpenAIImagesBackend final : public Backend {
public:
    explicit OpenAIImagesBackend(BackendConfig cfg)
        : cfg_(std::move(cfg)), key_(detail::require_credential(cfg_)), client_(detail::make_client(cfg_)) {}

    std::string id() const override { return cfg_.backend_id; }

    static json request_body(const GenRequest& req, const std::string& model) {
        json body = {{"prompt", req.prompt},
                     {"n", 1},
                     {"size", std::to_string(req.width) + "x" + std::to_string(req.height)},
                     {"response_format", "b64_json"}};
        if (!model.empty()) body["model"] = model;
        return body;
    }

    Attempt generate_once(const GenRequest& req) override {
        req.validate();
        httplib::Headers headers = {{"Authorization", "Bearer " + key_}};
        auto res = client_->Post("/v1/images/generations", headers, request_body(req, cfg_.model).dump(),
                                 "application/json");
        if (!res) return TransientFailure{"transport error: " + httplib::to_string(res.error())};
        json body = json::parse(res->body, nullptr, false);
        if (res->status == 400 && body.is_object() && body.contains("error")) {
            const auto& err = body["error"];
            const auto code = err.value("code", std::string{});
            const auto msg = err.value("message", std::string{});
            if (code == "content_policy_violation" || msg.find("safety system") != std::string::npos)
                return PolicyRejected{msg.empty() ? code : msg};
        }
        if (res->status < 200 || res->status >= 300) return detail::classify_http_failure(cfg_, res->status, res->body);
        if (!body.is_object() || !body.contains("data") || body["data"].empty())
            throw BackendError("backend " + cfg_.backend_id + ": malformed response");
        auto png = base64_decode(body["data"][0].value("b64_json", std::string{}));
        return GeneratedImage{std::vector<std::uint8_t>(png.begin(), png.end()), std::nullopt};
    }

private:
    BackendConfig cfg_;
    std::string key_;
    std::unique_ptr<httplib::Client> client_;
};

/// Adapter for services taking {"text_prompts", "width", "height", "seed"} and
/// answering {"artifacts": [{"base64", "finishReason", "seed"}]}.
class StabilityBackend final : public Backend {
public:
    explicit StabilityBackend(BackendConfig cfg)
        : cfg_(std::move(cfg)), key_(detail::require_credential(cfg_)), client_(detail::make_client(cfg_)) {}

    std::string id() const override { return cfg_.backend_id; }

    static json request_body(const GenRequest& req) {
        json body = {{"text_prompts", json::array({{{"text", req.prompt}}})},
                     {"width", req.width},
                     {"height", req.height},
                     {"samples", 1}};
        if (req.seed) body["seed"] = *req.seed;
        return body;
    }

    Attempt generate_once(const GenRequest& req) override {
        req.validate();
        httplib::Headers headers = {{"Authorization", "Bearer " + key_}, {"Accept", "application/json"}};
        auto res = client_->Post("/v1/generation/" + cfg_.engine + "/text-to-image", headers,
                                 request_body(req).dump(), "application/json");
        if (!res) return TransientFailure{"transport error: " + httplib::to_string(res.error())};
        json body = json::parse(res->body, nullptr, false);
        if (res->status == 400 && body.is_object() && body.value("name", std::string{}) == "invalid_prompts")
            return PolicyRejected{body.value("message", std::string("invalid_prompts"))};
        if (res->status < 200 || res->status >= 300) return detail::classify_http_failure(cfg_, res->status, res->body);
        if (!body.is_object() || !body.contains("artifacts") || body["artifacts"].empty())
            throw BackendError("backend " + cfg_.backend_id + ": malformed response");
        const auto& art = body["artifacts"][0];
        if (art.value("finishReason", std::string{}) == "CONTENT_FILTERED") return PolicyRejected{"CONTENT_FILTERED"};
        auto png = base64_decode(art.value("base64", std::string{}));
        std::optional<std::uint64_t> seed;
        if (art.contains("seed") && art["seed"].is_number_unsigned()) seed = art["seed"].get<std::uint64_t>();
        return GeneratedImage{std::vector<std::uint8_t>(png.begin(), png.end()), seed};
    }

private:
    BackendConfig cfg_;
    std::string key_;
    std::unique_ptr<httplib::Client> client_;
};

/// Credentials are resolved here, so a missing key fails at startup.
inline std::unique_ptr<Backend> make_backend(const BackendConfig& cfg) {
    cfg.validate();
    if (cfg.kind == "mock") return std::make_unique<MockBackend>(cfg);
    if (cfg.kind == "openai") return std::make_unique<OpenAIImagesBackend>(cfg);
    return std::make_unique<StabilityBackend>(cfg);
}

/// Rate-limited request with exponential backoff on transient failures.
/// Policy refusals return immediately; the last transient failure is
/// returned once max_retries is exhausted.
inline Attempt generate(Backend& backend, const GenRequest& req, const BackendConfig& cfg, RateLimiter& limiter,
                        Clock& clock) {
    req.validate();
    for (int attempt = 0;; ++attempt) {
        limiter.acquire();
        Attempt result = backend.generate_once(req);
        if (auto* img = std::get_if<GeneratedImage>(&result)) {
            const Image decoded = decode_image(img->bytes);
            if (decoded.width != req.width || decoded.height != req.height)
                throw BackendError("backend " + cfg.backend_id + " returned " + std::to_string(decoded.width) + "x" +
                                   std::to_string(decoded.height) + ", requested " + std::to_string(req.width) +
                                   "x" + std::to_string(req.height));
            return result;
        }
        if (std::holds_alternative<PolicyRejected>(result) || attempt >= cfg.max_retries) return result;
        clock.sleep_until(clock.now() + cfg.backoff_base * std::pow(2.0, attempt));
    }
}

// ---------------------------------------------------------------------------
// Stage
// ---------------------------------------------------------------------------

struct GenerationOptions {
    fs::path images_dir = "images";
    int size = 512;
    int workers = 1;
    std::optional<std::uint64_t> seed;
};

struct StageReport {
    std::size_t generated = 0;
    std::size_t skipped = 0;
    std::size_t policy_rejected = 0;
    std::size_t failed = 0;
    std::size_t requests = 0;
    double wall_time_s = 0;

    json to_json() const {
        return {{"generated", generated}, {"skipped", skipped}, {"policy_rejected", policy_rejected},
                {"failed", failed},       {"requests", requests}, {"wall_time_s", wall_time_s}};
    }
};

inline std::string image_file_name(const std::string& record_id, int caption, const std::string& backend_id) {
    return record_id + "_c" + std::to_string(caption) + "_" + backend_id + ".png";
}

/// Generates both images for every sanitized record that does not have them
/// yet. Each image hits disk before its reference is journaled, and every
/// journaled update is durable, so an interrupted run can simply be started
/// again without requesting any stored image twice.
inline StageReport run_generation_stage(corpus::ManifestStore& store, Backend& backend, const BackendConfig& cfg,
                                        const GenerationOptions& opts, Clock& clock, std::ostream* log = nullptr) {
    using corpus::Stage;
    cfg.validate();
    if (opts.workers < 1) throw ConfigError("workers must be positive");
    const auto t0 = std::chrono::steady_clock::now();

    StageReport report;
    std::vector<corpus::Record> todo;
    for (const auto& r : store.records()) {
        if (r.rejected()) continue;
        if (r.status < Stage::sanitized)
            throw DataError("record " + r.record_id + " is not sanitized; run the sanitize stage first");
        if (r.status >= Stage::generated)
            ++report.skipped;
        else
            todo.push_back(r);
    }

    RateLimiter limiter(cfg.rate_limit, clock);
    std::mutex mu;  // guards report, log and first_error
    std::exception_ptr first_error;
    std::atomic<std::size_t> next{0};
    std::atomic<bool> stop{false};
    std::atomic<std::size_t> requests{0};

    auto emit = [&](const corpus::Record& r, const char* event, const std::string& detail) {
        if (!log) return;
        *log << json{{"record_id", r.record_id}, {"event", event}, {"detail", detail}}.dump() << '\n';
    };

    auto work_one = [&](corpus::Record r) {
        for (int c = 1; c <= 2; ++c) {
            auto& ref = c == 1 ? r.gen1 : r.gen2;
            if (ref && fs::exists(ref->path)) continue;  // committed by an earlier, interrupted run
            const auto& prompt = c == 1 ? r.caption1_clean : r.caption2_clean;
            if (!prompt) throw DataError("record " + r.record_id + " has no sanitized caption " + std::to_string(c));
            GenRequest req{*prompt, opts.size, opts.size, opts.seed, cfg.backend_id,
                           r.record_id + "/c" + std::to_string(c)};
            requests.fetch_add(1);
            Attempt a = generate(backend, req, cfg, limiter, clock);
            if (auto* p = std::get_if<PolicyRejected>(&a)) {
                corpus::advance(r, Stage::rejected, "policy: " + p->reason);
                store.update(r);
                std::lock_guard lk(mu);
                ++report.policy_rejected;
                emit(r, "policy_rejected", p->reason);
                return;
            }
            if (auto* t = std::get_if<TransientFailure>(&a)) {
                std::lock_guard lk(mu);
                ++report.failed;
                emit(r, "failed", t->reason);
                return;
            }
            auto& img = std::get<GeneratedImage>(a);
            const auto path = opts.images_dir / image_file_name(r.record_id, c, cfg.backend_id);
            write_file_atomic(path, img.bytes);
            ref = corpus::GeneratedImageRef{path.string(), cfg.backend_id, img.seed, opts.size, opts.size, utc_timestamp()};
            store.update(r);  // each image is durable on its own
        }
        corpus::advance(r, Stage::generated);
        store.update(r);
        std::lock_guard lk(mu);
        ++report.generated;
        emit(r, "generated", "");
    };

    auto worker = [&] {
        while (!stop.load()) {
            const auto i = next.fetch_add(1);
            if (i >= todo.size()) return;
            try {
                work_one(todo[i]);
            } catch (const BackendError& e) {
                std::lock_guard lk(mu);
                ++report.failed;
                emit(todo[i], "failed", e.what());
            } catch (...) {
                std::lock_guard lk(mu);
                if (!first_error) first_error = std::current_exception();
                stop.store(true);
            }
        }
    };

    {
        std::vector<std::jthread> pool;
        const auto n = std::min<std::size_t>(static_cast<std::size_t>(opts.workers), std::max<std::size_t>(todo.size(), 1));
        for (std::size_t i = 0; i < n; ++i) pool.emplace_back(worker);
    }
    if (first_error) std::rethrow_exception(first_error);
    store.checkpoint();
    report.requests = requests.load();
    report.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return report;
}

}  // namespace ooc::gen
