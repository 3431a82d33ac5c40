#pragma once

#include <atomic>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "ooc/common.hpp"
#include "ooc/corpus.hpp"
#include "ooc/decision.hpp"
#include "ooc/featurizer.hpp"
#include "ooc/genclient.hpp"
#include "ooc/image.hpp"
#include "ooc/sanitizer.hpp"
#include "ooc/similarity.hpp"

namespace ooc::pipeline {

using json = nlohmann::json;
namespace fs = std::filesystem;
using corpus::Stage;

enum class SimilarityKind { cosine, ssim, mse };

inline SimilarityKind similarity_from_string(std::string_view s) {
    if (s == "cosine") return SimilarityKind::cosine;
    if (s == "ssim") return SimilarityKind::ssim;
    if (s == "mse" || s == "mse_sim") return SimilarityKind::mse;
    throw ConfigError("unknown similarity '" + std::string(s) + "'");
}

inline const char* to_string(SimilarityKind k) {
    switch (k) {
        case SimilarityKind::cosine: return "cosine";
        case SimilarityKind::ssim: return "ssim";
        case SimilarityKind::mse: return "mse";
    }
    return "?";
}

/// Everything a CLI run needs. Relative paths resolve against the config file's directory.
struct RunConfig {
    fs::path manifest = "work/manifest.jsonl";
    fs::path images_dir = "work/images";
    fs::path models_dir = "models";
    fs::path output_dir = "work/out";
    std::vector<gen::BackendConfig> backends = {gen::BackendConfig{}};
    std::string generation_backend = "mock";
    int image_size = 512;
    std::optional<std::uint64_t> generation_seed;
    json sanitizer = json::object();
    std::string tagger = "null";  // null | gazetteer | heuristic
    fs::path gazetteer;
    features::FeaturizerConfig featurizer;
    decision::DecisionConfig decision;
    SimilarityKind similarity = SimilarityKind::cosine;
    int workers = 4;

    static RunConfig from_json(const json& j, const fs::path& base_dir = {}) {
        RunConfig c;
        auto path_of = [&](const char* key, const fs::path& def) {
            fs::path p = j.contains(key) ? fs::path(j[key].get<std::string>()) : def;
            return p.is_relative() && !base_dir.empty() ? base_dir / p : p;
        };
        try {
            c.manifest = path_of("manifest", c.manifest);
            c.images_dir = path_of("images_dir", c.images_dir);
            c.models_dir = path_of("models_dir", c.models_dir);
            c.output_dir = path_of("output_dir", c.output_dir);
            if (j.contains("backends")) {
                c.backends.clear();
                for (const auto& b : j["backends"]) {
                    auto bc = gen::BackendConfig::from_json(b);
                    if (!bc.call_log.empty() && fs::path(bc.call_log).is_relative() && !base_dir.empty())
                        bc.call_log = (base_dir / bc.call_log).string();
                    c.backends.push_back(std::move(bc));
                }
            }
            if (j.contains("generation")) {
                const auto& g = j["generation"];
                c.generation_backend = g.value("backend", c.generation_backend);
                c.image_size = g.value("size", c.image_size);
                if (g.contains("seed") && !g["seed"].is_null()) c.generation_seed = g["seed"].get<std::uint64_t>();
            }
            if (j.contains("sanitizer")) {
                c.sanitizer = j["sanitizer"];
                c.tagger = c.sanitizer.value("tagger", c.tagger);
                if (c.sanitizer.contains("gazetteer_file"))
                    c.gazetteer = path_of_inner(c.sanitizer["gazetteer_file"].get<std::string>(), base_dir);
                if (c.sanitizer.contains("blocked_words_file"))
                    c.sanitizer["blocked_words_file"] =
                        path_of_inner(c.sanitizer["blocked_words_file"].get<std::string>(), base_dir).string();
            }
            if (j.contains("featurizer")) c.featurizer = features::FeaturizerConfig::from_json(j["featurizer"]);
            if (j.contains("decision")) {
                const auto& d = j["decision"];
                c.decision.mode = decision::mode_from_string(d.value("mode", "orig_vs_gen"));
                c.decision.threshold = d.value("threshold", 0.50);
                if (d.contains("gen_threshold") && !d["gen_threshold"].is_null())
                    c.decision.gen_fixed_threshold = d["gen_threshold"].get<double>();
            }
            c.similarity = similarity_from_string(j.value("similarity", "cosine"));
            c.workers = j.value("workers", c.workers);
        } catch (const json::exception& e) {
            throw ConfigError(std::string("bad run config: ") + e.what());
        }
        c.validate();
        return c;
    }

    static RunConfig load(const fs::path& path) {
        std::ifstream in(path);
        if (!in) throw ConfigError("config file not found: " + path.string());
        json j;
        try {
            j = json::parse(in);
        } catch (const json::exception& e) {
            throw ConfigError("config " + path.string() + ": " + e.what());
        }
        return from_json(j, fs::absolute(path).parent_path());
    }

    void validate() const {
        if (workers < 1) throw ConfigError("workers must be positive");
        if (tagger != "null" && tagger != "gazetteer" && tagger != "heuristic")
            throw ConfigError("unknown tagger '" + tagger + "'");
        if (tagger == "gazetteer" && gazetteer.empty()) throw ConfigError("gazetteer tagger needs gazetteer_file");
        for (const auto& b : backends) b.validate();
        backend(generation_backend);
        featurizer.validate();
        if (!features::encoder_known(featurizer.encoder_id, models_dir))
            throw ConfigError("unknown encoder '" + featurizer.encoder_id + "'");
        if (!features::detector_known(featurizer.detector_id, models_dir))
            throw ConfigError("unknown detector '" + featurizer.detector_id + "'");
        decision.validate();
        GenerationCheck{image_size}.check();
        sanitizer_config();
    }

    sanitizer::SanitizerConfig sanitizer_config() const {
        try {
            return sanitizer::config_from_json(sanitizer);
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError(std::string("bad sanitizer config: ") + e.what());
        }
    }

    const gen::BackendConfig& backend(const std::string& id) const {
        for (const auto& b : backends)
            if (b.backend_id == id) return b;
        throw ConfigError("backend '" + id + "' is not configured");
    }

    /// Effective configuration (after flag overrides), as recorded in run descriptors.
    json to_json() const {
        json bs = json::array();
        for (const auto& b : backends)
            bs.push_back({{"backend_id", b.backend_id}, {"kind", b.kind}, {"endpoint", b.endpoint},
                          {"credential_env", b.credential_env}, {"rate_limit", b.rate_limit},
                          {"max_retries", b.max_retries}, {"backoff_base", b.backoff_base}, {"timeout", b.timeout}});
        json d = {{"mode", decision::to_string(decision.mode)}, {"threshold", decision.threshold},
                  {"tie_rule", decision::kTieRule}};
        d["gen_threshold"] = decision.gen_fixed_threshold ? json(*decision.gen_fixed_threshold) : json("median");
        json g = {{"backend", generation_backend}, {"size", image_size}};
        g["seed"] = generation_seed ? json(*generation_seed) : json(nullptr);
        return {{"manifest", manifest.string()},   {"images_dir", images_dir.string()},
                {"models_dir", models_dir.string()}, {"output_dir", output_dir.string()},
                {"backends", bs},                  {"generation", g},
                {"sanitizer", sanitizer},          {"featurizer", featurizer.to_json()},
                {"decision", d},                   {"similarity", to_string(similarity)},
                {"workers", workers}};
    }

    std::string digest() const { return hex64(fnv1a(to_json().dump())); }

private:
    struct GenerationCheck {
        int size;
        void check() const {
            if (size != 256 && size != 512 && size != 1024) throw ConfigError("image size must be 256, 512 or 1024");
        }
    };

    static fs::path path_of_inner(const std::string& p, const fs::path& base_dir) {
        fs::path out = p;
        return out.is_relative() && !base_dir.empty() ? base_dir / out : out;
    }
};

inline std::unique_ptr<sanitizer::Tagger> make_tagger(const RunConfig& cfg, const sanitizer::SanitizerConfig& scfg) {
    if (cfg.tagger == "gazetteer")
        return std::make_unique<sanitizer::GazetteerTagger>(
            sanitizer::GazetteerTagger::from_file(cfg.gazetteer, scfg.replacement_words()));
    if (cfg.tagger == "heuristic") return std::make_unique<sanitizer::CapitalizationTagger>(scfg.replacement_words());
    return std::make_unique<sanitizer::NullTagger>();
}

// ---------------------------------------------------------------------------
// Sanitize
// ---------------------------------------------------------------------------

struct SanitizeReport {
    std::size_t sanitized = 0, skipped = 0, rejected = 0;
    json to_json() const { return {{"sanitized", sanitized}, {"skipped", skipped}, {"rejected", rejected}}; }
};

inline SanitizeReport run_sanitize_stage(corpus::ManifestStore& store, const sanitizer::Tagger& tagger,
                                         const sanitizer::SanitizerConfig& cfg) {
    SanitizeReport rep;
    for (auto r : store.records()) {
        if (r.rejected() || r.status >= Stage::sanitized) {
            ++rep.skipped;
            continue;
        }
        auto c1 = sanitizer::sanitize_caption(r.caption1_raw, tagger, cfg, r.record_id);
        auto c2 = sanitizer::sanitize_caption(r.caption2_raw, tagger, cfg, r.record_id);
        r.caption1_clean = c1.text;
        r.caption2_clean = c2.text;
        if (c1.rejected || c2.rejected) {
            const auto reason = c1.rejected ? "caption1: " + c1.rejected->reason() : "caption2: " + c2.rejected->reason();
            corpus::advance(r, Stage::rejected, reason);
            ++rep.rejected;
        } else {
            corpus::advance(r, Stage::sanitized);
            ++rep.sanitized;
        }
        store.update(r);
    }
    store.checkpoint();
    return rep;
}

// ---------------------------------------------------------------------------
// Embed
// ---------------------------------------------------------------------------

inline fs::path cache_path(const fs::path& output_dir, const features::Featurizer& f) {
    return output_dir / "embeddings" / (f.digest() + ".emb");
}

/// Embedding of the image at `path`, served from the cache when present.
inline EmbeddingVector cached_embedding(const fs::path& path, const features::Featurizer& f,
                                        corpus::EmbeddingCache& cache) {
    const auto bytes = read_file_bytes(path);
    const auto key = corpus::embedding_key(bytes, f.digest());
    if (auto hit = cache.get(key)) return {std::move(*hit), f.digest()};
    auto v = f.embed(decode_image(bytes));
    cache.put(key, v.values);
    return v;
}

inline std::optional<EmbeddingVector> lookup_embedding(const fs::path& path, const features::Featurizer& f,
                                                       const corpus::EmbeddingCache& cache) {
    const auto key = corpus::embedding_key(read_file_bytes(path), f.digest());
    if (auto hit = cache.get(key)) return EmbeddingVector{std::move(*hit), f.digest()};
    return std::nullopt;
}

struct EmbedReport {
    std::size_t embedded = 0, skipped = 0, failed = 0;
    json to_json() const { return {{"embedded", embedded}, {"skipped", skipped}, {"failed", failed}}; }
};

inline std::array<fs::path, 3> record_images(const corpus::Record& r) {
    return {fs::path(r.original_image), fs::path(r.gen1->path), fs::path(r.gen2->path)};
}

/// Embeds the original and both generated images of every generated record
/// into the cache for this featurizer config.
inline EmbedReport run_embed_stage(corpus::ManifestStore& store, const features::Featurizer& f,
                                   corpus::EmbeddingCache& cache, int workers) {
    std::vector<corpus::Record> todo;
    EmbedReport rep;
    for (const auto& r : store.records()) {
        if (r.rejected()) continue;
        if (r.status < Stage::generated)
            throw DataError("record " + r.record_id + " has no generated images; run the generate stage first");
        todo.push_back(r);
    }
    std::atomic<std::size_t> next{0};
    std::mutex mu;
    std::exception_ptr err;
    auto worker = [&] {
        for (;;) {
            const auto i = next.fetch_add(1);
            if (i >= todo.size()) return;
            auto r = todo[i];
            try {
                bool all_cached = true;
                for (const auto& p : record_images(r)) all_cached = all_cached && lookup_embedding(p, f, cache);
                if (!all_cached)
                    for (const auto& p : record_images(r)) cached_embedding(p, f, cache);
                bool advanced = false;
                if (r.status < Stage::embedded) {
                    corpus::advance(r, Stage::embedded);
                    store.update(r);
                    advanced = true;
                }
                std::lock_guard lk(mu);
                (all_cached && !advanced) ? ++rep.skipped : ++rep.embedded;
            } catch (const DataError&) {
                std::lock_guard lk(mu);
                if (!err) err = std::current_exception();
                ++rep.failed;
            } catch (...) {
                std::lock_guard lk(mu);
                if (!err) err = std::current_exception();
                ++rep.failed;
            }
        }
    };
    {
        std::vector<std::jthread> pool;
        for (int i = 0; i < std::max(1, workers); ++i) pool.emplace_back(worker);
    }
    store.checkpoint();
    if (err) std::rethrow_exception(err);
    return rep;
}

// ---------------------------------------------------------------------------
// Predict
// ---------------------------------------------------------------------------

inline Image load_resized(const fs::path& path, int w, int h) {
    Image img = read_image(path);
    if (img.width == w && img.height == h) return img;
    cv::Mat out;
    cv::resize(to_mat(img), out, cv::Size(w, h), 0, 0, cv::INTER_LINEAR);
    return from_mat(out);
}

/// Pixel baselines compare at the generated image's size.
inline double pixel_similarity(SimilarityKind kind, const fs::path& a, const fs::path& b) {
    const Image y = read_image(b);
    const Image x = load_resized(a, y.width, y.height);
    return kind == SimilarityKind::ssim ? similarity::ssim(x, y).value : similarity::mse_sim(x, y).value;
}

struct PairScores {
    std::string record_id;
    double sim1 = 0, sim2 = 0, sim_gg = 0;
};

/// Similarity scores for records that reached `required`.
/// Cosine scores need cached embeddings; missing ones name the embed stage.
inline std::vector<PairScores> score_records(std::span<const corpus::Record> records, SimilarityKind kind,
                                             const features::Featurizer* f, const corpus::EmbeddingCache* cache) {
    std::vector<PairScores> out;
    for (const auto& r : records) {
        if (r.rejected()) continue;
        const Stage required = kind == SimilarityKind::cosine ? Stage::embedded : Stage::generated;
        if (r.status < required)
            throw DataError("record " + r.record_id + " is " + corpus::to_string(r.status) + "; run the " +
                            (r.status < Stage::sanitized   ? "sanitize"
                             : r.status < Stage::generated ? "generate"
                                                           : "embed") +
                            " stage first");
        const auto imgs = record_images(r);
        PairScores s{r.record_id};
        if (kind == SimilarityKind::cosine) {
            std::array<EmbeddingVector, 3> v;
            for (std::size_t i = 0; i < 3; ++i) {
                auto e = lookup_embedding(imgs[i], *f, *cache);
                if (!e)
                    throw DataError("no embedding for " + imgs[i].string() + " under featurizer " + f->digest() +
                                    "; run the embed stage first");
                v[i] = std::move(*e);
            }
            s.sim1 = similarity::cosine(v[0], v[1]).value;
            s.sim2 = similarity::cosine(v[0], v[2]).value;
            s.sim_gg = similarity::cosine(v[1], v[2]).value;
        } else {
            s.sim1 = pixel_similarity(kind, imgs[0], imgs[1]);
            s.sim2 = pixel_similarity(kind, imgs[0], imgs[2]);
            s.sim_gg = pixel_similarity(kind, imgs[1], imgs[2]);
        }
        out.push_back(std::move(s));
    }
    return out;
}

inline std::vector<decision::Prediction> decide(std::span<const PairScores> scores, const decision::DecisionConfig& cfg) {
    std::vector<decision::Prediction> preds;
    if (cfg.mode == decision::Mode::orig_vs_gen) {
        for (const auto& s : scores) preds.push_back(decision::predict_orig_gen({s.sim1, s.sim2}, cfg, s.record_id));
    } else {
        std::vector<decision::GenGenInput> in;
        for (const auto& s : scores) in.push_back({s.record_id, s.sim_gg});
        preds = decision::predict_gen_gen_run(in, cfg);
    }
    return preds;
}

inline std::vector<decision::Prediction> run_predict_stage(corpus::ManifestStore& store, SimilarityKind kind,
                                                           const features::Featurizer* f,
                                                           const corpus::EmbeddingCache* cache,
                                                           const decision::DecisionConfig& cfg) {
    const auto records = store.records();
    const auto scores = score_records(records, kind, f, cache);
    auto preds = decide(scores, cfg);
    for (auto r : records) {
        if (r.rejected() || r.status >= Stage::predicted) continue;
        corpus::advance(r, Stage::predicted);
        store.update(r);
    }
    store.checkpoint();
    return preds;
}

// ---------------------------------------------------------------------------
// Synthetic corpus
// ---------------------------------------------------------------------------

struct SyntheticCorpusOptions {
    std::size_t records = 20;
    std::uint64_t seed = 7;
    int image_size = 512;
    bool with_blocked_record = false;
};

/// Builds a small labeled corpus for the mock backend: originals rendered
/// from each record's scene words, captions with proper names (for the
/// gazetteer written next to the manifest), and gold labels that follow
/// caption overlap: identical or overlapping word sets are NOOC, disjoint
/// scenes are OOC.
inline std::vector<corpus::Record> make_synthetic_corpus(const fs::path& manifest, const fs::path& images_dir,
                                                         const SyntheticCorpusOptions& opts) {
    static const std::vector<std::string> names = {"Obama", "Macron", "Merkel", "Trudeau",
                                                   "Biden", "Modi",   "Ardern", "Lula"};
    static const std::vector<std::array<const char*, 4>> scenes = {
        {"harbor", "boats", "dawn", "fog"},         {"stadium", "crowd", "cheering", "flags"},
        {"forest", "wildfire", "smoke", "trees"},   {"flooded", "street", "rain", "buses"},
        {"parliament", "debate", "chamber", "speech"}, {"market", "fruit", "stalls", "vendors"},
        {"mountain", "snow", "climbers", "summit"}, {"protest", "signs", "square", "banners"},
        {"factory", "workers", "machines", "steel"}, {"beach", "waves", "surfers", "sunset"},
        {"library", "books", "students", "reading"}, {"airport", "planes", "runway", "travelers"},
    };
    static const std::vector<std::array<const char*, 2>> extras = {
        {"bright", "morning"}, {"quiet", "evening"}, {"busy", "afternoon"}, {"cold", "night"}};

    std::mt19937_64 rng(opts.seed);
    auto pick = [&](std::size_t n) { return static_cast<std::size_t>(rng() % n); };
    std::vector<corpus::Record> out;
    fs::create_directories(images_dir);

    for (std::size_t i = 0; i < opts.records; ++i) {
        const auto& scene = scenes[i % scenes.size()];
        const auto& name1 = names[pick(names.size())];
        const auto& name2 = names[pick(names.size())];
        corpus::Record r;
        r.record_id = "syn" + std::to_string(1000 + i);
        const std::string s0 = scene[0], s1 = scene[1], s2 = scene[2], s3 = scene[3];
        r.caption1_raw = name1 + " visited the " + s0 + " " + s1 + " near " + s2 + " " + s3 + ".";
        switch (i % 4) {
            case 0:  // same words, different order and name
                r.caption2_raw = "Near " + s3 + " " + s2 + " the " + s1 + " " + s0 + " visited " + name2 + ".";
                r.gold_label = 0;
                break;
            case 2: {  // overlapping words
                const auto& ex = extras[pick(extras.size())];
                r.caption2_raw = name2 + " visited the " + s0 + " " + s1 + " on a " + ex[0] + " " + ex[1] + ".";
                r.gold_label = 0;
                break;
            }
            default: {  // a different scene altogether
                const auto& other = scenes[(i + 5) % scenes.size()];
                r.caption2_raw = name2 + " toured " + std::string(other[0]) + " " + other[1] + " and " + other[2] +
                                 " " + other[3] + " today.";
                r.gold_label = 1;
                break;
            }
        }
        const auto original = images_dir / ("original_" + r.record_id + ".png");
        const auto scene_prompt = s0 + " " + s1 + " " + s2 + " " + s3 + " visited the near person";
        const auto png = encode_png(gen::render_mock_image(scene_prompt, 1000 + i, opts.image_size));
        write_file_atomic(original, png);
        r.original_image = original.string();
        out.push_back(std::move(r));
    }
    if (opts.with_blocked_record) {
        corpus::Record r;
        r.record_id = "syn" + std::to_string(1000 + opts.records);
        r.caption1_raw = "Obama discussed the COVID-19 lockdown.";
        r.caption2_raw = "Macron visited a hospital.";
        r.gold_label = 1;
        const auto original = images_dir / ("original_" + r.record_id + ".png");
        write_file_atomic(original, encode_png(gen::render_mock_image("hospital ward", 1, opts.image_size)));
        r.original_image = original.string();
        out.push_back(std::move(r));
    }
    corpus::save_manifest(manifest, out);
    std::ofstream gaz(manifest.parent_path() / "gazetteer.txt");
    for (const auto& n : names) gaz << n << '\n';
    return out;
}

}  // namespace ooc::pipeline
