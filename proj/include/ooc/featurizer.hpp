#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <memory>
#include <mutex>
#include <set>
#include <string>
#include <tuple>
#include <vector>

#include <nlohmann/json.hpp>
#include <opencv2/dnn.hpp>

#include "ooc/common.hpp"
#include "ooc/embedding.hpp"
#include "ooc/image.hpp"
#include "ooc/similarity.hpp"

namespace ooc::features {

using json = nlohmann::json;
namespace fs = std::filesystem;

struct BoundingBox {
    int x = 0, y = 0, w = 1, h = 1;
    float confidence = 0;
    int class_id = 0;

    friend bool operator==(const BoundingBox&, const BoundingBox&) = default;
};

inline const std::set<std::string>& known_encoders() {
    static const std::set<std::string> ids = {"clip-vit-l-14", "clip-vit-b-32", "resnet18",     "resnet50",
                                              "resnext50",     "densenet121",   "densenet169",  "efficientnet-b5",
                                              "mock",          "mock-rgb"};
    return ids;
}

inline const std::set<std::string>& known_detectors() {
    static const std::set<std::string> ids = {"mask-rcnn", "yolo-v5", "yolo-v7", "mock", "none"};
    return ids;
}

struct FeaturizerConfig {
    std::string encoder_id = "mock";
    std::string detector_id = "none";
    double confidence_min = 0.5;
    int max_objects = 10;
    bool normalize = true;
    double whole_weight = 1.0;  // weight of the whole-image vector relative to one crop

    bool uses_detector() const { return detector_id != "none"; }

    json to_json() const {
        return {{"encoder", encoder_id},     {"detector", detector_id},   {"confidence_min", confidence_min},
                {"max_objects", max_objects}, {"normalize", normalize},    {"whole_weight", whole_weight}};
    }

    static FeaturizerConfig from_json(const json& j) {
        FeaturizerConfig c;
        c.encoder_id = j.value("encoder", c.encoder_id);
        c.detector_id = j.value("detector", c.detector_id);
        c.confidence_min = j.value("confidence_min", c.confidence_min);
        c.max_objects = j.value("max_objects", c.max_objects);
        c.normalize = j.value("normalize", c.normalize);
        c.whole_weight = j.value("whole_weight", c.whole_weight);
        return c;
    }

    /// Digest over every field; used to key cached embeddings.
    std::string digest() const { return hex64(fnv1a(to_json().dump())); }

    void validate() const {
        if (!(confidence_min >= 0 && confidence_min <= 1)) throw ConfigError("confidence_min must be in [0,1]");
        if (max_objects < 1) throw ConfigError("max_objects must be positive");
        if (!(whole_weight > 0) || !std::isfinite(whole_weight)) throw ConfigError("whole_weight must be positive");
    }
};

// ---------------------------------------------------------------------------
// Backends
// ---------------------------------------------------------------------------

class Encoder {
public:
    virtual ~Encoder() = default;
    virtual std::string id() const = 0;
    virtual std::size_t dim() const = 0;
    /// Raw (unnormalized) feature vector. Must be safe to call concurrently.
    virtual std::vector<float> encode(const Image& img) const = 0;
};

class Detector {
public:
    virtual ~Detector() = default;
    virtual std::string id() const = 0;
    /// Unfiltered proposals in image pixel coordinates. Must be safe to call concurrently.
    virtual std::vector<BoundingBox> propose(const Image& img) const = 0;
};

/// 64-bin grayscale intensity histogram, L1- then L2-normalized.
class MockEncoder final : public Encoder {
public:
    static constexpr std::size_t kBins = 64;

    std::string id() const override { return "mock"; }
    std::size_t dim() const override { return kBins; }

    std::vector<float> encode(const Image& img) const override {
        if (img.empty()) throw DataError("mock encoder: empty image");
        const Image gray = to_gray(img);
        std::array<double, kBins> hist{};
        for (auto v : gray.pixels) hist[v / (256 / kBins)] += 1;
        std::vector<float> out(kBins);
        double l2 = 0;
        for (auto& h : hist) {
            h /= static_cast<double>(gray.pixels.size());
            l2 += h * h;
        }
        l2 = std::sqrt(l2);
        for (std::size_t i = 0; i < kBins; ++i) out[i] = static_cast<float>(hist[i] / l2);
        return out;
    }
};

/// 16 bins per RGB channel, concatenated, L1- then L2-normalized.
class MockRgbEncoder final : public Encoder {
public:
    std::string id() const override { return "mock-rgb"; }
    std::size_t dim() const override { return 48; }

    std::vector<float> encode(const Image& img) const override {
        if (img.empty() || img.channels != 3) throw DataError("mock-rgb encoder needs an RGB image");
        std::array<double, 48> hist{};
        for (std::size_t i = 0; i < img.pixels.size(); ++i) hist[(i % 3) * 16 + img.pixels[i] / 16] += 1;
        double l2 = 0;
        for (auto& h : hist) {
            h /= static_cast<double>(img.pixels.size());
            l2 += h * h;
        }
        l2 = std::sqrt(l2);
        std::vector<float> out(48);
        for (std::size_t i = 0; i < 48; ++i) out[i] = static_cast<float>(hist[i] / l2);
        return out;
    }
};

/// Fixed 4x4 grid proposal. Each cell with non-zero grayscale spread becomes
/// a box with confidence sd / (sd + 32), which is always below 1.
class MockDetector final : public Detector {
public:
    static constexpr int kGrid = 4;

    std::string id() const override { return "mock"; }

    std::vector<BoundingBox> propose(const Image& img) const override {
        const Image gray = to_gray(img);
        std::vector<BoundingBox> out;
        const int cw = gray.width / kGrid, ch = gray.height / kGrid;
        if (cw < 1 || ch < 1) return out;
        for (int gy = 0; gy < kGrid; ++gy)
            for (int gx = 0; gx < kGrid; ++gx) {
                const int x0 = gx * cw, y0 = gy * ch;
                const int w = gx == kGrid - 1 ? gray.width - x0 : cw;
                const int h = gy == kGrid - 1 ? gray.height - y0 : ch;
                double s = 0, ss = 0;
                for (int y = y0; y < y0 + h; ++y)
                    for (int x = x0; x < x0 + w; ++x) {
                        const double v = gray.at(x, y);
                        s += v;
                        ss += v * v;
                    }
                const double n = static_cast<double>(w) * h;
                const double sd = std::sqrt(std::max(0.0, ss / n - (s / n) * (s / n)));
                if (sd <= 0) continue;
                out.push_back({x0, y0, w, h, static_cast<float>(sd / (sd + 32.0)), gy * kGrid + gx});
            }
        return out;
    }
};

/// Preprocessing constants read from `models/<id>.json` next to the graph.
struct ModelSidecar {
    int input_size = 224;
    std::array<float, 3> mean = {0.f, 0.f, 0.f};
    std::array<float, 3> stddev = {1.f, 1.f, 1.f};
    std::size_t output_dim = 0;
    std::string output_format;  // detectors: "xyxy_score_class"

    static ModelSidecar load(const fs::path& path) {
        std::ifstream in(path);
        if (!in) throw ConfigError("model sidecar not found: " + path.string());
        json j;
        try {
            j = json::parse(in);
        } catch (const json::exception& e) {
            throw ConfigError("bad model sidecar " + path.string() + ": " + e.what());
        }
        ModelSidecar s;
        s.input_size = j.value("input_size", s.input_size);
        if (j.contains("mean")) s.mean = j["mean"].get<std::array<float, 3>>();
        if (j.contains("std")) s.stddev = j["std"].get<std::array<float, 3>>();
        s.output_dim = j.value("output_dim", std::size_t{0});
        s.output_format = j.value("output_format", "");
        if (s.input_size < 1) throw ConfigError("sidecar input_size must be positive: " + path.string());
        return s;
    }
};

/// Letterboxed, per-channel standardized NCHW float blob (RGB order).
inline cv::Mat preprocess_blob(const Image& img, const ModelSidecar& sc) {
    const Image sq = letterbox(img, sc.input_size);
    const int n = sc.input_size;
    const int sizes[] = {1, 3, n, n};
    cv::Mat blob(4, sizes, CV_32F);
    float* dst = blob.ptr<float>();
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < n; ++y)
            for (int x = 0; x < n; ++x) {
                const float v = sq.at(x, y, sq.channels == 3 ? c : 0) / 255.0f;
                dst[(static_cast<std::size_t>(c) * n + y) * n + x] = (v - sc.mean[c]) / sc.stddev[c];
            }
    return blob;
}

inline fs::path require_graph(const fs::path& models_dir, const std::string& id) {
    auto graph = models_dir / (id + ".onnx");
    if (!fs::exists(graph))
        throw ConfigError("model graph " + graph.string() + " not found; export '" + id +
                          "' into the models directory first (model export step)");
    return graph;
}

class OnnxEncoder final : public Encoder {
public:
    OnnxEncoder(const fs::path& models_dir, std::string id) : id_(std::move(id)) {
        auto graph = require_graph(models_dir, id_);
        sidecar_ = ModelSidecar::load(models_dir / (id_ + ".json"));
        try {
            net_ = cv::dnn::readNetFromONNX(graph.string());
        } catch (const cv::Exception& e) {
            throw ConfigError("failed to load encoder graph " + graph.string() + ": " + e.what());
        }
        if (sidecar_.output_dim == 0) sidecar_.output_dim = encode(Image(8, 8, 3)).size();
    }

    std::string id() const override { return id_; }
    std::size_t dim() const override { return sidecar_.output_dim; }
    const ModelSidecar& sidecar() const { return sidecar_; }

    std::vector<float> encode(const Image& img) const override {
        cv::Mat blob = preprocess_blob(img, sidecar_);
        cv::Mat out;
        {
            std::lock_guard lk(mu_);  // cv::dnn::Net::forward mutates internal buffers
            net_.setInput(blob);
            out = net_.forward().clone();
        }
        std::vector<float> v(out.ptr<float>(), out.ptr<float>() + out.total());
        if (sidecar_.output_dim && v.size() != sidecar_.output_dim)
            throw DataError("encoder " + id_ + " produced " + std::to_string(v.size()) + " values, sidecar says " +
                            std::to_string(sidecar_.output_dim));
        return v;
    }

private:
    std::string id_;
    ModelSidecar sidecar_;
    mutable cv::dnn::Net net_;
    mutable std::mutex mu_;
};

/// Detector graphs are exported with box decoding and NMS baked in and emit
/// rows of (x1, y1, x2, y2, score, class) in letterboxed input coordinates.
class OnnxDetector final : public Detector {
public:
    OnnxDetector(const fs::path& models_dir, std::string id) : id_(std::move(id)) {
        auto graph = require_graph(models_dir, id_);
        sidecar_ = ModelSidecar::load(models_dir / (id_ + ".json"));
        if (sidecar_.output_format != "xyxy_score_class")
            throw ConfigError("detector " + id_ + ": unsupported output_format '" + sidecar_.output_format + "'");
        try {
            net_ = cv::dnn::readNetFromONNX(graph.string());
        } catch (const cv::Exception& e) {
            throw ConfigError("failed to load detector graph " + graph.string() + ": " + e.what());
        }
    }

    std::string id() const override { return id_; }

    std::vector<BoundingBox> propose(const Image& img) const override {
        cv::Mat blob = preprocess_blob(img, sidecar_);
        cv::Mat out;
        {
            std::lock_guard lk(mu_);
            net_.setInput(blob);
            out = net_.forward().clone();
        }
        if (out.total() % 6 != 0) throw DataError("detector " + id_ + ": output is not a multiple of 6");
        const float* p = out.ptr<float>();
        const double scale = static_cast<double>(sidecar_.input_size) / std::max(img.width, img.height);
        const double pad_x = (sidecar_.input_size - std::lround(img.width * scale)) / 2;
        const double pad_y = (sidecar_.input_size - std::lround(img.height * scale)) / 2;
        std::vector<BoundingBox> boxes;
        for (std::size_t i = 0; i < out.total() / 6; ++i, p += 6) {
            auto to_x = [&](float v) { return std::clamp((v - pad_x) / scale, 0.0, static_cast<double>(img.width)); };
            auto to_y = [&](float v) { return std::clamp((v - pad_y) / scale, 0.0, static_cast<double>(img.height)); };
            const int x1 = static_cast<int>(std::floor(to_x(p[0]))), y1 = static_cast<int>(std::floor(to_y(p[1])));
            const int x2 = static_cast<int>(std::ceil(to_x(p[2]))), y2 = static_cast<int>(std::ceil(to_y(p[3])));
            BoundingBox b;
            b.x = std::min(x1, img.width - 1);
            b.y = std::min(y1, img.height - 1);
            b.w = std::max(1, std::min(x2, img.width) - b.x);
            b.h = std::max(1, std::min(y2, img.height) - b.y);
            b.confidence = std::clamp(p[4], 0.f, 1.f);
            b.class_id = static_cast<int>(p[5]);
            boxes.push_back(b);
        }
        return boxes;
    }

private:
    std::string id_;
    ModelSidecar sidecar_;
    mutable cv::dnn::Net net_;
    mutable std::mutex mu_;
};

/// Built-in ids plus anything with an exported graph in `models_dir`.
inline bool encoder_known(const std::string& id, const fs::path& models_dir) {
    return known_encoders().contains(id) || fs::exists(models_dir / (id + ".onnx"));
}

inline bool detector_known(const std::string& id, const fs::path& models_dir) {
    return known_detectors().contains(id) || fs::exists(models_dir / (id + ".onnx"));
}

inline std::shared_ptr<const Encoder> make_encoder(const std::string& id, const fs::path& models_dir) {
    if (id == "mock") return std::make_shared<MockEncoder>();
    if (id == "mock-rgb") return std::make_shared<MockRgbEncoder>();
    if (!encoder_known(id, models_dir))
        throw ConfigError("unknown encoder '" + id + "'");
    return std::make_shared<OnnxEncoder>(models_dir, id);
}

inline std::shared_ptr<const Detector> make_detector(const std::string& id, const fs::path& models_dir) {
    if (id == "none") return nullptr;
    if (id == "mock") return std::make_shared<MockDetector>();
    if (!detector_known(id, models_dir))
        throw ConfigError("unknown detector '" + id + "'");
    return std::make_shared<OnnxDetector>(models_dir, id);
}

// ---------------------------------------------------------------------------
// Featurizer
// ---------------------------------------------------------------------------

class Featurizer {
public:
    Featurizer(FeaturizerConfig cfg, std::shared_ptr<const Encoder> encoder,
               std::shared_ptr<const Detector> detector = nullptr)
        : cfg_(std::move(cfg)), encoder_(std::move(encoder)), detector_(std::move(detector)) {
        cfg_.validate();
        if (!encoder_) throw ConfigError("featurizer needs an encoder");
        if (cfg_.uses_detector() && !detector_) throw ConfigError("detector '" + cfg_.detector_id + "' not loaded");
        digest_ = cfg_.digest();
    }

    static Featurizer load(const FeaturizerConfig& cfg, const fs::path& models_dir) {
        cfg.validate();
        return Featurizer(cfg, make_encoder(cfg.encoder_id, models_dir), make_detector(cfg.detector_id, models_dir));
    }

    const FeaturizerConfig& config() const noexcept { return cfg_; }
    const std::string& digest() const noexcept { return digest_; }
    std::size_t dim() const { return encoder_->dim(); }

    EmbeddingVector embed_whole(const Image& img) const {
        auto v = encode_checked(img);
        if (cfg_.normalize) l2_normalize(v);
        return {std::move(v), digest_};
    }

    /// Boxes with confidence >= confidence_min, highest first, at most max_objects.
    std::vector<BoundingBox> detect(const Image& img) const {
        if (!detector_) throw ConfigError("no detector configured");
        auto boxes = detector_->propose(img);
        std::erase_if(boxes, [&](const BoundingBox& b) { return b.confidence < cfg_.confidence_min; });
        std::stable_sort(boxes.begin(), boxes.end(), [](const BoundingBox& a, const BoundingBox& b) {
            if (a.confidence != b.confidence) return a.confidence > b.confidence;
            return std::tie(a.y, a.x, a.h, a.w, a.class_id) < std::tie(b.y, b.x, b.h, b.w, b.class_id);
        });
        if (boxes.size() > static_cast<std::size_t>(cfg_.max_objects)) boxes.resize(static_cast<std::size_t>(cfg_.max_objects));
        return boxes;
    }

    /// Crops every box, embeds crops and the whole image, averages the
    /// L2-normalized vectors (whole image weighted by whole_weight) and
    /// re-normalizes. Without boxes this is exactly embed_whole.
    EmbeddingVector embed_combined(const Image& img, std::vector<BoundingBox> boxes) const {
        if (boxes.empty()) return embed_whole(img);
        // Canonical order so the floating-point sum does not depend on box order.
        std::sort(boxes.begin(), boxes.end(), [](const BoundingBox& a, const BoundingBox& b) {
            return std::tie(a.x, a.y, a.w, a.h, a.class_id, a.confidence) <
                   std::tie(b.x, b.y, b.w, b.h, b.class_id, b.confidence);
        });
        auto whole = encode_checked(img);
        l2_normalize(whole);
        std::vector<double> acc(whole.size());
        for (std::size_t i = 0; i < whole.size(); ++i) acc[i] = cfg_.whole_weight * whole[i];
        for (const auto& b : boxes) {
            auto v = encode_checked(crop(img, b.x, b.y, b.w, b.h));
            l2_normalize(v);
            for (std::size_t i = 0; i < v.size(); ++i) acc[i] += v[i];
        }
        const double total = cfg_.whole_weight + static_cast<double>(boxes.size());
        std::vector<float> out(acc.size());
        for (std::size_t i = 0; i < acc.size(); ++i) out[i] = static_cast<float>(acc[i] / total);
        l2_normalize(out);
        return {std::move(out), digest_};
    }

    EmbeddingVector embed_combined(const Image& img) const {
        if (!cfg_.uses_detector()) throw ConfigError("embed_combined requires a detector");
        return embed_combined(img, detect(img));
    }

    /// Dispatches on the configured mode.
    EmbeddingVector embed(const Image& img) const {
        return cfg_.uses_detector() ? embed_combined(img) : embed_whole(img);
    }

private:
    std::vector<float> encode_checked(const Image& img) const {
        auto v = encoder_->encode(img);
        if (v.size() != encoder_->dim())
            throw DataError("encoder " + encoder_->id() + " returned dim " + std::to_string(v.size()));
        require_finite(v);
        return v;
    }

    FeaturizerConfig cfg_;
    std::shared_ptr<const Encoder> encoder_;
    std::shared_ptr<const Detector> detector_;
    std::string digest_;
};

/// Cosine between this build's embedding of an exported model's bundled
/// test image and the reference embedding the exporter wrote alongside it
/// (`models/<id>.reference.json`: {"image": ..., "embedding": [...]}).
inline double reference_parity(const fs::path& models_dir, const std::string& encoder_id) {
    const auto ref_path = models_dir / (encoder_id + ".reference.json");
    std::ifstream in(ref_path);
    if (!in) throw ConfigError("reference embedding not found: " + ref_path.string());
    const json j = json::parse(in);
    fs::path image = j.at("image").get<std::string>();
    if (image.is_relative()) image = models_dir / image;
    const auto reference = j.at("embedding").get<std::vector<float>>();
    FeaturizerConfig cfg;
    cfg.encoder_id = encoder_id;
    cfg.normalize = false;
    const auto f = Featurizer::load(cfg, models_dir);
    const auto ours = f.embed_whole(read_image(image));
    return similarity::cosine(std::span<const float>(ours.values), std::span<const float>(reference)).value;
}

}  // namespace ooc::features
