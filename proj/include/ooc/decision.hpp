#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ooc/common.hpp"

namespace ooc::decision {

using json = nlohmann::json;

inline constexpr int kOOC = 1;
inline constexpr int kNOOC = 0;

enum class Mode { orig_vs_gen, gen_vs_gen };

inline const char* to_string(Mode m) { return m == Mode::orig_vs_gen ? "orig_vs_gen" : "gen_vs_gen"; }

inline Mode mode_from_string(std::string_view s) {
    if (s == "orig_vs_gen" || s == "orig-vs-gen") return Mode::orig_vs_gen;
    if (s == "gen_vs_gen" || s == "gen-vs-gen") return Mode::gen_vs_gen;
    throw ConfigError("unknown decision mode '" + std::string(s) + "'");
}

// Equality with the threshold counts as "above".
inline constexpr const char* kTieRule = "score>=threshold is above";

struct SimilarityPair {
    double sim1 = 0;  // original vs image generated from caption 1
    double sim2 = 0;  // original vs image generated from caption 2
};

struct DecisionConfig {
    Mode mode = Mode::orig_vs_gen;
    double threshold = 0.50;
    // gen_vs_gen only: nullopt means calibrate on the run's median.
    std::optional<double> gen_fixed_threshold;

    void validate() const {
        if (!std::isfinite(threshold)) throw ConfigError("decision threshold must be finite");
        if (gen_fixed_threshold && !std::isfinite(*gen_fixed_threshold))
            throw ConfigError("fixed gen-vs-gen threshold must be finite");
    }
};

struct Prediction {
    std::string record_id;
    int label = kNOOC;
    Mode mode = Mode::orig_vs_gen;
    std::optional<double> sim1;
    std::optional<double> sim2;
    std::optional<double> sim_gg;
    double threshold = 0;

    friend bool operator==(const Prediction&, const Prediction&) = default;
};

inline void require_finite(double v, const char* what) {
    if (!std::isfinite(v)) throw DataError(std::string("non-finite ") + what);
}

/// OOC unless both similarities sit at or above the threshold.
inline Prediction predict_orig_gen(const SimilarityPair& p, double threshold, std::string record_id = {}) {
    require_finite(p.sim1, "sim1");
    require_finite(p.sim2, "sim2");
    require_finite(threshold, "threshold");
    const bool below1 = p.sim1 < threshold;
    const bool below2 = p.sim2 < threshold;
    int label;
    if (below1 && below2) {
        label = kOOC;
    } else if (below1 != below2) {
        label = kOOC;
    } else {
        label = kNOOC;
    }
    return {std::move(record_id), label, Mode::orig_vs_gen, p.sim1, p.sim2, std::nullopt, threshold};
}

inline Prediction predict_orig_gen(const SimilarityPair& p, const DecisionConfig& cfg, std::string record_id = {}) {
    if (cfg.mode != Mode::orig_vs_gen) throw ConfigError("predict_orig_gen requires orig_vs_gen mode");
    return predict_orig_gen(p, cfg.threshold, std::move(record_id));
}

/// Median; the midpoint of the two central values for even counts.
inline double calibrate_median(std::span<const double> scores) {
    if (scores.empty()) throw DataError("median of an empty score set");
    for (double s : scores) require_finite(s, "score");
    std::vector<double> v(scores.begin(), scores.end());
    const auto mid = v.size() / 2;
    std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid), v.end());
    const double upper = v[mid];
    if (v.size() % 2 == 1) return upper;
    const double lower = *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid));
    return std::midpoint(lower, upper);
}

inline Prediction predict_gen_gen(double sim_gg, double threshold, std::string record_id = {}) {
    require_finite(sim_gg, "sim_gg");
    require_finite(threshold, "threshold");
    return {std::move(record_id), sim_gg < threshold ? kOOC : kNOOC, Mode::gen_vs_gen, std::nullopt, std::nullopt,
            sim_gg, threshold};
}

struct GenGenInput {
    std::string record_id;
    double sim_gg;
};

/// Applies the gen-vs-gen rule to a whole run, calibrating the median when configured.
inline std::vector<Prediction> predict_gen_gen_run(std::span<const GenGenInput> inputs, const DecisionConfig& cfg) {
    if (cfg.mode != Mode::gen_vs_gen) throw ConfigError("predict_gen_gen_run requires gen_vs_gen mode");
    std::vector<Prediction> out;
    if (inputs.empty()) return out;
    double threshold;
    if (cfg.gen_fixed_threshold) {
        threshold = *cfg.gen_fixed_threshold;
    } else {
        std::vector<double> scores;
        scores.reserve(inputs.size());
        for (const auto& in : inputs) scores.push_back(in.sim_gg);
        threshold = calibrate_median(scores);
    }
    out.reserve(inputs.size());
    for (const auto& in : inputs) out.push_back(predict_gen_gen(in.sim_gg, threshold, in.record_id));
    return out;
}

// ---------------------------------------------------------------------------
// Predictions file: one JSON object per line.
// ---------------------------------------------------------------------------

inline json to_json(const Prediction& p) {
    json j = {{"record_id", p.record_id}, {"label", p.label}, {"mode", to_string(p.mode)}};
    if (p.sim1) j["sim1"] = *p.sim1;
    if (p.sim2) j["sim2"] = *p.sim2;
    if (p.sim_gg) j["sim_gg"] = *p.sim_gg;
    j["threshold"] = p.threshold;
    return j;
}

inline Prediction prediction_from_json(const json& j) {
    Prediction p;
    p.record_id = j.at("record_id").is_string() ? j["record_id"].get<std::string>() : j["record_id"].dump();
    p.label = j.at("label").get<int>();
    if (p.label != kOOC && p.label != kNOOC) throw DataError("label must be 0 or 1");
    p.mode = mode_from_string(j.value("mode", "orig_vs_gen"));
    if (j.contains("sim1")) p.sim1 = j["sim1"].get<double>();
    if (j.contains("sim2")) p.sim2 = j["sim2"].get<double>();
    if (j.contains("sim_gg")) p.sim_gg = j["sim_gg"].get<double>();
    p.threshold = j.value("threshold", 0.0);
    return p;
}

inline void write_predictions(const std::filesystem::path& path, std::span<const Prediction> preds) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    for (const auto& p : preds) out << to_json(p).dump() << '\n';
    if (!out) throw StorageError("failed writing predictions " + path.string());
}

inline std::vector<Prediction> read_predictions(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("predictions file not found: " + path.string());
    std::vector<Prediction> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (trim(line).empty()) continue;
        try {
            out.push_back(prediction_from_json(json::parse(line)));
        } catch (const json::exception& e) {
            throw ParseError(lineno, e.what());
        } catch (const DataError& e) {
            throw ParseError(lineno, e.what());
        }
    }
    return out;
}

}  // namespace ooc::decision
