#pragma once

#include <cmath>
#include <cstdio>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "ooc/common.hpp"
#include "ooc/corpus.hpp"
#include "ooc/decision.hpp"

namespace ooc::evaluation {

using json = nlohmann::json;

/// Binary confusion counts; the positive class is OOC (label 1).
struct ConfusionMatrix {
    std::size_t tp = 0, fp = 0, tn = 0, fn = 0;

    std::size_t n() const noexcept { return tp + fp + tn + fn; }

    void add(int predicted, int gold) {
        if ((predicted != 0 && predicted != 1) || (gold != 0 && gold != 1)) throw DataError("labels must be 0 or 1");
        if (predicted == 1) {
            gold == 1 ? ++tp : ++fp;
        } else {
            gold == 0 ? ++tn : ++fn;
        }
    }

    friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;
};

/// Ratios with a zero denominator are left empty and flagged.
struct MetricsReport {
    ConfusionMatrix cm;
    std::size_t n = 0;
    std::optional<double> accuracy;
    std::optional<double> precision;
    std::optional<double> recall;
    std::optional<double> f1;
    bool zero_denominator = false;
    std::string config;

    friend bool operator==(const MetricsReport&, const MetricsReport&) = default;
};

inline MetricsReport metrics_from_confusion(const ConfusionMatrix& cm, std::string config = {}) {
    MetricsReport r;
    r.cm = cm;
    r.n = cm.n();
    r.config = std::move(config);
    auto ratio = [&](std::size_t num, std::size_t den) -> std::optional<double> {
        if (den == 0) {
            r.zero_denominator = true;
            return std::nullopt;
        }
        return static_cast<double>(num) / static_cast<double>(den);
    };
    r.accuracy = ratio(cm.tp + cm.tn, r.n);
    r.precision = ratio(cm.tp, cm.tp + cm.fp);
    r.recall = ratio(cm.tp, cm.tp + cm.fn);
    if (r.precision && r.recall) {
        const double s = *r.precision + *r.recall;
        if (s > 0) {
            r.f1 = 2 * *r.precision * *r.recall / s;
        } else {
            r.zero_denominator = true;
        }
    }
    return r;
}

/// Position-aligned label sequences.
inline MetricsReport compute_metrics(std::span<const int> predicted, std::span<const int> gold,
                                     std::string config = {}) {
    if (predicted.size() != gold.size()) throw DataError("prediction and gold label counts differ");
    ConfusionMatrix cm;
    for (std::size_t i = 0; i < predicted.size(); ++i) cm.add(predicted[i], gold[i]);
    return metrics_from_confusion(cm, std::move(config));
}

/// Predictions joined to gold labels by record id. Every prediction needs a gold label.
inline MetricsReport compute_metrics(std::span<const decision::Prediction> preds,
                                     const std::map<std::string, int>& gold, std::string config = {}) {
    ConfusionMatrix cm;
    std::set<std::string> seen;
    for (const auto& p : preds) {
        auto it = gold.find(p.record_id);
        if (it == gold.end()) throw DataError("no gold label for record '" + p.record_id + "'");
        if (!seen.insert(p.record_id).second) throw DataError("duplicate prediction for record '" + p.record_id + "'");
        cm.add(p.label, it->second);
    }
    return metrics_from_confusion(cm, std::move(config));
}

/// Gold labels from a manifest; rejected and unlabeled records are left out.
inline std::map<std::string, int> gold_from_records(std::span<const corpus::Record> records) {
    std::map<std::string, int> gold;
    for (const auto& r : records)
        if (r.gold_label && !r.rejected()) gold[r.record_id] = *r.gold_label;
    return gold;
}

inline std::map<std::string, int> labels_by_id(std::span<const decision::Prediction> rows) {
    std::map<std::string, int> out;
    for (const auto& p : rows)
        if (!out.emplace(p.record_id, p.label).second) throw DataError("duplicate label row for '" + p.record_id + "'");
    return out;
}

inline double agreement(std::span<const int> a, std::span<const int> b) {
    if (a.size() != b.size()) throw DataError("agreement: sequences differ in length");
    if (a.empty()) throw DataError("agreement: empty sequences");
    std::size_t same = 0;
    for (std::size_t i = 0; i < a.size(); ++i) same += a[i] == b[i];
    return static_cast<double>(same) / static_cast<double>(a.size());
}

// ---------------------------------------------------------------------------
// Survey
// ---------------------------------------------------------------------------

inline constexpr double kSurveyThreshold = 5.5;  // midpoint of the 1..10 scale

struct SurveySummary {
    std::string pair_id;
    double mean_rating = 0;
    double variance = 0;  // population variance
    std::size_t n_raters = 0;
    int label = 0;  // 1 (OOC) iff mean < 5.5
};

inline int survey_label(double mean_rating) { return mean_rating < kSurveyThreshold ? 1 : 0; }

/// Aggregates ratings per pair, in order of first appearance. When
/// `known_pairs` is non-empty, ratings for other pair ids are an error.
inline std::vector<SurveySummary> ingest_survey(std::span<const corpus::SurveyRating> ratings,
                                                const std::set<std::string>& known_pairs = {}) {
    std::vector<SurveySummary> out;
    std::unordered_map<std::string, std::size_t> idx;
    std::vector<std::vector<int>> values;
    for (const auto& r : ratings) {
        if (r.rating < 1 || r.rating > 10)
            throw DataError("rating " + std::to_string(r.rating) + " outside [1,10] for pair " + r.pair_id);
        if (!known_pairs.empty() && !known_pairs.contains(r.pair_id))
            throw DataError("unknown pair_id '" + r.pair_id + "' in survey");
        auto [it, inserted] = idx.try_emplace(r.pair_id, out.size());
        if (inserted) {
            out.push_back({r.pair_id});
            values.emplace_back();
        }
        values[it->second].push_back(r.rating);
    }
    for (std::size_t i = 0; i < out.size(); ++i) {
        const auto& v = values[i];
        double sum = 0;
        for (int x : v) sum += x;
        const double mean = sum / static_cast<double>(v.size());
        double ss = 0;
        for (int x : v) ss += (x - mean) * (x - mean);
        out[i].mean_rating = mean;
        out[i].variance = ss / static_cast<double>(v.size());
        out[i].n_raters = v.size();
        out[i].label = survey_label(mean);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Output
// ---------------------------------------------------------------------------

inline std::string fmt_optional(const std::optional<double>& v, int decimals) {
    if (!v) return "NA";
    // Exact halves round away from zero (0.625 -> 0.63); printf alone would round to even.
    const double scale = std::pow(10.0, decimals);
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.*f", decimals, std::round(*v * scale) / scale);
    return buf;
}

// Shortest round-trip representation.
inline std::string raw_number(const std::optional<double>& v) { return v ? json(*v).dump() : "NA"; }

inline json to_json(const MetricsReport& r) {
    auto opt = [](const std::optional<double>& v) { return v ? json(*v) : json(nullptr); };
    return {{"config", r.config},
            {"n", r.n},
            {"tp", r.cm.tp},
            {"fp", r.cm.fp},
            {"tn", r.cm.tn},
            {"fn", r.cm.fn},
            {"accuracy", opt(r.accuracy)},
            {"precision", opt(r.precision)},
            {"recall", opt(r.recall)},
            {"f1", opt(r.f1)},
            {"zero_denominator", r.zero_denominator}};
}

inline std::string csv_header() { return "config,n,tp,fp,tn,fn,accuracy,precision,recall,f1"; }

/// Full-precision CSV row (raw fractions preserved).
inline std::string csv_row(const MetricsReport& r) {
    return r.config + "," + std::to_string(r.n) + "," + std::to_string(r.cm.tp) + "," + std::to_string(r.cm.fp) +
           "," + std::to_string(r.cm.tn) + "," + std::to_string(r.cm.fn) + "," + raw_number(r.accuracy) + "," +
           raw_number(r.precision) + "," + raw_number(r.recall) + "," + raw_number(r.f1);
}

inline std::string text_report(const MetricsReport& r, int decimals = 3) {
    std::string s;
    if (!r.config.empty()) s += "config:    " + r.config + "\n";
    s += "n:         " + std::to_string(r.n) + "\n";
    s += "confusion: tp=" + std::to_string(r.cm.tp) + " fp=" + std::to_string(r.cm.fp) +
         " tn=" + std::to_string(r.cm.tn) + " fn=" + std::to_string(r.cm.fn) + "\n";
    s += "accuracy:  " + fmt_optional(r.accuracy, decimals) + "\n";
    s += "precision: " + fmt_optional(r.precision, decimals) + "\n";
    s += "recall:    " + fmt_optional(r.recall, decimals) + "\n";
    s += "f1:        " + fmt_optional(r.f1, decimals) + "\n";
    return s;
}

}  // namespace ooc::evaluation
