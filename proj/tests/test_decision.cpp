#include <gtest/gtest.h>

#include <random>

#include "ooc/decision.hpp"
#include "test_util.hpp"

using namespace ooc;
using namespace ooc::decision;

TEST(OrigGen, HandExamples) {
    EXPECT_EQ(predict_orig_gen({0.30, 0.40}, 0.5).label, kOOC);
    EXPECT_EQ(predict_orig_gen({0.30, 0.70}, 0.5).label, kOOC);
    EXPECT_EQ(predict_orig_gen({0.70, 0.30}, 0.5).label, kOOC);
    EXPECT_EQ(predict_orig_gen({0.60, 0.90}, 0.5).label, kNOOC);
}

TEST(OrigGen, EqualityCountsAsAbove) {
    EXPECT_EQ(predict_orig_gen({0.50, 0.50}, 0.5).label, kNOOC);
    EXPECT_EQ(predict_gen_gen(0.5, 0.5).label, kNOOC);
    EXPECT_EQ(predict_gen_gen(std::nextafter(0.5, 0.0), 0.5).label, kOOC);
}

TEST(OrigGen, GridTruthTable) {
    const double grid[] = {0, .25, .49, .50, .51, .75, 1.0};
    for (double a : grid)
        for (double b : grid) {
            const int expected = (a >= 0.5 && b >= 0.5) ? kNOOC : kOOC;
            EXPECT_EQ(predict_orig_gen({a, b}, 0.5).label, expected) << a << "," << b;
            EXPECT_EQ(predict_orig_gen({a, b}, 0.5).label, predict_orig_gen({b, a}, 0.5).label);
        }
}

TEST(OrigGen, RecordsInputsOnThePrediction) {
    const auto p = predict_orig_gen({0.2, 0.8}, 0.4, "r1");
    EXPECT_EQ(p.record_id, "r1");
    EXPECT_EQ(p.mode, Mode::orig_vs_gen);
    EXPECT_EQ(p.sim1, 0.2);
    EXPECT_EQ(p.sim2, 0.8);
    EXPECT_FALSE(p.sim_gg);
    EXPECT_EQ(p.threshold, 0.4);
}

TEST(OrigGen, NonFiniteInputIsRejected) {
    EXPECT_THROW(predict_orig_gen({std::nan(""), 0.5}, 0.5), DataError);
    EXPECT_THROW(predict_orig_gen({0.5, INFINITY}, 0.5), DataError);
    EXPECT_THROW(predict_gen_gen(0.5, std::nan("")), DataError);
}

TEST(OrigGen, ModeMismatchIsAConfigError) {
    DecisionConfig cfg;
    cfg.mode = Mode::gen_vs_gen;
    EXPECT_THROW(predict_orig_gen({0.5, 0.5}, cfg), ConfigError);
    cfg.mode = Mode::orig_vs_gen;
    const std::vector<GenGenInput> in = {{"a", 0.5}};
    EXPECT_THROW(predict_gen_gen_run(in, cfg), ConfigError);
}

TEST(Median, HandExamples) {
    const std::vector<double> odd = {0.9, 0.2, 0.6};
    EXPECT_EQ(calibrate_median(odd), 0.6);
    const std::vector<double> even = {0.8, 0.4};
    EXPECT_DOUBLE_EQ(calibrate_median(even), 0.6);
    const std::vector<double> same = {0.37, 0.37, 0.37};
    EXPECT_EQ(calibrate_median(same), 0.37);
    EXPECT_THROW(calibrate_median(std::vector<double>{}), DataError);
    EXPECT_THROW(calibrate_median(std::vector<double>{0.1, std::nan("")}), DataError);
}

TEST(Median, MatchesSortingOracle) {
    std::mt19937 rng(3);
    std::uniform_real_distribution<double> u(-1, 1);
    for (int n = 1; n < 60; ++n) {
        std::vector<double> v(static_cast<std::size_t>(n));
        for (auto& x : v) x = u(rng);
        auto s = v;
        std::sort(s.begin(), s.end());
        const std::size_t h = s.size() / 2;
        const double expected = n % 2 ? s[h] : (s[h - 1] + s[h]) / 2;
        EXPECT_DOUBLE_EQ(calibrate_median(v), expected);
    }
}

TEST(GenGenRun, OddExampleLabels) {
    DecisionConfig cfg;
    cfg.mode = Mode::gen_vs_gen;
    const std::vector<GenGenInput> in = {{"a", 0.2}, {"b", 0.6}, {"c", 0.9}};
    const auto preds = predict_gen_gen_run(in, cfg);
    ASSERT_EQ(preds.size(), 3u);
    EXPECT_EQ(preds[0].label, kOOC);
    EXPECT_EQ(preds[1].label, kNOOC);
    EXPECT_EQ(preds[2].label, kNOOC);
    for (const auto& p : preds) EXPECT_EQ(p.threshold, 0.6);
}

TEST(GenGenRun, MedianSplitsDistinctScoresInHalf) {
    DecisionConfig cfg;
    cfg.mode = Mode::gen_vs_gen;
    std::mt19937 rng(9);
    for (int n : {1, 2, 3, 10, 11, 101, 500}) {
        std::vector<GenGenInput> in;
        for (int i = 0; i < n; ++i) in.push_back({std::to_string(i), i * 0.01});
        std::shuffle(in.begin(), in.end(), rng);
        int ooc = 0;
        for (const auto& p : predict_gen_gen_run(in, cfg)) ooc += p.label;
        EXPECT_EQ(ooc, n / 2) << n;
    }
}

TEST(GenGenRun, FixedThresholdSkipsCalibration) {
    DecisionConfig cfg;
    cfg.mode = Mode::gen_vs_gen;
    cfg.gen_fixed_threshold = 0.95;
    const std::vector<GenGenInput> in = {{"a", 0.2}, {"b", 0.6}, {"c", 0.96}};
    const auto preds = predict_gen_gen_run(in, cfg);
    EXPECT_EQ(preds[0].label + preds[1].label + preds[2].label, 2);
    EXPECT_EQ(preds[2].label, kNOOC);
    EXPECT_TRUE(predict_gen_gen_run(std::vector<GenGenInput>{}, cfg).empty());
}

TEST(GenGenRun, LabelsInvariantUnderMonotoneTransform) {
    DecisionConfig cfg;
    cfg.mode = Mode::gen_vs_gen;
    std::mt19937 rng(21);
    std::uniform_real_distribution<double> u(0, 1);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<GenGenInput> in, moved;
        for (int i = 0; i < 31; ++i) {
            const double s = u(rng);
            in.push_back({std::to_string(i), s});
            moved.push_back({std::to_string(i), 3 * s * s * s - 2});
        }
        const auto a = predict_gen_gen_run(in, cfg), b = predict_gen_gen_run(moved, cfg);
        for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].label, b[i].label);
    }
}

TEST(DecisionConfig, Validation) {
    DecisionConfig cfg;
    EXPECT_NO_THROW(cfg.validate());
    cfg.threshold = INFINITY;
    EXPECT_THROW(cfg.validate(), ConfigError);
    cfg.threshold = 0.5;
    cfg.gen_fixed_threshold = std::nan("");
    EXPECT_THROW(cfg.validate(), ConfigError);
    EXPECT_EQ(mode_from_string("gen-vs-gen"), Mode::gen_vs_gen);
    EXPECT_THROW(mode_from_string("both"), ConfigError);
}

TEST(PredictionsFile, RoundTrip) {
    test::TempDir dir;
    std::vector<Prediction> preds = {predict_orig_gen({0.1, 0.9}, 0.5, "x1"), predict_gen_gen(0.123456789, 0.3, "x2")};
    write_predictions(dir / "p.jsonl", preds);
    EXPECT_EQ(read_predictions(dir / "p.jsonl"), preds);
}

TEST(PredictionsFile, BadLineReportsItsNumber) {
    test::TempDir dir;
    {
        std::ofstream out(dir / "p.jsonl");
        out << R"({"record_id":"a","label":1})" << "\n\n" << R"({"record_id":"b","label":2})" << "\n";
    }
    try {
        read_predictions(dir / "p.jsonl");
        FAIL();
    } catch (const ParseError& e) {
        EXPECT_EQ(e.line, 3u);
    }
    EXPECT_THROW(read_predictions(dir / "missing.jsonl"), DataError);
}
