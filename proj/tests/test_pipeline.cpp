#include <gtest/gtest.h>

#include "ooc/matrix.hpp"
#include "ooc/pipeline.hpp"
#include "test_util.hpp"

using namespace ooc;
using namespace ooc::pipeline;

namespace {

json synth_config() {
    return {{"manifest", "manifest.jsonl"},
            {"images_dir", "images"},
            {"output_dir", "out"},
            {"models_dir", "models"},
            {"backends", {{{"backend_id", "mock"}, {"kind", "mock"}, {"rate_limit", 1e6}}}},
            {"generation", {{"backend", "mock"}, {"size", 256}}},
            {"sanitizer", {{"tagger", "gazetteer"}, {"gazetteer_file", "gazetteer.txt"}}},
            {"featurizer", {{"encoder", "mock"}, {"detector", "none"}}},
            {"decision", {{"mode", "gen_vs_gen"}, {"threshold", 0.5}}},
            {"similarity", "cosine"},
            {"workers", 3}};
}

struct PipelineRun {
    RunConfig cfg;
    std::vector<decision::Prediction> preds;
    std::vector<corpus::Record> records;
};

// All stages in-process, on a synthetic corpus under `dir`.
PipelineRun run_pipeline(const test::TempDir& dir, std::uint64_t seed, json overrides = json::object()) {
    SyntheticCorpusOptions opts;
    opts.seed = seed;
    opts.image_size = 256;
    make_synthetic_corpus(dir / "manifest.jsonl", dir / "originals", opts);
    auto j = synth_config();
    j.merge_patch(overrides);
    PipelineRun run{RunConfig::from_json(j, dir.path()), {}, {}};
    const auto& cfg = run.cfg;
    corpus::ManifestStore store(cfg.manifest);
    const auto scfg = cfg.sanitizer_config();
    run_sanitize_stage(store, *make_tagger(cfg, scfg), scfg);
    auto backend = gen::make_backend(cfg.backend("mock"));
    gen::SimulatedClock clock;
    gen::GenerationOptions g;
    g.images_dir = cfg.images_dir;
    g.size = cfg.image_size;
    g.workers = cfg.workers;
    gen::run_generation_stage(store, *backend, cfg.backend("mock"), g, clock);
    if (cfg.similarity == SimilarityKind::cosine) {
        const auto f = features::Featurizer::load(cfg.featurizer, cfg.models_dir);
        corpus::EmbeddingCache cache(cache_path(cfg.output_dir, f), static_cast<std::uint32_t>(f.dim()));
        run_embed_stage(store, f, cache, cfg.workers);
        run.preds = run_predict_stage(store, cfg.similarity, &f, &cache, cfg.decision);
    } else {
        run.preds = run_predict_stage(store, cfg.similarity, nullptr, nullptr, cfg.decision);
    }
    run.records = store.records();
    return run;
}

std::vector<std::string> sorted_tokens(const std::string& s) {
    auto t = normalized_tokens(s);
    std::sort(t.begin(), t.end());
    return t;
}

}  // namespace

TEST(RunConfig, RelativePathsResolveAgainstTheConfigFile) {
    test::TempDir dir;
    const auto cfg = RunConfig::from_json(synth_config(), dir.path());
    EXPECT_EQ(cfg.manifest, dir / "manifest.jsonl");
    EXPECT_EQ(cfg.gazetteer, dir / "gazetteer.txt");
    EXPECT_EQ(cfg.image_size, 256);
    EXPECT_EQ(cfg.decision.mode, decision::Mode::gen_vs_gen);
    EXPECT_FALSE(cfg.decision.gen_fixed_threshold);
    EXPECT_EQ(cfg.workers, 3);
}

TEST(RunConfig, EffectiveConfigRecordsTheDecisionRule) {
    const auto j = RunConfig::from_json(synth_config(), "/tmp").to_json();
    EXPECT_EQ(j["decision"]["gen_threshold"], "median");
    EXPECT_EQ(j["decision"]["tie_rule"], decision::kTieRule);
    EXPECT_TRUE(j["generation"]["seed"].is_null());
}

TEST(RunConfig, DigestTracksEveryOverride) {
    auto a = RunConfig::from_json(synth_config(), "/tmp");
    auto b = a;
    EXPECT_EQ(a.digest(), b.digest());
    b.decision.threshold = 0.6;
    EXPECT_NE(a.digest(), b.digest());
    b = a;
    b.featurizer.detector_id = "mock";
    EXPECT_NE(a.digest(), b.digest());
    b = a;
    b.decision.gen_fixed_threshold = 0.5;
    EXPECT_NE(a.digest(), b.digest());
}

TEST(RunConfig, InvalidValuesAreConfigErrors) {
    const std::vector<json> bad = {
        {{"workers", 0}},
        {{"generation", {{"size", 300}}}},
        {{"generation", {{"backend", "nope"}}}},
        {{"sanitizer", {{"tagger", "spacy"}}}},
        {{"sanitizer", {{"tagger", "gazetteer"}}}},
        {{"featurizer", {{"encoder", "no-such-encoder"}}}},
        {{"featurizer", {{"detector", "no-such-detector"}}}},
        {{"similarity", "euclid"}},
        {{"decision", {{"mode", "both"}}}},
        {{"backends", {{{"backend_id", "mock"}, {"kind", "mock"}, {"rate_limit", -1}}}}},
        {{"workers", "four"}},
    };
    for (const auto& patch : bad) {
        auto j = synth_config();
        j.merge_patch(patch);
        if (patch.contains("sanitizer") && !patch["sanitizer"].contains("gazetteer_file")) j["sanitizer"].erase("gazetteer_file");
        EXPECT_THROW(RunConfig::from_json(j, "/tmp"), ConfigError) << patch.dump();
    }
    EXPECT_THROW(RunConfig::load("/nonexistent/config.json"), ConfigError);
}

TEST(Pipeline, SyntheticCorpusEndToEnd) {
    test::TempDir dir;
    const auto run = run_pipeline(dir, 7);
    ASSERT_EQ(run.preds.size(), 20u);
    for (const auto& r : run.records) EXPECT_EQ(r.status, corpus::Stage::predicted);
    const auto m = evaluation::compute_metrics(run.preds, evaluation::gold_from_records(run.records));
    EXPECT_EQ(m.n, 20u);
    EXPECT_EQ(*m.accuracy, 1.0);
}

TEST(Pipeline, NamesAreGoneBeforeGeneration) {
    test::TempDir dir;
    const auto run = run_pipeline(dir, 7);
    for (const auto& r : run.records)
        for (const auto* c : {&r.caption1_clean, &r.caption2_clean}) {
            ASSERT_TRUE(c->has_value());
            for (const char* name : {"Obama", "Macron", "Merkel", "Trudeau", "Biden", "Modi", "Ardern", "Lula"})
                EXPECT_EQ((*c)->find(name), std::string::npos) << **c;
        }
}

TEST(Pipeline, IdenticalTokenMultisetsAreNeverOutOfContext) {
    for (std::uint64_t seed : {1u, 2u, 3u, 4u, 5u}) {
        test::TempDir dir;
        const auto run = run_pipeline(dir, seed);
        std::map<std::string, int> label;
        for (const auto& p : run.preds) label[p.record_id] = p.label;
        int identical = 0;
        for (const auto& r : run.records) {
            if (sorted_tokens(*r.caption1_clean) != sorted_tokens(*r.caption2_clean)) continue;
            ++identical;
            EXPECT_EQ(label.at(r.record_id), decision::kNOOC) << r.record_id;
        }
        EXPECT_EQ(identical, 5);
    }
}

TEST(Pipeline, RunsAreDeterministic) {
    test::TempDir a, b;
    const auto x = run_pipeline(a, 7), y = run_pipeline(b, 7);
    ASSERT_EQ(x.preds.size(), y.preds.size());
    for (std::size_t i = 0; i < x.preds.size(); ++i)
        EXPECT_EQ(decision::to_json(x.preds[i]).dump(), decision::to_json(y.preds[i]).dump());
}

TEST(Pipeline, PixelBaselinesNeedNoEmbeddings) {
    for (const char* kind : {"ssim", "mse"}) {
        test::TempDir dir;
        const auto run = run_pipeline(dir, 7, {{"similarity", kind}, {"decision", {{"mode", "orig_vs_gen"}}}});
        ASSERT_EQ(run.preds.size(), 20u);
        for (const auto& p : run.preds) {
            EXPECT_GE(*p.sim1, -1.0);
            EXPECT_LE(*p.sim1, 1.0);
        }
        EXPECT_FALSE(fs::exists(dir / "out" / "embeddings"));
    }
}

TEST(Pipeline, ScoringNamesTheMissingStage) {
    test::TempDir dir;
    SyntheticCorpusOptions opts;
    opts.records = 2;
    opts.image_size = 256;
    const auto records = make_synthetic_corpus(dir / "manifest.jsonl", dir / "originals", opts);
    try {
        score_records(records, SimilarityKind::ssim, nullptr, nullptr);
        FAIL();
    } catch (const DataError& e) {
        EXPECT_NE(std::string(e.what()).find("sanitize"), std::string::npos) << e.what();
    }
}

TEST(Pipeline, EmbedStageIsCachedAcrossRuns) {
    test::TempDir dir;
    const auto run = run_pipeline(dir, 7);
    const auto& cfg = run.cfg;
    corpus::ManifestStore store(cfg.manifest);
    const auto f = features::Featurizer::load(cfg.featurizer, cfg.models_dir);
    corpus::EmbeddingCache cache(cache_path(cfg.output_dir, f), static_cast<std::uint32_t>(f.dim()));
    const auto before = fs::file_size(cache_path(cfg.output_dir, f));
    const auto rep = run_embed_stage(store, f, cache, 2);
    EXPECT_EQ(rep.embedded, 0u);
    EXPECT_EQ(rep.skipped, 20u);
    EXPECT_EQ(fs::file_size(cache_path(cfg.output_dir, f)), before);
}

TEST(Pipeline, BlockedTopicIsRejectedAndExcluded) {
    test::TempDir dir;
    SyntheticCorpusOptions opts;
    opts.image_size = 256;
    opts.with_blocked_record = true;
    make_synthetic_corpus(dir / "manifest.jsonl", dir / "originals", opts);
    auto cfg = RunConfig::from_json(synth_config(), dir.path());
    corpus::ManifestStore store(cfg.manifest);
    const auto scfg = cfg.sanitizer_config();
    const auto rep = run_sanitize_stage(store, *make_tagger(cfg, scfg), scfg);
    EXPECT_EQ(rep.rejected, 1u);
    EXPECT_EQ(rep.sanitized, 20u);
    const auto r = *store.find("syn1020");
    EXPECT_TRUE(r.rejected());
    EXPECT_FALSE(evaluation::gold_from_records(store.records()).contains("syn1020"));
}

TEST(Matrix, OneCellPerCombination) {
    test::TempDir dir;
    const auto run = run_pipeline(dir, 7);
    evaluation::MatrixSpec spec;
    spec.encoders = {"mock", "mock-rgb"};
    spec.detectors = {"none", "mock"};
    spec.modes = {decision::Mode::gen_vs_gen};
    auto cells = evaluation::run_matrix(run.records, spec, run.cfg.featurizer, run.cfg.models_dir,
                                        run.cfg.output_dir, run.cfg.decision);
    ASSERT_EQ(cells.size(), 4u);
    std::set<std::string> names;
    for (const auto& c : cells) {
        names.insert(c.name());
        EXPECT_TRUE(c.error.empty()) << c.error;
        ASSERT_TRUE(c.metrics);
        EXPECT_EQ(c.metrics->n, 20u);
    }
    EXPECT_EQ(names.size(), 4u);
    evaluation::sort_cells(cells);
    for (std::size_t i = 1; i < cells.size(); ++i)
        EXPECT_GE(*cells[i - 1].metrics->accuracy, *cells[i].metrics->accuracy);
    const auto csv = evaluation::matrix_csv(cells);
    EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 5);
    EXPECT_EQ(csv.substr(0, csv.find('\n')), "encoder,detector,mode,n,tp,fp,tn,fn,accuracy,precision,recall,f1,error");
}

TEST(Matrix, FailingCellDoesNotStopTheOthers) {
    test::TempDir dir;
    const auto run = run_pipeline(dir, 7);
    evaluation::MatrixSpec spec;
    spec.encoders = {"mock", "clip-vit-l-14"};
    spec.detectors = {"none"};
    const auto cells = evaluation::run_matrix(run.records, spec, run.cfg.featurizer, run.cfg.models_dir,
                                              run.cfg.output_dir, run.cfg.decision);
    ASSERT_EQ(cells.size(), 4u);
    int failed = 0;
    for (const auto& c : cells) {
        if (c.encoder == "clip-vit-l-14") {
            EXPECT_FALSE(c.metrics);
            EXPECT_FALSE(c.error.empty());
            ++failed;
        } else {
            EXPECT_TRUE(c.metrics);
        }
    }
    EXPECT_EQ(failed, 2);
}
