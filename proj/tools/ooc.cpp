// ooc: command-line driver for the out-of-context detection pipeline.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "ooc/ooc.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitOther = 1;
constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitBackend = 4;
constexpr int kExitPartial = 5;

struct Overrides {
    std::optional<int> workers;
    std::optional<std::string> mode;
    std::optional<double> threshold;
    bool median = false;
    std::optional<double> gen_threshold;
    std::optional<std::string> similarity;
    std::optional<std::string> encoder;
    std::optional<std::string> detector;
    std::optional<std::string> backend;
    std::optional<std::uint64_t> seed;
};

ooc::pipeline::RunConfig load_config(const std::string& path, const Overrides& o) {
    if (path.empty()) throw ooc::ConfigError("--config is required for this subcommand");
    auto cfg = ooc::pipeline::RunConfig::load(path);
    if (o.workers) cfg.workers = *o.workers;
    if (o.mode) cfg.decision.mode = ooc::decision::mode_from_string(*o.mode);
    if (o.threshold) cfg.decision.threshold = *o.threshold;
    if (o.median) cfg.decision.gen_fixed_threshold.reset();
    if (o.gen_threshold) cfg.decision.gen_fixed_threshold = *o.gen_threshold;
    if (o.similarity) cfg.similarity = ooc::pipeline::similarity_from_string(*o.similarity);
    if (o.encoder) cfg.featurizer.encoder_id = *o.encoder;
    if (o.detector) cfg.featurizer.detector_id = *o.detector;
    if (o.backend) cfg.generation_backend = *o.backend;
    if (o.seed) cfg.generation_seed = *o.seed;
    cfg.validate();
    return cfg;
}

/// Written next to a subcommand's outputs as run_<subcommand>.json.
class RunDescriptor {
public:
    RunDescriptor(std::string subcommand, json config)
        : subcommand_(std::move(subcommand)), config_(std::move(config)), started_(ooc::utc_timestamp()) {}

    void output(const fs::path& p) { outputs_.push_back(p.string()); }
    json& counts() { return counts_; }

    void write(const fs::path& dir, int exit_code) const {
        fs::create_directories(dir);
        const json j = {{"subcommand", subcommand_},
                        {"config_digest", ooc::hex64(ooc::fnv1a(config_.dump()))},
                        {"config", config_},
                        {"started_at", started_},
                        {"finished_at", ooc::utc_timestamp()},
                        {"counts", counts_},
                        {"outputs", outputs_},
                        {"exit_code", exit_code}};
        const auto text = j.dump(2) + "\n";
        ooc::write_file_atomic(dir / ("run_" + subcommand_ + ".json"),
                               std::vector<std::uint8_t>(text.begin(), text.end()));
    }

private:
    std::string subcommand_;
    json config_;
    std::string started_;
    json counts_ = json::object();
    json outputs_ = json::array();
};

void write_text(const fs::path& path, const std::string& text) {
    ooc::write_file_atomic(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

int cmd_sanitize(const ooc::pipeline::RunConfig& cfg) {
    RunDescriptor run("sanitize", cfg.to_json());
    const auto scfg = cfg.sanitizer_config();
    const auto tagger = ooc::pipeline::make_tagger(cfg, scfg);
    ooc::corpus::ManifestStore store(cfg.manifest);
    const auto rep = ooc::pipeline::run_sanitize_stage(store, *tagger, scfg);
    std::cout << "sanitized " << rep.sanitized << ", rejected " << rep.rejected << ", skipped " << rep.skipped << "\n";
    run.counts() = rep.to_json();
    run.output(cfg.manifest);
    run.write(cfg.output_dir, kExitOk);
    return kExitOk;
}

int cmd_generate(const ooc::pipeline::RunConfig& cfg) {
    RunDescriptor run("generate", cfg.to_json());
    const auto& bcfg = cfg.backend(cfg.generation_backend);
    auto backend = ooc::gen::make_backend(bcfg);
    ooc::corpus::ManifestStore store(cfg.manifest);
    ooc::gen::GenerationOptions opts{cfg.images_dir, cfg.image_size, cfg.workers, cfg.generation_seed};
    ooc::gen::SteadyClock clock;
    fs::create_directories(cfg.output_dir);
    const auto log_path = cfg.output_dir / "generate_log.jsonl";
    std::ofstream log(log_path, std::ios::app);
    const auto rep = ooc::gen::run_generation_stage(store, *backend, bcfg, opts, clock, &log);
    std::cout << "generated " << rep.generated << ", skipped " << rep.skipped << ", policy-rejected "
              << rep.policy_rejected << ", failed " << rep.failed << "\n";
    const int code = rep.failed > 0 ? kExitPartial : kExitOk;
    run.counts() = rep.to_json();
    run.output(cfg.manifest);
    run.output(cfg.images_dir);
    run.output(log_path);
    run.write(cfg.output_dir, code);
    return code;
}

int cmd_embed(const ooc::pipeline::RunConfig& cfg) {
    RunDescriptor run("embed", cfg.to_json());
    const auto f = ooc::features::Featurizer::load(cfg.featurizer, cfg.models_dir);
    const auto cache_file = ooc::pipeline::cache_path(cfg.output_dir, f);
    ooc::corpus::EmbeddingCache cache(cache_file, static_cast<std::uint32_t>(f.dim()));
    ooc::corpus::ManifestStore store(cfg.manifest);
    const auto rep = ooc::pipeline::run_embed_stage(store, f, cache, cfg.workers);
    std::cout << "embedded " << rep.embedded << ", skipped " << rep.skipped << " (featurizer " << f.digest() << ")\n";
    run.counts() = rep.to_json();
    run.output(cache_file);
    run.write(cfg.output_dir, kExitOk);
    return kExitOk;
}

int cmd_predict(const ooc::pipeline::RunConfig& cfg, const std::string& out_flag) {
    RunDescriptor run("predict", cfg.to_json());
    ooc::corpus::ManifestStore store(cfg.manifest);
    std::optional<ooc::features::Featurizer> f;
    std::unique_ptr<ooc::corpus::EmbeddingCache> cache;
    if (cfg.similarity == ooc::pipeline::SimilarityKind::cosine) {
        f.emplace(ooc::features::Featurizer::load(cfg.featurizer, cfg.models_dir));
        const auto cache_file = ooc::pipeline::cache_path(cfg.output_dir, *f);
        if (!fs::exists(cache_file))
            throw ooc::DataError("no embeddings for featurizer " + f->digest() + "; run the embed stage first");
        cache = std::make_unique<ooc::corpus::EmbeddingCache>(cache_file, static_cast<std::uint32_t>(f->dim()));
    }
    const auto preds =
        ooc::pipeline::run_predict_stage(store, cfg.similarity, f ? &*f : nullptr, cache.get(), cfg.decision);
    const fs::path out = out_flag.empty() ? cfg.output_dir / "predictions.jsonl" : fs::path(out_flag);
    ooc::decision::write_predictions(out, preds);
    std::size_t ooc_count = 0;
    for (const auto& p : preds) ooc_count += p.label == ooc::decision::kOOC;
    std::cout << "mode " << ooc::decision::to_string(cfg.decision.mode) << ", threshold "
              << (preds.empty() ? cfg.decision.threshold : preds.front().threshold) << " ("
              << ooc::decision::kTieRule << "), similarity " << ooc::pipeline::to_string(cfg.similarity) << "\n";
    std::cout << preds.size() << " predictions, " << ooc_count << " OOC -> " << out.string() << "\n";
    run.counts() = {{"predictions", preds.size()}, {"ooc", ooc_count}};
    run.output(out);
    run.write(cfg.output_dir, kExitOk);
    return kExitOk;
}

struct GoldLabels {
    std::map<std::string, int> labels;
    std::size_t rejected = 0;  // manifest records excluded from metrics
};

/// Gold labels from either a label file (record_id + label per line) or a manifest.
GoldLabels load_gold(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw ooc::DataError("gold file not found: " + path.string());
    GoldLabels out;
    auto& gold = out.labels;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (ooc::trim(line).empty()) continue;
        try {
            const auto j = json::parse(line);
            if (j.contains("caption1") || j.contains("gold_label")) {
                const auto r = ooc::corpus::record_from_json(j);
                if (r.rejected())
                    ++out.rejected;
                else if (r.gold_label)
                    gold[r.record_id] = *r.gold_label;
            } else {
                const auto p = ooc::decision::prediction_from_json(j);
                if (!gold.emplace(p.record_id, p.label).second)
                    throw ooc::DataError("duplicate gold label for '" + p.record_id + "'");
            }
        } catch (const json::exception& e) {
            throw ooc::ParseError(lineno, e.what());
        }
    }
    return out;
}

int cmd_evaluate(const std::string& config_path, const Overrides& o, std::string predictions, std::string gold_path,
                 int decimals, std::string out_dir) {
    std::optional<ooc::pipeline::RunConfig> cfg;
    if (!config_path.empty()) cfg = load_config(config_path, o);
    if (predictions.empty()) {
        if (!cfg) throw ooc::ConfigError("evaluate needs --predictions or --config");
        predictions = (cfg->output_dir / "predictions.jsonl").string();
    }
    if (gold_path.empty()) {
        if (!cfg) throw ooc::ConfigError("evaluate needs --gold or --config");
        gold_path = cfg->manifest.string();
    }
    if (out_dir.empty()) out_dir = cfg ? cfg->output_dir.string() : ".";

    json effective = {{"predictions", predictions}, {"gold", gold_path}, {"decimals", decimals}};
    if (cfg) effective["run"] = cfg->to_json();
    RunDescriptor run("evaluate", effective);

    const auto preds = ooc::decision::read_predictions(predictions);
    const auto gold = load_gold(gold_path);
    auto report = ooc::evaluation::compute_metrics(preds, gold.labels, fs::path(predictions).filename().string());

    const bool scored = !preds.empty() && (preds.front().sim1 || preds.front().sim_gg);
    if (scored)
        std::cout << "mode:      " << ooc::decision::to_string(preds.front().mode) << "\nthreshold: "
                  << json(preds.front().threshold).dump() << " (" << ooc::decision::kTieRule << ")\n";
    std::cout << ooc::evaluation::text_report(report, decimals);
    if (gold.rejected) std::cout << "rejected:  " << gold.rejected << " (excluded)\n";
    if (report.zero_denominator) std::cout << "note:      some ratios have a zero denominator (NA)\n";

    const fs::path metrics_path = fs::path(out_dir) / "metrics.json";
    fs::create_directories(out_dir);
    auto metrics = ooc::evaluation::to_json(report);
    metrics["rejected"] = gold.rejected;
    if (scored) {
        metrics["mode"] = ooc::decision::to_string(preds.front().mode);
        metrics["threshold"] = preds.front().threshold;
        metrics["tie_rule"] = ooc::decision::kTieRule;
    }
    write_text(metrics_path, metrics.dump(2) + "\n");
    run.counts() = {{"n", report.n}, {"tp", report.cm.tp}, {"fp", report.cm.fp}, {"tn", report.cm.tn}, {"fn", report.cm.fn}};
    run.output(metrics_path);
    run.write(out_dir, kExitOk);
    return kExitOk;
}

int cmd_survey(const std::string& config_path, const Overrides& o, const std::string& ratings, std::string out) {
    std::optional<ooc::pipeline::RunConfig> cfg;
    if (!config_path.empty()) cfg = load_config(config_path, o);
    std::set<std::string> known;
    if (cfg && fs::exists(cfg->manifest))
        for (const auto& r : ooc::corpus::load_manifest(cfg->manifest)) known.insert(r.record_id);
    if (out.empty()) out = cfg ? (cfg->output_dir / "survey_labels.jsonl").string() : "survey_labels.jsonl";

    json effective = {{"ratings", ratings}, {"out", out}};
    if (cfg) effective["run"] = cfg->to_json();
    RunDescriptor run("survey", effective);

    const auto summary = ooc::evaluation::ingest_survey(ooc::corpus::read_survey_csv(fs::path(ratings)), known);
    std::string text;
    std::size_t ooc_count = 0;
    for (const auto& s : summary) {
        text += json{{"record_id", s.pair_id}, {"label", s.label}, {"mean_rating", s.mean_rating},
                     {"variance", s.variance}, {"n_raters", s.n_raters}}
                    .dump() +
                "\n";
        ooc_count += s.label == 1;
    }
    const fs::path out_path(out);
    if (out_path.has_parent_path()) fs::create_directories(out_path.parent_path());
    write_text(out_path, text);
    std::cout << summary.size() << " pairs, " << ooc_count << " labeled OOC (mean rating < "
              << ooc::evaluation::kSurveyThreshold << ") -> " << out << "\n";
    run.counts() = {{"pairs", summary.size()}, {"ooc", ooc_count}};
    run.output(out_path);
    run.write(out_path.has_parent_path() ? out_path.parent_path() : fs::path("."), kExitOk);
    return kExitOk;
}

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    for (auto& part : ooc::split(s, ',')) {
        auto t = std::string(ooc::trim(part));
        if (!t.empty()) out.push_back(t);
    }
    return out;
}

int cmd_matrix(const ooc::pipeline::RunConfig& cfg, const std::string& encoders, const std::string& detectors,
               const std::string& modes) {
    ooc::evaluation::MatrixSpec spec;
    spec.encoders = encoders.empty() ? std::vector{cfg.featurizer.encoder_id} : split_list(encoders);
    spec.detectors = detectors.empty() ? std::vector{cfg.featurizer.detector_id} : split_list(detectors);
    if (!modes.empty()) {
        spec.modes.clear();
        for (const auto& m : split_list(modes)) spec.modes.push_back(ooc::decision::mode_from_string(m));
    }
    spec.workers = cfg.workers;
    for (const auto& e : spec.encoders)
        if (!ooc::features::encoder_known(e, cfg.models_dir)) throw ooc::ConfigError("unknown encoder '" + e + "'");
    for (const auto& d : spec.detectors)
        if (!ooc::features::detector_known(d, cfg.models_dir)) throw ooc::ConfigError("unknown detector '" + d + "'");

    auto effective = cfg.to_json();
    effective["matrix"] = {{"encoders", spec.encoders}, {"detectors", spec.detectors}, {"modes", json::array()}};
    for (auto m : spec.modes) effective["matrix"]["modes"].push_back(ooc::decision::to_string(m));
    RunDescriptor run("matrix", effective);

    std::vector<ooc::corpus::Record> records;
    {
        ooc::corpus::ManifestStore store(cfg.manifest);
        records = store.records();
    }
    const auto cells =
        ooc::evaluation::run_matrix(records, spec, cfg.featurizer, cfg.models_dir, cfg.output_dir, cfg.decision);

    const auto csv_path = cfg.output_dir / "matrix.csv";
    const auto timing_path = cfg.output_dir / "matrix_timing.csv";
    write_text(csv_path, ooc::evaluation::matrix_csv(cells));
    write_text(timing_path, ooc::evaluation::matrix_timing_csv(cells));

    std::size_t failed = 0;
    for (const auto& c : cells) {
        if (c.metrics) {
            std::cout << c.name() << "  accuracy " << ooc::evaluation::fmt_optional(c.metrics->accuracy, 3)
                      << "  precision " << ooc::evaluation::fmt_optional(c.metrics->precision, 3) << "\n";
        } else {
            ++failed;
            std::cout << c.name() << "  FAILED: " << c.error << "\n";
        }
    }
    const int code = failed == 0 ? kExitOk : (failed == cells.size() ? kExitData : kExitPartial);
    run.counts() = {{"cells", cells.size()}, {"failed", failed}};
    run.output(csv_path);
    run.output(timing_path);
    run.write(cfg.output_dir, code);
    return code;
}

int cmd_synth(const std::string& dir, std::size_t records, std::uint64_t seed, bool blocked, int latency_ms,
              const std::string& call_log, double rate_limit) {
    const fs::path root = fs::absolute(dir);
    fs::create_directories(root);
    ooc::pipeline::SyntheticCorpusOptions opts;
    opts.records = records;
    opts.seed = seed;
    opts.with_blocked_record = blocked;
    const auto recs = ooc::pipeline::make_synthetic_corpus(root / "manifest.jsonl", root / "originals", opts);

    json backend = {{"backend_id", "mock"}, {"kind", "mock"}, {"rate_limit", rate_limit}};
    if (latency_ms > 0) backend["latency_ms"] = latency_ms;
    if (!call_log.empty()) backend["call_log"] = call_log;
    const json cfg = {{"manifest", "manifest.jsonl"},
                      {"images_dir", "images"},
                      {"models_dir", "models"},
                      {"output_dir", "out"},
                      {"backends", json::array({backend})},
                      {"generation", {{"backend", "mock"}, {"size", 512}}},
                      {"sanitizer", {{"tagger", "gazetteer"}, {"gazetteer_file", "gazetteer.txt"}}},
                      {"featurizer", {{"encoder", "mock"}, {"detector", "none"}}},
                      {"decision", {{"mode", "gen_vs_gen"}, {"threshold", 0.5}}},
                      {"similarity", "cosine"},
                      {"workers", 4}};
    write_text(root / "config.json", cfg.dump(2) + "\n");
    std::cout << recs.size() << " records -> " << (root / "manifest.jsonl").string() << "\n";
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Out-of-context image/caption detection pipeline"};
    app.require_subcommand(1);
    app.fallthrough();

    std::string config_path;
    Overrides o;
    app.add_option("-c,--config", config_path, "run configuration (JSON)");
    app.add_option("--workers", o.workers, "worker threads");

    auto* sanitize = app.add_subcommand("sanitize", "anonymize and screen captions");

    auto* generate = app.add_subcommand("generate", "generate one image per sanitized caption");
    generate->add_option("--backend", o.backend, "backend id from the config");
    generate->add_option("--seed", o.seed, "generation seed");

    auto* embed = app.add_subcommand("embed", "embed original and generated images");
    for (auto* sub : {embed}) {
        sub->add_option("--encoder", o.encoder, "encoder id");
        sub->add_option("--detector", o.detector, "detector id or 'none'");
    }

    std::string predict_out;
    auto* predict = app.add_subcommand("predict", "score records and apply the decision rule");
    predict->add_option("--encoder", o.encoder, "encoder id");
    predict->add_option("--detector", o.detector, "detector id or 'none'");
    predict->add_option("--mode", o.mode, "orig-vs-gen | gen-vs-gen");
    predict->add_option("--threshold", o.threshold, "orig-vs-gen threshold");
    auto* median_flag = predict->add_flag("--median", o.median, "gen-vs-gen: calibrate on the run's median");
    predict->add_option("--gen-threshold", o.gen_threshold, "gen-vs-gen: fixed threshold")->excludes(median_flag);
    predict->add_option("--similarity", o.similarity, "cosine | ssim | mse");
    predict->add_option("--out", predict_out, "predictions file");

    std::string eval_predictions, eval_gold, eval_out_dir;
    int decimals = 3;
    auto* evaluate = app.add_subcommand("evaluate", "compare predictions with gold labels");
    evaluate->add_option("--predictions", eval_predictions, "predictions file");
    evaluate->add_option("--gold", eval_gold, "gold labels or manifest");
    evaluate->add_option("--decimals", decimals, "printed precision")->check(CLI::Range(0, 17));
    evaluate->add_option("--out-dir", eval_out_dir, "where metrics.json goes");

    std::string survey_ratings, survey_out;
    auto* survey = app.add_subcommand("survey", "aggregate human ratings into labels");
    survey->add_option("--ratings", survey_ratings, "CSV: pair_id,participant_id,rating")->required();
    survey->add_option("--out", survey_out, "labels file");

    std::string m_encoders, m_detectors, m_modes;
    auto* matrix = app.add_subcommand("matrix", "evaluate every encoder x detector x mode");
    matrix->add_option("--encoders", m_encoders, "comma-separated encoder ids");
    matrix->add_option("--detectors", m_detectors, "comma-separated detector ids");
    matrix->add_option("--modes", m_modes, "comma-separated modes");
    matrix->add_option("--threshold", o.threshold, "orig-vs-gen threshold");
    matrix->add_option("--gen-threshold", o.gen_threshold, "gen-vs-gen: fixed threshold");

    std::string synth_dir, synth_call_log;
    std::size_t synth_records = 20;
    std::uint64_t synth_seed = 7;
    bool synth_blocked = false;
    int synth_latency = 0;
    double synth_rate = 6000;
    auto* synth = app.add_subcommand("synth", "write a labeled mock corpus and config");
    synth->add_option("--dir", synth_dir, "output directory")->required();
    synth->add_option("--records", synth_records, "number of records");
    synth->add_option("--seed", synth_seed, "corpus seed");
    synth->add_flag("--blocked", synth_blocked, "add a record with a blocked topic");
    synth->add_option("--latency-ms", synth_latency, "mock backend latency");
    synth->add_option("--call-log", synth_call_log, "mock backend call log");
    synth->add_option("--rate-limit", synth_rate, "mock backend requests per minute");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitConfig;
    }

    try {
        if (synth->parsed())
            return cmd_synth(synth_dir, synth_records, synth_seed, synth_blocked, synth_latency, synth_call_log,
                             synth_rate);
        if (evaluate->parsed())
            return cmd_evaluate(config_path, o, eval_predictions, eval_gold, decimals, eval_out_dir);
        if (survey->parsed()) return cmd_survey(config_path, o, survey_ratings, survey_out);
        const auto cfg = load_config(config_path, o);
        if (sanitize->parsed()) return cmd_sanitize(cfg);
        if (generate->parsed()) return cmd_generate(cfg);
        if (embed->parsed()) return cmd_embed(cfg);
        if (predict->parsed()) return cmd_predict(cfg, predict_out);
        if (matrix->parsed()) return cmd_matrix(cfg, m_encoders, m_detectors, m_modes);
    } catch (const ooc::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const ooc::DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return kExitData;
    } catch (const ooc::BackendError& e) {
        std::cerr << "backend error: " << e.what() << "\n";
        return kExitBackend;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitOther;
    }
    return kExitOther;
}
