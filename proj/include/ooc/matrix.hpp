#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "ooc/corpus.hpp"
#include "ooc/decision.hpp"
#include "ooc/evaluation.hpp"
#include "ooc/featurizer.hpp"
#include "ooc/pipeline.hpp"

namespace ooc::evaluation {

namespace fs = std::filesystem;

/// Shares one cache object per file across concurrently running cells.
class CacheRegistry {
public:
    std::shared_ptr<corpus::EmbeddingCache> get(const fs::path& path, std::uint32_t dim) {
        std::lock_guard lk(mu_);
        auto& slot = caches_[path.string()];
        if (!slot) slot = std::make_shared<corpus::EmbeddingCache>(path, dim);
        return slot;
    }

private:
    std::mutex mu_;
    std::map<std::string, std::shared_ptr<corpus::EmbeddingCache>> caches_;
};

struct MatrixCell {
    std::string encoder;
    std::string detector;
    decision::Mode mode = decision::Mode::orig_vs_gen;
    std::optional<MetricsReport> metrics;
    std::string error;  // set when the cell failed
    double wall_time_s = 0;

    std::string name() const { return encoder + "+" + detector + "/" + decision::to_string(mode); }
};

struct MatrixSpec {
    std::vector<std::string> encoders;
    std::vector<std::string> detectors;
    std::vector<decision::Mode> modes = {decision::Mode::orig_vs_gen, decision::Mode::gen_vs_gen};
    int workers = 2;
};

/// Accuracy descending; failed cells last; ties keep enumeration order.
inline void sort_cells(std::vector<MatrixCell>& cells) {
    std::stable_sort(cells.begin(), cells.end(), [](const MatrixCell& a, const MatrixCell& b) {
        const double ka = a.metrics && a.metrics->accuracy ? *a.metrics->accuracy : -1.0;
        const double kb = b.metrics && b.metrics->accuracy ? *b.metrics->accuracy : -1.0;
        return ka > kb;
    });
}

/// Runs every encoder x detector x mode cell over the generated records of
/// `records`. A failing cell records its error and does not stop the others.
inline std::vector<MatrixCell> run_matrix(std::span<const corpus::Record> records, const MatrixSpec& spec,
                                          const features::FeaturizerConfig& base, const fs::path& models_dir,
                                          const fs::path& output_dir, const decision::DecisionConfig& decision_base) {
    struct Job {
        std::string encoder, detector;
        std::size_t first_cell;
    };
    std::vector<Job> jobs;
    std::vector<MatrixCell> cells;
    for (const auto& e : spec.encoders)
        for (const auto& d : spec.detectors) {
            jobs.push_back({e, d, cells.size()});
            for (auto m : spec.modes) {
                MatrixCell c;
                c.encoder = e;
                c.detector = d;
                c.mode = m;
                cells.push_back(std::move(c));
            }
        }

    const auto gold = gold_from_records(records);
    CacheRegistry registry;
    std::atomic<std::size_t> next{0};

    auto run_job = [&](const Job& job) {
        const auto t0 = std::chrono::steady_clock::now();
        std::vector<pipeline::PairScores> scores;
        std::string failure;
        try {
            auto cfg = base;
            cfg.encoder_id = job.encoder;
            cfg.detector_id = job.detector;
            const auto f = features::Featurizer::load(cfg, models_dir);
            auto cache = registry.get(pipeline::cache_path(output_dir, f), static_cast<std::uint32_t>(f.dim()));
            for (const auto& r : records) {
                if (r.rejected() || r.status < corpus::Stage::generated) continue;
                for (const auto& p : pipeline::record_images(r)) pipeline::cached_embedding(p, f, *cache);
            }
            std::vector<corpus::Record> usable;
            for (const auto& r : records)
                if (!r.rejected() && r.status >= corpus::Stage::generated) usable.push_back(r);
            for (auto& r : usable) r.status = std::max(r.status, corpus::Stage::embedded);
            scores = pipeline::score_records(usable, pipeline::SimilarityKind::cosine, &f, cache.get());
        } catch (const std::exception& e) {
            failure = e.what();
        }
        const double elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        for (std::size_t k = 0; k < spec.modes.size(); ++k) {
            auto& cell = cells[job.first_cell + k];
            cell.wall_time_s = elapsed;
            if (!failure.empty()) {
                cell.error = failure;
                continue;
            }
            try {
                auto dcfg = decision_base;
                dcfg.mode = cell.mode;
                const auto preds = pipeline::decide(scores, dcfg);
                cell.metrics = compute_metrics(preds, gold, cell.name());
            } catch (const std::exception& e) {
                cell.error = e.what();
            }
        }
    };

    {
        std::vector<std::jthread> pool;
        const auto n = static_cast<std::size_t>(std::max(1, spec.workers));
        for (std::size_t i = 0; i < std::min(n, std::max<std::size_t>(1, jobs.size())); ++i)
            pool.emplace_back([&] {
                for (;;) {
                    const auto i = next.fetch_add(1);
                    if (i >= jobs.size()) return;
                    run_job(jobs[i]);
                }
            });
    }
    sort_cells(cells);
    return cells;
}

inline std::string matrix_csv(std::span<const MatrixCell> cells) {
    std::string s = "encoder,detector,mode,n,tp,fp,tn,fn,accuracy,precision,recall,f1,error\n";
    for (const auto& c : cells) {
        s += c.encoder + "," + c.detector + "," + decision::to_string(c.mode) + ",";
        if (c.metrics) {
            const auto& m = *c.metrics;
            s += std::to_string(m.n) + "," + std::to_string(m.cm.tp) + "," + std::to_string(m.cm.fp) + "," +
                 std::to_string(m.cm.tn) + "," + std::to_string(m.cm.fn) + "," + raw_number(m.accuracy) + "," +
                 raw_number(m.precision) + "," + raw_number(m.recall) + "," + raw_number(m.f1) + ",";
        } else {
            std::string err = c.error;
            std::replace(err.begin(), err.end(), ',', ';');
            std::replace(err.begin(), err.end(), '\n', ' ');
            s += ",,,,,,,,," + err;
        }
        s += "\n";
    }
    return s;
}

inline std::string matrix_timing_csv(std::span<const MatrixCell> cells) {
    std::string s = "encoder,detector,mode,wall_time_s\n";
    for (const auto& c : cells)
        s += c.encoder + "," + c.detector + "," + decision::to_string(c.mode) + "," + json(c.wall_time_s).dump() + "\n";
    return s;
}

}  // namespace ooc::evaluation
