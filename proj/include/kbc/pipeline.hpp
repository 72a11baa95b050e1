#pragma once

#include <atomic>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "kbc/backends.hpp"
#include "kbc/completion.hpp"
#include "kbc/ranking.hpp"
#include "kbc/simeval.hpp"
#include "kbc/store.hpp"

namespace kbc {

struct PipelineConfig {
    BackendConfig backends;
    std::optional<Domain> domain;  // unset: take the manifest's
    double eta = 0.5;
    std::uint64_t seed = 0;
    std::size_t n_candidates = 5;
    std::size_t object_count = 6;
    std::size_t kg_relationship_count = 8;
    std::size_t repair_attempts = 2;
    Weights weights;
    ScoreMode mode = ScoreMode::Normalized;
    std::size_t workers = 1;
    std::size_t candidate_workers = 1;
    bool cache = false;
    std::filesystem::path cache_dir;  // empty: <out>/cache
    std::filesystem::path template_dir;  // empty: the bundled templates
    double max_failure_fraction = 0.0;
    std::string general_generator = "sdxl";
    std::string medical_generator = "cheff";

    /// Throws Precondition on out-of-range knobs. Runs before any network call.
    void validate() const;
    GenerationConfig generation() const;
    nlohmann::json to_json() const;
    static PipelineConfig from_json(const nlohmann::json& j);
};

/// Set from a signal handler; long-running commands stop between samples.
std::atomic<bool>& interrupt_flag();

struct BackendRefs {
    ChatBackend& chat;
    EmbeddingBackend& embed;
    ImageBackend& image;
};

struct CompleteResult {
    std::filesystem::path run_dir;
    std::size_t attempted = 0;
    std::size_t completed = 0;
    std::vector<std::pair<std::string, std::string>> errors;  // sample id, message
    bool interrupted = false;
    int exit_code = 0;
};

/// Samples the run works on: every masked sample with its withheld modality,
/// plus samples that arrive with exactly one modality. Manifest order.
std::vector<std::pair<const Sample*, Modality>> completion_targets(const Manifest& manifest, const MissingMask& mask);

/// Extract, generate, rank, and persist each target sample.
CompleteResult cmd_complete(const Manifest& manifest, const MissingMask& mask, const PipelineConfig& config,
                            const std::filesystem::path& out_root, const std::string& run_id);
CompleteResult cmd_complete(const Manifest& manifest, const MissingMask& mask, const PipelineConfig& config,
                            const std::filesystem::path& out_root, const std::string& run_id, BackendRefs backends);

/// Masks round(eta * M) of the M samples that have both modalities.
MissingMask cmd_simulate(const Manifest& manifest, double eta, std::uint64_t seed);

struct EvalResult {
    std::string dataset_id;
    double eta = 0.0;
    std::uint64_t seed = 0;
    std::size_t samples = 0;
    double f1 = 0.0;
    double map = 0.0;
    std::optional<double> ss;

    nlohmann::json to_json() const;
    static EvalResult from_json(const nlohmann::json& j);
};

/// F1 and mAP from tables; SS when a completed run and its manifest are given.
EvalResult cmd_evaluate(const PredictionTable& pred, const GoldTable& gold, double eta, std::uint64_t seed,
                        const std::string& dataset_id = {});
/// SS between each chosen completion and the withheld ground truth.
double run_similarity(const RunRecord& run, const Manifest& manifest, EmbeddingBackend& embedder);

struct ExtractOutput {
    std::string sample_id;
    std::optional<KnowledgeResult> knowledge;
    std::string error;
    Transcript transcript;
};

std::vector<ExtractOutput> cmd_extract(const Manifest& manifest, const std::vector<std::string>& ids,
                                       const PipelineConfig& config, ChatBackend& chat, ImageBackend& images);
nlohmann::json to_json(const ExtractOutput& o);

struct RankOutcome {
    std::string sample_id;
    std::size_t stored_best = 0;
    std::size_t best = 0;
    Ranking ranking;
    std::string error;
};

/// Re-ranks the stored candidate sets of a run.
std::vector<RankOutcome> cmd_rank(const RunRecord& run, Weights weights, ScoreMode mode, EmbeddingBackend& embedder);

/// Markdown with one table per missing rate: a row per seed plus the mean.
std::string cmd_report(const std::vector<EvalResult>& results);

struct ReplayItem {
    std::string sample_id;
    std::size_t candidate_index = 0;
    std::string stored_total;
    std::string replayed_total;
    bool decomposition_ok = true;
};

struct ReplayReport {
    std::vector<ReplayItem> items;
    std::vector<std::string> problems;
    bool ok() const { return problems.empty(); }
};

/// Recomputes every stored quality score from the persisted payloads and
/// graphs and compares the totals in scores.csv.
ReplayReport cmd_replay(const std::filesystem::path& run_dir, EmbeddingBackend& embedder);

/// Backends described by a persisted run's config snapshot.
PipelineConfig config_from_run(const RunRecord& run);

std::string default_run_id(const PipelineConfig& config, const MissingMask& mask);

}  // namespace kbc
