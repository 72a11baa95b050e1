#pragma once

#include <filesystem>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "kbc/completion.hpp"
#include "kbc/ranking.hpp"
#include "kbc/simeval.hpp"

namespace kbc {

struct Manifest {
    std::string dataset_id;
    Domain domain = Domain::General;
    std::vector<std::string> label_names;
    std::vector<Sample> samples;
    /// Relative image path per sample, empty when the sample has no image.
    std::vector<std::string> image_refs;

    const Sample* find(std::string_view id) const;
    std::vector<std::string> ids() const;
};

/// Reads a manifest and every image it references (paths relative to the
/// manifest's directory). Throws ParseError, MissingFile(sample_id).
Manifest load_manifest(const std::filesystem::path& path);

/// Writes `dir/manifest.json` plus `dir/images/<id>.<ext>` for every image.
void write_manifest(const Manifest& m, const std::filesystem::path& dir);

GoldTable gold_table(const Manifest& m);

/// "%.9g", the text form of every persisted float.
std::string format_double(double v);

/// File-system-safe form of a sample id; unsafe ids get a digest suffix so
/// distinct ids never collide.
std::string safe_name(std::string_view id);

std::string payload_extension(const Payload& p);

struct SampleRecord {
    std::string sample_id;
    Modality missing = Modality::Image;
    std::string error;  // empty when the sample completed
    Transcript transcript;
    std::optional<Payload> available;
    std::optional<KnowledgeResult> knowledge;
    std::optional<CandidateSet> candidates;
    std::optional<Ranking> ranking;
    double seconds = 0.0;

    bool completed() const { return error.empty() && ranking.has_value(); }
    std::optional<std::size_t> chosen() const;
};

struct RunRecord {
    std::string run_id;
    nlohmann::json config;
    std::vector<SampleRecord> samples;
    bool interrupted = false;
};

/// Serialized writer for one run directory. `append` may be called from many
/// workers; each sample's files are written once and never touched again.
class RunWriter {
public:
    /// Creates `root/run_id` with its subdirectories and config.json.
    /// Throws RunExists, IoError.
    RunWriter(const std::filesystem::path& root, const std::string& run_id, const nlohmann::json& config);

    const std::filesystem::path& dir() const { return dir_; }
    void append(const SampleRecord& record);
    /// Writes scores.csv and report.md from everything appended so far.
    std::filesystem::path finalize(bool interrupted = false);

private:
    struct Summary {
        std::string sample_id;
        Modality missing = Modality::Image;
        std::string error;
        std::optional<Ranking> ranking;
        std::vector<std::size_t> candidate_indices;  // by ranking position
        std::size_t generation_failures = 0;
        double seconds = 0.0;
    };

    std::filesystem::path dir_;
    std::string run_id_;
    nlohmann::json config_;
    std::mutex mu_;
    std::vector<Summary> done_;
    bool finalized_ = false;
};

std::filesystem::path persist_run(const RunRecord& record, const std::filesystem::path& root);

/// Reads a persisted run back, payloads included. Timing is not restored.
RunRecord load_run(const std::filesystem::path& dir);

struct ScoreRow {
    std::string sample_id;
    std::size_t candidate_index = 0;
    std::string graph_term, clip_term, blip_term, total;  // as written
    bool chosen = false;
};

std::vector<ScoreRow> read_scores_csv(const std::filesystem::path& path);

nlohmann::json to_json(const Ranking& r);
Ranking ranking_from_json(const nlohmann::json& j);

}  // namespace kbc
