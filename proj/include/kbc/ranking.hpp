#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "kbc/backends.hpp"
#include "kbc/completion.hpp"
#include "kbc/kgraph.hpp"

namespace kbc {

/// How the [0, 100] graph similarity enters the sum. `Normalized` rescales
/// it to [0, 1] so it is commensurate with the two cosine terms;
/// `PaperLiteral` adds it unscaled.
enum class ScoreMode { Normalized, PaperLiteral };

std::string_view score_mode_name(ScoreMode m) noexcept;
ScoreMode parse_score_mode(std::string_view name);

struct Weights {
    double graph = 1.0;
    double clip = 1.0;
    double blip = 1.0;

    bool operator==(const Weights&) const = default;
};

/// "wg,wc,wb"
Weights parse_weights(std::string_view text);

struct QualityScore {
    double graph_term = 0.0;
    double clip_term = 0.0;
    double blip_term = 0.0;
    double total = 0.0;
    ScoreMode mode = ScoreMode::Normalized;
    Weights weights;
};

/// Builds the score from its raw components: graph similarity in [0, 100]
/// and the two embedding cosines.
QualityScore combine_terms(double graph_similarity_0_100, double clip_cos, double blip_cos, Weights weights,
                           ScoreMode mode);

/// Knowledge-plus-embedding quality of one candidate against the available
/// modality. Throws EmbeddingUnavailable when an embedding call fails.
QualityScore quality_score(const Payload& available, const KnowledgeGraph& available_graph, const Payload& candidate,
                           const KnowledgeGraph& candidate_graph, Weights weights, ScoreMode mode,
                           EmbeddingBackend& embedder);

struct RankEntry {
    std::size_t position = 0;  // index into the candidate list
    std::optional<QualityScore> score;
    std::string error;

    /// -inf for candidates that could not be scored.
    double total() const;
};

struct Ranking {
    std::vector<RankEntry> entries;  // candidate order
    std::vector<std::size_t> order;  // positions by descending total, stable
    std::size_t best_index = 0;
};

/// First index attaining the maximum. Requires a non-empty span.
std::size_t first_argmax(std::span<const double> totals);

/// Scores every candidate and picks the first maximum. Candidates whose
/// embeddings fail score -inf; throws RankingFailed if all fail.
Ranking rank_candidates(const Payload& available, const KnowledgeGraph& available_graph,
                        std::span<const Candidate> candidates, Weights weights, ScoreMode mode,
                        EmbeddingBackend& embedder);

nlohmann::json to_json(const QualityScore& s);

}  // namespace kbc
