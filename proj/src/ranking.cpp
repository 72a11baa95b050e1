#include "kbc/ranking.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <limits>
#include <numeric>

#include "kbc/error.hpp"
#include "kbc/kernels.hpp"

namespace kbc {

using nlohmann::json;

std::string_view score_mode_name(ScoreMode m) noexcept {
    return m == ScoreMode::Normalized ? "normalized" : "paper-literal";
}

ScoreMode parse_score_mode(std::string_view name) {
    if (name == "normalized") return ScoreMode::Normalized;
    if (name == "paper-literal" || name == "paper_literal") return ScoreMode::PaperLiteral;
    throw Error(Errc::ParseError, "unknown graph mode '" + std::string(name) + "'");
}

Weights parse_weights(std::string_view text) {
    std::vector<double> parts;
    std::size_t pos = 0;
    while (pos <= text.size()) {
        const std::size_t comma = text.find(',', pos);
        std::string_view raw = text.substr(pos, comma == std::string_view::npos ? std::string_view::npos : comma - pos);
        while (!raw.empty() && std::isspace(static_cast<unsigned char>(raw.front()))) raw.remove_prefix(1);
        while (!raw.empty() && std::isspace(static_cast<unsigned char>(raw.back()))) raw.remove_suffix(1);
        const std::string piece(raw);
        std::size_t used = 0;
        double v = 0.0;
        try {
            v = std::stod(piece, &used);
        } catch (const std::exception&) {
            throw Error(Errc::ParseError, "weights must be three numbers 'wg,wc,wb'");
        }
        if (used != piece.size() || !std::isfinite(v) || v < 0.0)
            throw Error(Errc::ParseError, "bad weight '" + piece + "'");
        parts.push_back(v);
        if (comma == std::string_view::npos) break;
        pos = comma + 1;
    }
    if (parts.size() != 3) throw Error(Errc::ParseError, "weights must be three numbers 'wg,wc,wb'");
    if (parts[0] + parts[1] + parts[2] == 0.0) throw Error(Errc::ParseError, "at least one weight must be positive");
    return Weights{parts[0], parts[1], parts[2]};
}

QualityScore combine_terms(double graph_similarity_0_100, double clip_cos, double blip_cos, Weights weights,
                           ScoreMode mode) {
    QualityScore s;
    s.mode = mode;
    s.weights = weights;
    s.graph_term = mode == ScoreMode::Normalized ? graph_similarity_0_100 / 100.0 : graph_similarity_0_100;
    s.clip_term = clip_cos;
    s.blip_term = blip_cos;
    s.total = weights.graph * s.graph_term + weights.clip * s.clip_term + weights.blip * s.blip_term;
    return s;
}

namespace {

EmbeddingVector fetch(EmbeddingBackend& embedder, const Payload& p, EmbedModel m) {
    try {
        return embedder.embed(p, m);
    } catch (const Error& e) {
        throw Error(Errc::EmbeddingUnavailable, std::string(embed_model_name(m)) + ": " + e.what());
    }
}

}  // namespace

QualityScore quality_score(const Payload& available, const KnowledgeGraph& available_graph, const Payload& candidate,
                           const KnowledgeGraph& candidate_graph, Weights weights, ScoreMode mode,
                           EmbeddingBackend& embedder) {
    const double graph = graph_similarity(available_graph, candidate_graph);
    const double clip = kernels::cosine(fetch(embedder, available, EmbedModel::Clip).values,
                                        fetch(embedder, candidate, EmbedModel::Clip).values);
    const double blip = kernels::cosine(fetch(embedder, available, EmbedModel::Blip).values,
                                        fetch(embedder, candidate, EmbedModel::Blip).values);
    return combine_terms(graph, clip, blip, weights, mode);
}

double RankEntry::total() const {
    return score ? score->total : -std::numeric_limits<double>::infinity();
}

std::size_t first_argmax(std::span<const double> totals) {
    if (totals.empty()) throw Error(Errc::Precondition, "argmax of an empty list");
    std::size_t best = 0;
    for (std::size_t i = 1; i < totals.size(); ++i) {
        if (totals[i] > totals[best]) best = i;
    }
    return best;
}

Ranking rank_candidates(const Payload& available, const KnowledgeGraph& available_graph,
                        std::span<const Candidate> candidates, Weights weights, ScoreMode mode,
                        EmbeddingBackend& embedder) {
    if (candidates.empty()) throw Error(Errc::Precondition, "no candidates to rank");
    Ranking out;
    out.entries.resize(candidates.size());

    std::optional<EmbeddingVector> avail_clip, avail_blip;
    std::string avail_error;
    try {
        avail_clip = fetch(embedder, available, EmbedModel::Clip);
        avail_blip = fetch(embedder, available, EmbedModel::Blip);
    } catch (const Error& e) {
        avail_error = e.what();
    }

    for (std::size_t i = 0; i < candidates.size(); ++i) {
        RankEntry& entry = out.entries[i];
        entry.position = i;
        if (!avail_error.empty()) {
            entry.error = avail_error;
            continue;
        }
        try {
            const double graph = graph_similarity(available_graph, candidates[i].graph);
            const double clip = kernels::cosine(avail_clip->values, fetch(embedder, candidates[i].payload, EmbedModel::Clip).values);
            const double blip = kernels::cosine(avail_blip->values, fetch(embedder, candidates[i].payload, EmbedModel::Blip).values);
            entry.score = combine_terms(graph, clip, blip, weights, mode);
        } catch (const Error& e) {
            entry.error = e.what();
        }
    }

    std::vector<double> totals;
    for (const auto& e : out.entries) totals.push_back(e.total());
    if (std::all_of(out.entries.begin(), out.entries.end(), [](const RankEntry& e) { return !e.score; }))
        throw Error(Errc::RankingFailed, out.entries.front().error);
    out.best_index = first_argmax(totals);
    out.order.resize(totals.size());
    std::iota(out.order.begin(), out.order.end(), std::size_t{0});
    std::stable_sort(out.order.begin(), out.order.end(), [&](std::size_t a, std::size_t b) { return totals[a] > totals[b]; });
    return out;
}

json to_json(const QualityScore& s) {
    return json{{"graph_term", s.graph_term},
                {"clip_term", s.clip_term},
                {"blip_term", s.blip_term},
                {"total", s.total},
                {"mode", score_mode_name(s.mode)},
                {"weights", {s.weights.graph, s.weights.clip, s.weights.blip}}};
}

}  // namespace kbc
